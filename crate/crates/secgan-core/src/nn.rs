//! Network building blocks on top of the autodiff graph: a named parameter
//! store, conv/deconv/linear layers, instance and batch norm, Adam, and a
//! binary checkpoint format that round-trips parameters bit-exactly.

use crate::error::{Result, SecganError};
use crate::tensor::{ConvGeom, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub trainable: bool,
}

/// Ordered, named parameter set for one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f32>, trainable: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param { name: name.to_string(), value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        let id = self.index[name];
        &self.params[id].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        let id = self.index[name];
        &mut self.params[id].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Total number of scalar parameters (trainable only).
    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over all parameter bytes, in registration order.
    pub fn byte_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Put every parameter on a graph as a leaf. Trainable parameters require
    /// grad iff `trainable_grads` is set (discriminator weights enter the
    /// generator step as plain constants).
    pub fn upload(&self, g: &Graph, trainable_grads: bool) -> Uploaded {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable_grads && p.trainable))
            .collect();
        Uploaded { vars }
    }
}

/// Graph handles for one uploaded store, aligned with its parameter order.
pub struct Uploaded {
    vars: Vec<Var>,
}

impl Uploaded {
    pub fn var(&self, store: &ParamStore, name: &str) -> Var {
        self.vars[store.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradients of `loss` for every trainable parameter, as `(index, grad)`.
pub fn param_grads(
    g: &Graph,
    loss: Var,
    store: &ParamStore,
    uploaded: &Uploaded,
) -> Vec<(usize, ArrayD<f32>)> {
    let wrt: Vec<Var> = store
        .params
        .iter()
        .zip(uploaded.vars.iter())
        .filter(|(p, _)| p.trainable)
        .map(|(_, v)| *v)
        .collect();
    let ids: Vec<usize> = store
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    let grads = g.grad(loss, &wrt);
    ids.into_iter().zip(grads.into_iter().map(|v| g.value(v))).collect()
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConvCfg {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_init<R: Rng>(store: &mut ParamStore, name: &str, cfg: ConvCfg, rng: &mut R) {
    let fan_in = cfg.in_c * cfg.k * cfg.k;
    let w = normal_array(&[cfg.out_c, cfg.in_c, cfg.k, cfg.k], fan_in, rng);
    store.register(&format!("{name}.weight"), w, true);
    store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cfg.out_c])), true);
}

pub fn conv_fwd(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    cfg: ConvCfg,
    x: Var,
) -> Var {
    let shape = g.shape(x);
    assert_eq!(shape[1], cfg.in_c, "{name}: expected {} input channels, got {}", cfg.in_c, shape[1]);
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let geom = ConvGeom::new(b, cfg.in_c, h, w, cfg.k, cfg.k, cfg.stride, cfg.pad);
    let cols = g.im2col(x, geom);
    let wv = up.var(store, &format!("{name}.weight"));
    let wflat = g.reshape(wv, &[cfg.out_c, cfg.in_c * cfg.k * cfg.k]);
    let wt = g.transpose(wflat);
    let m = g.matmul(cols, wt);
    let y = g.rows_to_nchw(m, [b, cfg.out_c, geom.h_out(), geom.w_out()]);
    add_channel_bias(g, store, up, name, cfg.out_c, y)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTCfg {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTCfg {
    pub fn out_hw(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.k - 2 * self.pad
    }
}

pub fn conv_t_init<R: Rng>(store: &mut ParamStore, name: &str, cfg: ConvTCfg, rng: &mut R) {
    let fan_in = cfg.in_c * cfg.k * cfg.k / (cfg.stride * cfg.stride);
    let w = normal_array(&[cfg.in_c, cfg.out_c, cfg.k, cfg.k], fan_in.max(1), rng);
    store.register(&format!("{name}.weight"), w, true);
    store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cfg.out_c])), true);
}

pub fn conv_t_fwd(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    cfg: ConvTCfg,
    x: Var,
) -> Var {
    let shape = g.shape(x);
    assert_eq!(shape[1], cfg.in_c, "{name}: expected {} input channels, got {}", cfg.in_c, shape[1]);
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let (ho, wo) = (cfg.out_hw(h), cfg.out_hw(w));
    let rows = g.nchw_to_rows(x);
    let wv = up.var(store, &format!("{name}.weight"));
    let w2 = g.reshape(wv, &[cfg.in_c, cfg.out_c * cfg.k * cfg.k]);
    let contrib = g.matmul(rows, w2);
    // adjoint of the conv that maps (ho, wo) back onto (h, w)
    let geom = ConvGeom::new(b, cfg.out_c, ho, wo, cfg.k, cfg.k, cfg.stride, cfg.pad);
    debug_assert_eq!(geom.h_out(), h);
    let y = g.col2im(contrib, geom);
    add_channel_bias(g, store, up, name, cfg.out_c, y)
}

fn add_channel_bias(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    out_c: usize,
    y: Var,
) -> Var {
    let bias = up.var(store, &format!("{name}.bias"));
    let shape = g.shape(y);
    let b4 = g.reshape(bias, &[1, out_c, 1, 1]);
    let bb = g.broadcast(b4, &shape);
    g.add(y, bb)
}

pub fn linear_init<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    in_f: usize,
    out_f: usize,
    rng: &mut R,
) {
    let w = normal_array(&[in_f, out_f], in_f, rng);
    store.register(&format!("{name}.weight"), w, true);
    store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_f])), true);
}

pub fn linear_fwd(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    x: Var,
) -> Var {
    let w = up.var(store, &format!("{name}.weight"));
    let bias = up.var(store, &format!("{name}.bias"));
    let y = g.matmul(x, w);
    let shape = g.shape(y);
    let b2 = g.reshape(bias, &[1, shape[1]]);
    let bb = g.broadcast(b2, &shape);
    g.add(y, bb)
}

pub const NORM_EPS: f32 = 1e-5;

pub fn norm_params_init(store: &mut ParamStore, name: &str, c: usize) {
    store.register(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), 1.0), true);
    store.register(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), true);
}

/// Instance norm with affine parameters; per-example spatial statistics in
/// both train and eval mode.
pub fn instance_norm_fwd(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    x: Var,
) -> Var {
    let shape = g.shape(x);
    let mu = g.mean_axes(x, &[2, 3]);
    let mu_b = g.broadcast(mu, &shape);
    let xc = g.sub(x, mu_b);
    let var = g.mean_axes(g.mul(xc, xc), &[2, 3]);
    let std = g.sqrt(g.scalar_add(var, NORM_EPS));
    let inv = g.broadcast(g.recip(std), &shape);
    let xn = g.mul(xc, inv);
    scale_shift(g, store, up, name, xn, &shape)
}

pub fn batch_norm_init(store: &mut ParamStore, name: &str, c: usize) {
    norm_params_init(store, name, c);
    store.register(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c])), false);
    store.register(&format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[c]), 1.0), false);
}

pub const BN_MOMENTUM: f32 = 0.1;

/// Deferred running-stat updates collected during a training forward pass and
/// applied to the store after the step.
#[derive(Default)]
pub struct BnUpdates(pub Vec<(String, ArrayD<f32>, ArrayD<f32>)>);

impl BnUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for (name, mean, var) in self.0 {
            let rm = store.get_mut(&format!("{name}.running_mean"));
            rm.zip_mut_with(&mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            let rv = store.get_mut(&format!("{name}.running_var"));
            rv.zip_mut_with(&var, |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
        }
    }
}

pub fn batch_norm_fwd(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    x: Var,
    train: bool,
    updates: Option<&mut BnUpdates>,
) -> Var {
    let shape = g.shape(x);
    if train {
        let mu = g.mean_axes(x, &[0, 2, 3]);
        let mu_b = g.broadcast(mu, &shape);
        let xc = g.sub(x, mu_b);
        let var = g.mean_axes(g.mul(xc, xc), &[0, 2, 3]);
        if let Some(upd) = updates {
            let n = (shape[0] * shape[2] * shape[3]) as f32;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mean_v = g.value(mu).into_shape_with_order(IxDyn(&[shape[1]])).unwrap();
            let var_v = g
                .value(var)
                .into_shape_with_order(IxDyn(&[shape[1]]))
                .unwrap()
                .mapv(|v| v * unbias);
            upd.0.push((name.to_string(), mean_v, var_v));
        }
        let std = g.sqrt(g.scalar_add(var, NORM_EPS));
        let inv = g.broadcast(g.recip(std), &shape);
        let xn = g.mul(xc, inv);
        scale_shift(g, store, up, name, xn, &shape)
    } else {
        let c = shape[1];
        let rm = store.get(&format!("{name}.running_mean")).clone();
        let rv = store.get(&format!("{name}.running_var")).clone();
        let rm = g.constant(rm.into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap());
        let rv = g.constant(rv.into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap());
        let mu_b = g.broadcast(rm, &shape);
        let xc = g.sub(x, mu_b);
        let std = g.sqrt(g.scalar_add(rv, NORM_EPS));
        let inv = g.broadcast(g.recip(std), &shape);
        let xn = g.mul(xc, inv);
        scale_shift(g, store, up, name, xn, &shape)
    }
}

fn scale_shift(
    g: &Graph,
    store: &ParamStore,
    up: &Uploaded,
    name: &str,
    xn: Var,
    shape: &[usize],
) -> Var {
    let c = shape[1];
    let gamma = up.var(store, &format!("{name}.gamma"));
    let beta = up.var(store, &format!("{name}.beta"));
    let gb = g.broadcast(g.reshape(gamma, &[1, c, 1, 1]), shape);
    let bb = g.broadcast(g.reshape(beta, &[1, c, 1, 1]), shape);
    g.add(g.mul(xn, gb), bb)
}

/// Broadcast a `[B, n]` label block to `[B, n, H, W]` constant channels.
pub fn label_channels(g: &Graph, y: Var, h: usize, w: usize) -> Var {
    let shape = g.shape(y);
    let (b, n) = (shape[0], shape[1]);
    let y4 = g.reshape(y, &[b, n, 1, 1]);
    g.broadcast(y4, &[b, n, h, w])
}

fn normal_array<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. State arrays align with the store's parameter
/// order (trainable entries only are ever touched).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        let m = store.params().iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        let v = store.params().iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { beta1, beta2, eps, weight_decay, t: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, ArrayD<f32>)], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads {
            let p = &mut store.params[*idx];
            debug_assert!(p.trainable);
            let m = &mut self.m[*idx];
            let v = &mut self.v[*idx];
            let wd = self.weight_decay;
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|pv, mv, vv, gv| {
                    let gv = gv + wd * *pv;
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    fn state_tensors(&self) -> Vec<(String, &ArrayD<f32>)> {
        let mut out = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("m.{i}"), m));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("v.{i}"), v));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// checkpoint blobs
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"SECGANCK";

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Write named tensors plus a JSON metadata value. f32 little-endian, exact.
pub fn save_blob(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &ArrayD<f32>, bool)],
) -> Result<()> {
    let header = BlobHeader {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, a, trainable)| TensorInfo {
                name: name.clone(),
                shape: a.shape().to_vec(),
                trainable: *trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| SecganError::Checkpoint(format!("header encode: {e}")))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, a, _) in tensors {
        for &v in a.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a blob written by [`save_blob`].
pub fn load_blob(path: &Path) -> Result<(serde_json::Value, Vec<(String, ArrayD<f32>, bool)>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SecganError::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let json_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let header: BlobHeader = serde_json::from_slice(&json)
        .map_err(|e| SecganError::Checkpoint(format!("header decode: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let n: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        f.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), data)
            .map_err(|e| SecganError::Checkpoint(format!("tensor {}: {e}", info.name)))?;
        tensors.push((info.name, arr, info.trainable));
    }
    Ok((header.meta, tensors))
}

pub fn save_store(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(String, &ArrayD<f32>, bool)> = store
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.value, p.trainable))
        .collect();
    save_blob(path, meta, &tensors)
}

pub fn load_store(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let (meta, tensors) = load_blob(path)?;
    let mut store = ParamStore::new();
    for (name, value, trainable) in tensors {
        store.register(&name, value, trainable);
    }
    Ok((meta, store))
}

pub fn save_adam(path: &Path, meta: &serde_json::Value, adam: &Adam) -> Result<()> {
    let mut m = meta.clone();
    if let serde_json::Value::Object(ref mut map) = m {
        map.insert("t".into(), serde_json::json!(adam.t));
        map.insert("beta1".into(), serde_json::json!(adam.beta1));
        map.insert("beta2".into(), serde_json::json!(adam.beta2));
        map.insert("eps".into(), serde_json::json!(adam.eps));
        map.insert("weight_decay".into(), serde_json::json!(adam.weight_decay));
    }
    let tensors: Vec<(String, &ArrayD<f32>, bool)> = adam
        .state_tensors()
        .into_iter()
        .map(|(n, a)| (n, a, false))
        .collect();
    save_blob(path, &m, &tensors)
}

pub fn load_adam(path: &Path, store: &ParamStore) -> Result<Adam> {
    let (meta, tensors) = load_blob(path)?;
    let get = |k: &str| -> Result<f64> {
        meta.get(k)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| SecganError::Checkpoint(format!("optimizer meta missing {k}")))
    };
    let mut adam = Adam::new(
        store,
        get("beta1")? as f32,
        get("beta2")? as f32,
        get("eps")? as f32,
        get("weight_decay")? as f32,
    );
    adam.t = meta
        .get("t")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| SecganError::Checkpoint("optimizer meta missing t".into()))?;
    for (name, value, _) in tensors {
        let (kind, idx) = name
            .split_once('.')
            .ok_or_else(|| SecganError::Checkpoint(format!("bad state tensor {name}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| SecganError::Checkpoint(format!("bad state tensor {name}")))?;
        match kind {
            "m" => adam.m[idx] = value,
            "v" => adam.v[idx] = value,
            _ => return Err(SecganError::Checkpoint(format!("bad state tensor {name}"))),
        }
    }
    Ok(adam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_t_is_adjoint_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = ConvTCfg { in_c: 4, out_c: 3, k: 4, stride: 2, pad: 1 };
        conv_t_init(&mut store, "up", cfg, &mut rng);
        let g = Graph::new();
        let up = store.upload(&g, false);
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 4, 8, 8])));
        let y = conv_t_fwd(&g, &store, &up, "up", cfg, x);
        assert_eq!(g.shape(y), vec![2, 3, 16, 16]);
    }

    #[test]
    fn conv_fwd_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = ConvCfg { in_c: 3, out_c: 8, k: 4, stride: 2, pad: 1 };
        conv_init(&mut store, "c", cfg, &mut rng);
        let g = Graph::new();
        let up = store.upload(&g, false);
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 3, 16, 16])));
        let y = conv_fwd(&g, &store, &up, "c", cfg, x);
        assert_eq!(g.shape(y), vec![2, 8, 8, 8]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.register("w", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        let mut adam = Adam::new(&store, 0.5, 0.999, 1e-8, 0.0);
        let grad = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        adam.step(&mut store, &[(0, grad)], 0.1);
        for &v in store.get("w").iter() {
            assert!(v < 1.0);
        }
    }

    #[test]
    fn blob_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        conv_init(&mut store, "c", ConvCfg { in_c: 3, out_c: 4, k: 3, stride: 1, pad: 1 }, &mut rng);
        let meta = serde_json::json!({"kind": "test", "resolution": 32});
        save_store(&path, &meta, &store).unwrap();
        let (meta2, store2) = load_store(&path).unwrap();
        assert_eq!(meta2["kind"], "test");
        assert_eq!(store.byte_hash(), store2.byte_hash());
    }

    #[test]
    fn instance_norm_normalizes() {
        let mut store = ParamStore::new();
        norm_params_init(&mut store, "in1", 2);
        let g = Graph::new();
        let up = store.upload(&g, false);
        let data: Vec<f32> = (0..32).map(|i| i as f32).collect();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 4, 4]), data).unwrap());
        let y = instance_norm_fwd(&g, &store, &up, "in1", x);
        let v = g.value(y);
        for c in 0..2 {
            let plane: Vec<f32> = (0..16).map(|p| v[[0, c, p / 4, p % 4]]).collect();
            let mean: f32 = plane.iter().sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
        }
    }
}
