//! The parsing network P: a small encoder-decoder FCN mapping RGB images to
//! soft 12-segment masks. P is trained once on (image, mask) pairs and then
//! frozen; inside GAN training its parameters never update, but gradients
//! still flow through it into the RGB generator.

use crate::domain::{ImageBatch, SegmentTaxonomy, SoftMask, NUM_SEGMENTS};
use crate::error::{Result, SecganError};
use crate::losses;
use crate::nn::{
    self, conv_fwd, conv_init, conv_t_fwd, conv_t_init, instance_norm_fwd, norm_params_init,
    param_grads, Adam, ConvCfg, ConvTCfg, ParamStore, Uploaded,
};
use crate::rng::stream;
use crate::tensor::{Graph, Var};
use ndarray::{Array3, Array4, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A trained parser: parameters plus the resolution it was trained for.
/// One parser per resolution.
#[derive(Debug, Clone)]
pub struct ParserHandle {
    pub resolution: usize,
    pub widths: [usize; 3],
    pub store: ParamStore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParserTrainConfig {
    pub widths: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ParserTrainConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64], epochs: 12, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

fn init_parser<R: Rng>(store: &mut ParamStore, widths: [usize; 3], rng: &mut R) {
    let [w0, w1, w2] = widths;
    conv_init(store, "e0", ConvCfg { in_c: 3, out_c: w0, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "en0", w0);
    conv_init(store, "e1", ConvCfg { in_c: w0, out_c: w1, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "en1", w1);
    conv_init(store, "e2", ConvCfg { in_c: w1, out_c: w2, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "en2", w2);
    conv_t_init(store, "d0", ConvTCfg { in_c: w2, out_c: w1, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "dn0", w1);
    conv_t_init(store, "d1", ConvTCfg { in_c: w1 + w1, out_c: w0, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "dn1", w0);
    conv_t_init(
        store,
        "d2",
        ConvTCfg { in_c: w0 + w0, out_c: NUM_SEGMENTS, k: 4, stride: 2, pad: 1 },
        rng,
    );
}

impl ParserHandle {
    pub fn build<R: Rng>(resolution: usize, widths: [usize; 3], rng: &mut R) -> Result<Self> {
        if resolution % 8 != 0 {
            return Err(SecganError::Config(format!(
                "parser resolution must be divisible by 8, got {resolution}"
            )));
        }
        let mut store = ParamStore::new();
        init_parser(&mut store, widths, rng);
        Ok(Self { resolution, widths, store })
    }

    /// Graph forward: `[B, 3, h, h]` image -> `[B, 12, h, h]` soft mask.
    /// Gradients flow through to `x`; whether they flow into the parser's own
    /// parameters is decided by how `up` was uploaded (frozen use passes
    /// `trainable_grads = false`).
    pub fn forward(&self, g: &Graph, up: &Uploaded, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(SecganError::shape(format!(
                "parser expects [B, 3, h, h], got {shape:?}"
            )));
        }
        if shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(SecganError::contract(format!(
                "parser trained at {}, input is {}x{}",
                self.resolution, shape[2], shape[3]
            )));
        }
        let store = &self.store;
        let [w0, w1, w2] = self.widths;
        let mut t = conv_fwd(g, store, up, "e0", ConvCfg { in_c: 3, out_c: w0, k: 4, stride: 2, pad: 1 }, x);
        t = instance_norm_fwd(g, store, up, "en0", t);
        let e0 = g.relu(t);
        t = conv_fwd(g, store, up, "e1", ConvCfg { in_c: w0, out_c: w1, k: 4, stride: 2, pad: 1 }, e0);
        t = instance_norm_fwd(g, store, up, "en1", t);
        let e1 = g.relu(t);
        t = conv_fwd(g, store, up, "e2", ConvCfg { in_c: w1, out_c: w2, k: 4, stride: 2, pad: 1 }, e1);
        t = instance_norm_fwd(g, store, up, "en2", t);
        let e2 = g.relu(t);
        t = conv_t_fwd(g, store, up, "d0", ConvTCfg { in_c: w2, out_c: w1, k: 4, stride: 2, pad: 1 }, e2);
        t = instance_norm_fwd(g, store, up, "dn0", t);
        t = g.relu(t);
        t = g.concat_c(t, e1);
        t = conv_t_fwd(g, store, up, "d1", ConvTCfg { in_c: w1 + w1, out_c: w0, k: 4, stride: 2, pad: 1 }, t);
        t = instance_norm_fwd(g, store, up, "dn1", t);
        t = g.relu(t);
        t = g.concat_c(t, e0);
        t = conv_t_fwd(
            g,
            store,
            up,
            "d2",
            ConvTCfg { in_c: w0 + w0, out_c: NUM_SEGMENTS, k: 4, stride: 2, pad: 1 },
            t,
        );
        Ok(g.softmax_c(t))
    }

    /// Frozen inference on a domain-typed batch.
    pub fn parse(&self, x: &ImageBatch) -> Result<SoftMask> {
        let g = Graph::new();
        let up = self.store.upload(&g, false);
        let xv = g.constant(x.data().clone().into_dyn());
        let out = self.forward(&g, &up, xv)?;
        let v = g.value(out);
        let shape = v.shape().to_vec();
        let arr4 = v
            .into_shape_with_order(IxDyn(&shape))
            .unwrap()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| SecganError::shape(format!("parser output: {e}")))?;
        SoftMask::new(arr4)
    }

    pub fn byte_hash(&self) -> String {
        self.store.byte_hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "parser",
            "resolution": self.resolution,
            "widths": self.widths,
            "taxonomy_hash": SegmentTaxonomy::hash(),
        });
        nn::save_store(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = nn::load_store(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("parser") {
            return Err(SecganError::Checkpoint(format!(
                "{}: not a parser checkpoint",
                path.display()
            )));
        }
        let tax = meta
            .get("taxonomy_hash")
            .and_then(|v| v.as_str())
            .ok_or_else(|| SecganError::Checkpoint("parser meta missing taxonomy_hash".into()))?;
        if tax != SegmentTaxonomy::hash() {
            return Err(SecganError::Checkpoint(
                "parser was trained against a different segment taxonomy".into(),
            ));
        }
        let resolution = meta
            .get("resolution")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| SecganError::Checkpoint("parser meta missing resolution".into()))?
            as usize;
        let widths_v = meta
            .get("widths")
            .and_then(|v| v.as_array())
            .ok_or_else(|| SecganError::Checkpoint("parser meta missing widths".into()))?;
        if widths_v.len() != 3 {
            return Err(SecganError::Checkpoint("parser widths must have 3 entries".into()));
        }
        let mut widths = [0usize; 3];
        for (i, v) in widths_v.iter().enumerate() {
            widths[i] = v
                .as_u64()
                .ok_or_else(|| SecganError::Checkpoint("bad parser width".into()))?
                as usize;
        }
        Ok(Self { resolution, widths, store })
    }
}

/// Train a parser with per-pixel cross entropy on (image, one-hot mask)
/// pairs. Images are `[3, h, h]` in [-1, 1]; masks `[12, h, h]` one-hot.
pub fn train_parser(
    pairs: &[(Array3<f32>, Array3<f32>)],
    config: &ParserTrainConfig,
) -> Result<ParserHandle> {
    if pairs.is_empty() {
        return Err(SecganError::Dataset("parser training set is empty".into()));
    }
    let h = pairs[0].0.shape()[1];
    for (i, (img, mask)) in pairs.iter().enumerate() {
        if img.shape() != [3, h, h] {
            return Err(SecganError::shape(format!(
                "pair {i}: image shape {:?}, expected [3, {h}, {h}]",
                img.shape()
            )));
        }
        if mask.shape() != [NUM_SEGMENTS, h, h] {
            return Err(SecganError::shape(format!(
                "pair {i}: mask shape {:?} does not match image resolution {h}",
                mask.shape()
            )));
        }
    }

    let mut init_rng = stream(config.seed, "parser/init");
    let mut parser = ParserHandle::build(h, config.widths, &mut init_rng)?;
    let mut adam = Adam::new(&parser.store, 0.9, 0.999, 1e-8, 0.0);
    let mut order_rng = stream(config.seed, "parser/order");

    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    for _epoch in 0..config.epochs {
        indices.shuffle(&mut order_rng);
        for chunk in indices.chunks(config.batch_size.max(1)) {
            let b = chunk.len();
            let mut xb = Array4::zeros((b, 3, h, h));
            let mut mb = Array4::zeros((b, NUM_SEGMENTS, h, h));
            for (bi, &idx) in chunk.iter().enumerate() {
                xb.index_axis_mut(ndarray::Axis(0), bi).assign(&pairs[idx].0);
                mb.index_axis_mut(ndarray::Axis(0), bi).assign(&pairs[idx].1);
            }
            let g = Graph::new();
            let up = parser.store.upload(&g, true);
            let x = g.constant(xb.into_dyn());
            let target = g.constant(mb.into_dyn());
            let probs = parser.forward(&g, &up, x)?;
            let loss = losses::rec_loss_seg(&g, target, probs)?;
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(SecganError::Diverged { step: adam.t, what: "parser loss".into() });
            }
            let grads = param_grads(&g, loss, &parser.store, &up);
            adam.step(&mut parser.store, &grads, config.lr);
        }
    }
    Ok(parser)
}

/// Mean per-pixel argmax accuracy of a parser against ground-truth masks.
pub fn pixel_accuracy(
    parser: &ParserHandle,
    pairs: &[(Array3<f32>, Array3<f32>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SecganError::Dataset("empty evaluation set".into()));
    }
    let h = parser.resolution;
    let mut correct = 0u64;
    let mut total = 0u64;
    for chunk in pairs.chunks(32) {
        let b = chunk.len();
        let mut xb = Array4::zeros((b, 3, h, h));
        for (bi, (img, _)) in chunk.iter().enumerate() {
            xb.index_axis_mut(ndarray::Axis(0), bi).assign(img);
        }
        let g = Graph::new();
        let up = parser.store.upload(&g, false);
        let x = g.constant(xb.into_dyn());
        let probs = parser.forward(&g, &up, x)?;
        let oh = g.value(g.argmax_one_hot_c(probs));
        for (bi, (_, mask)) in chunk.iter().enumerate() {
            for i in 0..h {
                for j in 0..h {
                    let pred = (0..NUM_SEGMENTS)
                        .find(|&c| oh[[bi, c, i, j]] == 1.0)
                        .unwrap();
                    let truth = (0..NUM_SEGMENTS)
                        .find(|&c| mask[[c, i, j]] == 1.0)
                        .unwrap();
                    if pred == truth {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, ArrayD};

    fn toy_pair(h: usize, seed: u64) -> (Array3<f32>, Array3<f32>) {
        // a colored square on a background, mask = {skin inside, others outside}
        let mut rng = stream(seed, "test/pair");
        let cx = rng.gen_range(h / 4..3 * h / 4);
        let cy = rng.gen_range(h / 4..3 * h / 4);
        let r = h / 4;
        let mut img = Array3::zeros((3, h, h));
        let mut mask = Array3::zeros((NUM_SEGMENTS, h, h));
        for i in 0..h {
            for j in 0..h {
                let inside = i.abs_diff(cy) < r && j.abs_diff(cx) < r;
                if inside {
                    img[[0, i, j]] = 0.8;
                    img[[1, i, j]] = 0.2;
                    img[[2, i, j]] = -0.4;
                    mask[[0, i, j]] = 1.0;
                } else {
                    img[[0, i, j]] = -0.7;
                    img[[1, i, j]] = -0.5;
                    img[[2, i, j]] = 0.1;
                    mask[[11, i, j]] = 1.0;
                }
            }
        }
        (img, mask)
    }

    #[test]
    fn parse_output_is_valid_soft_mask() {
        let mut rng = stream(0, "init");
        let parser = ParserHandle::build(16, [8, 12, 16], &mut rng).unwrap();
        let data = Array4::from_elem((2, 3, 16, 16), 0.3);
        let batch = ImageBatch::new(data).unwrap();
        let mask = parser.parse(&batch).unwrap();
        assert_eq!(mask.data().shape(), &[2, 12, 16, 16]);
    }

    #[test]
    fn parse_resolution_mismatch_is_error() {
        let mut rng = stream(0, "init");
        let parser = ParserHandle::build(16, [8, 12, 16], &mut rng).unwrap();
        let data = Array4::from_elem((1, 3, 32, 32), 0.0);
        let batch = ImageBatch::new(data).unwrap();
        assert!(parser.parse(&batch).is_err());
    }

    #[test]
    fn parse_is_deterministic() {
        let mut rng = stream(1, "init");
        let parser = ParserHandle::build(16, [8, 12, 16], &mut rng).unwrap();
        let (img, _) = toy_pair(16, 5);
        let mut data = Array4::zeros((1, 3, 16, 16));
        data.index_axis_mut(ndarray::Axis(0), 0).assign(&img);
        let batch = ImageBatch::new(data).unwrap();
        let a = parser.parse(&batch).unwrap();
        let b = parser.parse(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_pair_memorization() {
        let pairs = vec![toy_pair(16, 3)];
        let config = ParserTrainConfig {
            widths: [8, 12, 16],
            epochs: 120,
            batch_size: 1,
            lr: 3e-3,
            seed: 0,
        };
        let parser = train_parser(&pairs, &config).unwrap();
        // per-pixel CE on the memorized pair approaches zero
        let g = Graph::new();
        let up = parser.store.upload(&g, false);
        let mut xb = Array4::zeros((1, 3, 16, 16));
        xb.index_axis_mut(ndarray::Axis(0), 0).assign(&pairs[0].0);
        let mut mb = Array4::zeros((1, NUM_SEGMENTS, 16, 16));
        mb.index_axis_mut(ndarray::Axis(0), 0).assign(&pairs[0].1);
        let x = g.constant(xb.into_dyn());
        let t = g.constant(mb.into_dyn());
        let probs = parser.forward(&g, &up, x).unwrap();
        let loss = g.scalar_value(losses::rec_loss_seg(&g, t, probs).unwrap());
        assert!(loss < 0.05, "memorization loss {loss}");
        let acc = pixel_accuracy(&parser, &pairs).unwrap();
        assert!(acc > 0.99, "memorization accuracy {acc}");
    }

    #[test]
    fn mismatched_resolution_pairs_rejected() {
        let mut pairs = vec![toy_pair(16, 0)];
        pairs.push((Array3::zeros((3, 8, 8)), Array3::zeros((NUM_SEGMENTS, 8, 8))));
        assert!(train_parser(&pairs, &ParserTrainConfig::default()).is_err());
        assert!(train_parser(&[], &ParserTrainConfig::default()).is_err());
    }

    #[test]
    fn gradient_flows_through_frozen_parser() {
        let mut rng = stream(2, "init");
        let parser = ParserHandle::build(16, [8, 12, 16], &mut rng).unwrap();
        let (img, _) = toy_pair(16, 7);
        let mut xb = Array4::zeros((1, 3, 16, 16));
        xb.index_axis_mut(ndarray::Axis(0), 0).assign(&img);

        let g = Graph::new();
        let up = parser.store.upload(&g, false);
        let x = g.leaf(xb.clone().into_dyn(), true);
        let probs = parser.forward(&g, &up, x).unwrap();
        // scalar function of the parse
        let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 12, 16, 16]), |ix| {
            ((ix[1] * 31 + ix[2] * 7 + ix[3]) % 5) as f32 * 0.21 - 0.4
        }));
        let y = g.sum_all(g.mul(probs, w));
        let gx = g.value(g.grad(y, &[x])[0]);

        // finite differences at 3 coordinates
        let coords = [(0usize, 0usize, 3usize, 4usize), (0, 1, 8, 8), (0, 2, 12, 2)];
        let eval = |xb: &Array4<f32>| -> f32 {
            let g = Graph::new();
            let up = parser.store.upload(&g, false);
            let x = g.constant(xb.clone().into_dyn());
            let probs = parser.forward(&g, &up, x).unwrap();
            let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 12, 16, 16]), |ix| {
                ((ix[1] * 31 + ix[2] * 7 + ix[3]) % 5) as f32 * 0.21 - 0.4
            }));
            g.scalar_value(g.sum_all(g.mul(probs, w)))
        };
        let h = 2e-3f32;
        let mut nonzero = 0;
        for &(b, c, i, j) in &coords {
            let mut plus = xb.clone();
            plus[[b, c, i, j]] += h;
            let mut minus = xb.clone();
            minus[[b, c, i, j]] -= h;
            let numeric = (eval(&plus) as f64 - eval(&minus) as f64) / (2.0 * h as f64);
            let analytic = gx[[b, c, i, j]] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom < 1e-2,
                "({b},{c},{i},{j}): {analytic} vs {numeric}"
            );
            if analytic.abs() > 1e-8 {
                nonzero += 1;
            }
        }
        assert!(nonzero >= 3, "gradient should be nonzero at generic coordinates");
    }

    #[test]
    fn checkpoint_roundtrip_with_taxonomy_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("parser.ckpt");
        let mut rng = stream(3, "init");
        let parser = ParserHandle::build(32, [8, 12, 16], &mut rng).unwrap();
        parser.save(&path).unwrap();
        let loaded = ParserHandle::load(&path).unwrap();
        assert_eq!(loaded.resolution, 32);
        assert_eq!(loaded.widths, parser.widths);
        assert_eq!(loaded.byte_hash(), parser.byte_hash());
    }
}
