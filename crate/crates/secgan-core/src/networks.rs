//! Generator and discriminator builders for both backbones (StarGAN-style,
//! AttGAN-style) and both modalities (RGB images, semantic masks).
//!
//! The two modalities share identical trunks; they differ only in the
//! first-layer input channels, the last-layer output channels, and the output
//! activation (tanh for RGB, per-pixel softmax for masks).

use crate::domain::NUM_SEGMENTS;
use crate::error::{Result, SecganError};
use crate::nn::{
    self, batch_norm_fwd, batch_norm_init, conv_fwd, conv_init, conv_t_fwd, conv_t_init,
    instance_norm_fwd, linear_fwd, linear_init, norm_params_init, BnUpdates, ConvCfg, ConvTCfg,
    ParamStore, Uploaded,
};
use crate::tensor::{Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Stargan,
    Attgan,
}

impl FromStr for Backbone {
    type Err = SecganError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stargan" => Ok(Backbone::Stargan),
            "attgan" => Ok(Backbone::Attgan),
            other => Err(SecganError::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Stargan => write!(f, "stargan"),
            Backbone::Attgan => write!(f, "attgan"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Seg,
}

impl FromStr for Modality {
    type Err = SecganError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "seg" => Ok(Modality::Seg),
            other => Err(SecganError::Config(format!("unknown modality '{other}'"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => write!(f, "rgb"),
            Modality::Seg => write!(f, "seg"),
        }
    }
}

impl Modality {
    pub fn channels(&self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Seg => NUM_SEGMENTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Generator => write!(f, "generator"),
            Role::Discriminator => write!(f, "discriminator"),
        }
    }
}

/// Knobs the layer tables leave open. `width_mult` scales every hidden
/// channel count (1.0 reproduces the published parameter counts; desk-scale
/// runs shrink it), `leaky_slope` is the discriminators' LReLU slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetOpts {
    pub width_mult: f32,
    pub leaky_slope: f32,
}

impl Default for NetOpts {
    fn default() -> Self {
        Self { width_mult: 1.0, leaky_slope: 0.01 }
    }
}

fn scaled(base: usize, mult: f32) -> usize {
    ((base as f64 * mult as f64).round() as usize).max(1)
}

/// A built network: metadata sufficient to rebuild it plus its parameters.
#[derive(Debug, Clone)]
pub struct NetworkHandle {
    pub backbone: Backbone,
    pub modality: Modality,
    pub role: Role,
    pub resolution: usize,
    pub n_a: usize,
    pub opts: NetOpts,
    pub store: ParamStore,
}

/// Realism and attribute heads of a discriminator forward pass.
pub struct DiscriminatorOutput {
    /// Unbounded critic scores: `[B, 1, h', w']` patches (StarGAN) or `[B, 1]`.
    pub adv: Var,
    /// Per-attribute probabilities in (0, 1): `[B, n_a]`.
    pub cls: Var,
}

pub fn build_generator<R: Rng>(
    backbone: Backbone,
    modality: Modality,
    n_a: usize,
    h: usize,
    opts: NetOpts,
    rng: &mut R,
) -> Result<NetworkHandle> {
    if n_a < 1 {
        return Err(SecganError::Config("n_a must be >= 1".into()));
    }
    match backbone {
        Backbone::Stargan => {
            if h % 4 != 0 || h < 8 {
                return Err(SecganError::Config(format!(
                    "stargan generator needs a resolution divisible by 4, got {h}"
                )));
            }
        }
        Backbone::Attgan => {
            if h % 32 != 0 {
                return Err(SecganError::Config(format!(
                    "attgan generator needs a resolution divisible by 32, got {h}"
                )));
            }
        }
    }
    let mut store = ParamStore::new();
    match backbone {
        Backbone::Stargan => init_stargan_generator(&mut store, modality, n_a, opts, rng),
        Backbone::Attgan => init_attgan_generator(&mut store, modality, n_a, opts, rng),
    }
    Ok(NetworkHandle {
        backbone,
        modality,
        role: Role::Generator,
        resolution: h,
        n_a,
        opts,
        store,
    })
}

pub fn build_discriminator<R: Rng>(
    backbone: Backbone,
    modality: Modality,
    n_a: usize,
    h: usize,
    opts: NetOpts,
    rng: &mut R,
) -> Result<NetworkHandle> {
    if n_a < 1 {
        return Err(SecganError::Config("n_a must be >= 1".into()));
    }
    match backbone {
        Backbone::Stargan => {
            if h % 64 != 0 {
                return Err(SecganError::Config(format!(
                    "stargan discriminator needs a resolution divisible by 64, got {h}"
                )));
            }
        }
        Backbone::Attgan => {
            if h % 32 != 0 {
                return Err(SecganError::Config(format!(
                    "attgan discriminator needs a resolution divisible by 32, got {h}"
                )));
            }
        }
    }
    let mut store = ParamStore::new();
    match backbone {
        Backbone::Stargan => init_stargan_discriminator(&mut store, modality, n_a, h, opts, rng),
        Backbone::Attgan => init_attgan_discriminator(&mut store, modality, n_a, h, opts, rng),
    }
    Ok(NetworkHandle {
        backbone,
        modality,
        role: Role::Discriminator,
        resolution: h,
        n_a,
        opts,
        store,
    })
}

// ---------------------------------------------------------------------------
// StarGAN backbone
// ---------------------------------------------------------------------------

const STARGAN_RES_BLOCKS: usize = 6;

fn stargan_g_widths(opts: NetOpts) -> [usize; 3] {
    [scaled(64, opts.width_mult), scaled(128, opts.width_mult), scaled(256, opts.width_mult)]
}

fn init_stargan_generator<R: Rng>(
    store: &mut ParamStore,
    modality: Modality,
    n_a: usize,
    opts: NetOpts,
    rng: &mut R,
) {
    let io_c = modality.channels();
    let [w0, w1, w2] = stargan_g_widths(opts);
    conv_init(store, "c0", ConvCfg { in_c: io_c + n_a, out_c: w0, k: 7, stride: 1, pad: 3 }, rng);
    norm_params_init(store, "n0", w0);
    conv_init(store, "c1", ConvCfg { in_c: w0, out_c: w1, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "n1", w1);
    conv_init(store, "c2", ConvCfg { in_c: w1, out_c: w2, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "n2", w2);
    for i in 0..STARGAN_RES_BLOCKS {
        conv_init(store, &format!("r{i}a"), ConvCfg { in_c: w2, out_c: w2, k: 3, stride: 1, pad: 1 }, rng);
        norm_params_init(store, &format!("r{i}an"), w2);
        conv_init(store, &format!("r{i}b"), ConvCfg { in_c: w2, out_c: w2, k: 3, stride: 1, pad: 1 }, rng);
        norm_params_init(store, &format!("r{i}bn"), w2);
    }
    conv_t_init(store, "u0", ConvTCfg { in_c: w2, out_c: w1, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "un0", w1);
    conv_t_init(store, "u1", ConvTCfg { in_c: w1, out_c: w0, k: 4, stride: 2, pad: 1 }, rng);
    norm_params_init(store, "un1", w0);
    conv_init(store, "out", ConvCfg { in_c: w0, out_c: io_c, k: 7, stride: 1, pad: 3 }, rng);
}

fn stargan_generator_fwd(
    handle: &NetworkHandle,
    g: &Graph,
    up: &Uploaded,
    x: Var,
    y: Var,
) -> Var {
    let store = &handle.store;
    let io_c = handle.modality.channels();
    let n_a = handle.n_a;
    let [w0, w1, w2] = stargan_g_widths(handle.opts);
    let shape = g.shape(x);
    let (h, w) = (shape[2], shape[3]);

    let yc = nn::label_channels(g, y, h, w);
    let mut t = g.concat_c(x, yc);
    t = conv_fwd(g, store, up, "c0", ConvCfg { in_c: io_c + n_a, out_c: w0, k: 7, stride: 1, pad: 3 }, t);
    t = instance_norm_fwd(g, store, up, "n0", t);
    t = g.relu(t);
    t = conv_fwd(g, store, up, "c1", ConvCfg { in_c: w0, out_c: w1, k: 4, stride: 2, pad: 1 }, t);
    t = instance_norm_fwd(g, store, up, "n1", t);
    t = g.relu(t);
    t = conv_fwd(g, store, up, "c2", ConvCfg { in_c: w1, out_c: w2, k: 4, stride: 2, pad: 1 }, t);
    t = instance_norm_fwd(g, store, up, "n2", t);
    t = g.relu(t);
    for i in 0..STARGAN_RES_BLOCKS {
        let cfg = ConvCfg { in_c: w2, out_c: w2, k: 3, stride: 1, pad: 1 };
        let mut r = conv_fwd(g, store, up, &format!("r{i}a"), cfg, t);
        r = instance_norm_fwd(g, store, up, &format!("r{i}an"), r);
        r = g.relu(r);
        r = conv_fwd(g, store, up, &format!("r{i}b"), cfg, r);
        r = instance_norm_fwd(g, store, up, &format!("r{i}bn"), r);
        t = g.add(t, r);
    }
    t = conv_t_fwd(g, store, up, "u0", ConvTCfg { in_c: w2, out_c: w1, k: 4, stride: 2, pad: 1 }, t);
    t = instance_norm_fwd(g, store, up, "un0", t);
    t = g.relu(t);
    t = conv_t_fwd(g, store, up, "u1", ConvTCfg { in_c: w1, out_c: w0, k: 4, stride: 2, pad: 1 }, t);
    t = instance_norm_fwd(g, store, up, "un1", t);
    t = g.relu(t);
    t = conv_fwd(g, store, up, "out", ConvCfg { in_c: w0, out_c: io_c, k: 7, stride: 1, pad: 3 }, t);
    match handle.modality {
        Modality::Rgb => g.tanh(t),
        Modality::Seg => g.softmax_c(t),
    }
}

fn stargan_d_widths(opts: NetOpts) -> [usize; 6] {
    [64, 128, 256, 512, 1024, 2048].map(|c| scaled(c, opts.width_mult))
}

fn init_stargan_discriminator<R: Rng>(
    store: &mut ParamStore,
    modality: Modality,
    n_a: usize,
    h: usize,
    opts: NetOpts,
    rng: &mut R,
) {
    let widths = stargan_d_widths(opts);
    let mut in_c = modality.channels();
    for (i, &out_c) in widths.iter().enumerate() {
        conv_init(store, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, rng);
        in_c = out_c;
    }
    conv_init(store, "adv", ConvCfg { in_c, out_c: 1, k: 3, stride: 1, pad: 1 }, rng);
    let hk = h / 64;
    conv_init(store, "cls", ConvCfg { in_c, out_c: n_a, k: hk, stride: 1, pad: 0 }, rng);
}

fn stargan_discriminator_fwd(
    handle: &NetworkHandle,
    g: &Graph,
    up: &Uploaded,
    x: Var,
) -> DiscriminatorOutput {
    let store = &handle.store;
    let widths = stargan_d_widths(handle.opts);
    let slope = handle.opts.leaky_slope;
    let mut t = x;
    let mut in_c = handle.modality.channels();
    for (i, &out_c) in widths.iter().enumerate() {
        t = conv_fwd(g, store, up, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, t);
        t = g.leaky_relu(t, slope);
        in_c = out_c;
    }
    let adv = conv_fwd(g, store, up, "adv", ConvCfg { in_c, out_c: 1, k: 3, stride: 1, pad: 1 }, t);
    let hk = handle.resolution / 64;
    let cls_map = conv_fwd(
        g,
        store,
        up,
        "cls",
        ConvCfg { in_c, out_c: handle.n_a, k: hk, stride: 1, pad: 0 },
        t,
    );
    let b = g.shape(cls_map)[0];
    let cls = g.sigmoid(g.reshape(cls_map, &[b, handle.n_a]));
    DiscriminatorOutput { adv, cls }
}

// ---------------------------------------------------------------------------
// AttGAN backbone
// ---------------------------------------------------------------------------

fn attgan_enc_widths(opts: NetOpts) -> [usize; 5] {
    [64, 128, 256, 512, 1024].map(|c| scaled(c, opts.width_mult))
}

fn init_attgan_generator<R: Rng>(
    store: &mut ParamStore,
    modality: Modality,
    n_a: usize,
    opts: NetOpts,
    rng: &mut R,
) {
    let io_c = modality.channels();
    let ws = attgan_enc_widths(opts);
    let mut in_c = io_c;
    for (i, &out_c) in ws.iter().enumerate() {
        conv_init(store, &format!("e{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, rng);
        batch_norm_init(store, &format!("en{i}"), out_c);
        in_c = out_c;
    }
    // decoder: label at the bottleneck, one skip (plus the label again) at 1/16
    conv_t_init(store, "d0", ConvTCfg { in_c: ws[4] + n_a, out_c: ws[4], k: 4, stride: 2, pad: 1 }, rng);
    batch_norm_init(store, "dn0", ws[4]);
    conv_t_init(store, "d1", ConvTCfg { in_c: ws[4] + ws[3] + n_a, out_c: ws[3], k: 4, stride: 2, pad: 1 }, rng);
    batch_norm_init(store, "dn1", ws[3]);
    conv_t_init(store, "d2", ConvTCfg { in_c: ws[3], out_c: ws[2], k: 4, stride: 2, pad: 1 }, rng);
    batch_norm_init(store, "dn2", ws[2]);
    conv_t_init(store, "d3", ConvTCfg { in_c: ws[2], out_c: ws[1], k: 4, stride: 2, pad: 1 }, rng);
    batch_norm_init(store, "dn3", ws[1]);
    conv_t_init(store, "d4", ConvTCfg { in_c: ws[1], out_c: io_c, k: 4, stride: 2, pad: 1 }, rng);
}

fn attgan_generator_fwd(
    handle: &NetworkHandle,
    g: &Graph,
    up: &Uploaded,
    x: Var,
    y: Var,
    train: bool,
    mut bn: Option<&mut BnUpdates>,
) -> Var {
    let store = &handle.store;
    let io_c = handle.modality.channels();
    let ws = attgan_enc_widths(handle.opts);
    let slope = handle.opts.leaky_slope;

    let mut t = x;
    let mut in_c = io_c;
    let mut skip = None;
    for (i, &out_c) in ws.iter().enumerate() {
        if i == 4 {
            // input of the last encoder conv feeds the decoder skip
            skip = Some(t);
        }
        t = conv_fwd(g, store, up, &format!("e{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, t);
        t = batch_norm_fwd(g, store, up, &format!("en{i}"), t, train, bn.as_deref_mut());
        t = g.leaky_relu(t, slope);
        in_c = out_c;
    }
    let skip = skip.expect("encoder ran");

    let bottleneck_hw = g.shape(t)[2];
    let yc = nn::label_channels(g, y, bottleneck_hw, bottleneck_hw);
    t = g.concat_c(t, yc);
    t = conv_t_fwd(g, store, up, "d0", ConvTCfg { in_c: ws[4] + handle.n_a, out_c: ws[4], k: 4, stride: 2, pad: 1 }, t);
    t = batch_norm_fwd(g, store, up, "dn0", t, train, bn.as_deref_mut());
    t = g.relu(t);

    let hw = g.shape(t)[2];
    let yc = nn::label_channels(g, y, hw, hw);
    t = g.concat_c(t, skip);
    t = g.concat_c(t, yc);
    t = conv_t_fwd(g, store, up, "d1", ConvTCfg { in_c: ws[4] + ws[3] + handle.n_a, out_c: ws[3], k: 4, stride: 2, pad: 1 }, t);
    t = batch_norm_fwd(g, store, up, "dn1", t, train, bn.as_deref_mut());
    t = g.relu(t);

    t = conv_t_fwd(g, store, up, "d2", ConvTCfg { in_c: ws[3], out_c: ws[2], k: 4, stride: 2, pad: 1 }, t);
    t = batch_norm_fwd(g, store, up, "dn2", t, train, bn.as_deref_mut());
    t = g.relu(t);
    t = conv_t_fwd(g, store, up, "d3", ConvTCfg { in_c: ws[2], out_c: ws[1], k: 4, stride: 2, pad: 1 }, t);
    t = batch_norm_fwd(g, store, up, "dn3", t, train, bn.as_deref_mut());
    t = g.relu(t);
    t = conv_t_fwd(g, store, up, "d4", ConvTCfg { in_c: ws[1], out_c: io_c, k: 4, stride: 2, pad: 1 }, t);
    match handle.modality {
        Modality::Rgb => g.tanh(t),
        Modality::Seg => g.softmax_c(t),
    }
}

fn attgan_fc_width(opts: NetOpts) -> usize {
    scaled(1024, opts.width_mult)
}

fn init_attgan_discriminator<R: Rng>(
    store: &mut ParamStore,
    modality: Modality,
    n_a: usize,
    h: usize,
    opts: NetOpts,
    rng: &mut R,
) {
    let ws = attgan_enc_widths(opts);
    let mut in_c = modality.channels();
    for (i, &out_c) in ws.iter().enumerate() {
        conv_init(store, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, rng);
        in_c = out_c;
    }
    let feat = in_c * (h / 32) * (h / 32);
    let fc = attgan_fc_width(opts);
    linear_init(store, "adv0", feat, fc, rng);
    linear_init(store, "adv1", fc, 1, rng);
    linear_init(store, "cls0", feat, fc, rng);
    linear_init(store, "cls1", fc, n_a, rng);
}

fn attgan_discriminator_fwd(
    handle: &NetworkHandle,
    g: &Graph,
    up: &Uploaded,
    x: Var,
) -> DiscriminatorOutput {
    let store = &handle.store;
    let ws = attgan_enc_widths(handle.opts);
    let slope = handle.opts.leaky_slope;
    let mut t = x;
    let mut in_c = handle.modality.channels();
    for (i, &out_c) in ws.iter().enumerate() {
        t = conv_fwd(g, store, up, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, t);
        t = g.leaky_relu(t, slope);
        in_c = out_c;
    }
    let shape = g.shape(t);
    let (b, feat) = (shape[0], shape[1] * shape[2] * shape[3]);
    let flat = g.reshape(t, &[b, feat]);
    let mut adv = linear_fwd(g, store, up, "adv0", flat);
    adv = g.relu(adv);
    adv = linear_fwd(g, store, up, "adv1", adv);
    let mut cls = linear_fwd(g, store, up, "cls0", flat);
    cls = g.relu(cls);
    cls = linear_fwd(g, store, up, "cls1", cls);
    let cls = g.sigmoid(cls);
    DiscriminatorOutput { adv, cls }
}

// ---------------------------------------------------------------------------
// shared forward entry points
// ---------------------------------------------------------------------------

impl NetworkHandle {
    pub fn input_channels(&self) -> usize {
        self.modality.channels()
    }

    /// Run a generator on graph inputs. `x` is `[B, c, h, h]` for the
    /// handle's modality, `y` the `[B, n_a]` difference label.
    pub fn generator_forward(
        &self,
        g: &Graph,
        up: &Uploaded,
        x: Var,
        y: Var,
        train: bool,
        bn: Option<&mut BnUpdates>,
    ) -> Result<Var> {
        if self.role != Role::Generator {
            return Err(SecganError::contract("generator_forward on a discriminator"));
        }
        self.check_input(g, x)?;
        let ys = g.shape(y);
        if ys != vec![g.shape(x)[0], self.n_a] {
            return Err(SecganError::shape(format!(
                "label block must be [B, {}], got {ys:?}",
                self.n_a
            )));
        }
        Ok(match self.backbone {
            Backbone::Stargan => stargan_generator_fwd(self, g, up, x, y),
            Backbone::Attgan => attgan_generator_fwd(self, g, up, x, y, train, bn),
        })
    }

    /// Run a discriminator on graph inputs.
    pub fn discriminator_forward(
        &self,
        g: &Graph,
        up: &Uploaded,
        x: Var,
    ) -> Result<DiscriminatorOutput> {
        if self.role != Role::Discriminator {
            return Err(SecganError::contract("discriminator_forward on a generator"));
        }
        self.check_input(g, x)?;
        Ok(match self.backbone {
            Backbone::Stargan => stargan_discriminator_fwd(self, g, up, x),
            Backbone::Attgan => attgan_discriminator_fwd(self, g, up, x),
        })
    }

    /// Critic scores only; the closure shape the gradient penalty wants.
    pub fn adv_scores(&self, g: &Graph, up: &Uploaded, x: Var) -> Result<Var> {
        Ok(self.discriminator_forward(g, up, x)?.adv)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.input_channels() {
            return Err(SecganError::shape(format!(
                "{} {} expects [B, {}, h, w], got {shape:?}",
                self.backbone,
                self.role,
                self.input_channels()
            )));
        }
        if shape[2] != shape[3] {
            return Err(SecganError::shape("inputs must be square"));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable_scalars()
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "network",
            "backbone": self.backbone.to_string(),
            "modality": self.modality.to_string(),
            "role": self.role.to_string(),
            "resolution": self.resolution,
            "n_a": self.n_a,
            "width_mult": self.opts.width_mult,
            "leaky_slope": self.opts.leaky_slope,
        })
    }

    /// Save metadata + parameters; `load` rebuilds bit-identically.
    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_store(path, &self.meta(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = nn::load_store(path)?;
        let get_str = |k: &str| -> Result<String> {
            meta.get(k)
                .and_then(|v| v.as_str())
                .map(|s| s.to_string())
                .ok_or_else(|| SecganError::Checkpoint(format!("network meta missing {k}")))
        };
        let get_u = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| SecganError::Checkpoint(format!("network meta missing {k}")))
        };
        let get_f = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| SecganError::Checkpoint(format!("network meta missing {k}")))
        };
        let role = match get_str("role")?.as_str() {
            "generator" => Role::Generator,
            "discriminator" => Role::Discriminator,
            other => return Err(SecganError::Checkpoint(format!("bad role '{other}'"))),
        };
        Ok(NetworkHandle {
            backbone: get_str("backbone")?.parse()?,
            modality: get_str("modality")?.parse()?,
            role,
            resolution: get_u("resolution")? as usize,
            n_a: get_u("n_a")? as usize,
            opts: NetOpts {
                width_mult: get_f("width_mult")? as f32,
                leaky_slope: get_f("leaky_slope")? as f32,
            },
            store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{ArrayD, IxDyn};

    fn rand_input(b: usize, c: usize, h: usize, seed: u64) -> ArrayD<f32> {
        let mut rng = stream(seed, "test/input");
        let n = b * c * h * h;
        let data: Vec<f32> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(&[b, c, h, h]), data).unwrap()
    }

    fn zero_labels(g: &Graph, b: usize, n_a: usize) -> Var {
        g.constant(ArrayD::zeros(IxDyn(&[b, n_a])))
    }

    #[test]
    fn stargan_generator_param_count_near_8m() {
        let mut rng = stream(0, "init");
        let h = build_generator(Backbone::Stargan, Modality::Rgb, 13, 128, NetOpts::default(), &mut rng)
            .unwrap();
        let n = h.num_parameters() as f64;
        assert!((n - 8.0e6).abs() / 8.0e6 < 0.15, "stargan generator params: {n}");
    }

    #[test]
    fn attgan_generator_param_count_near_43m() {
        let mut rng = stream(0, "init");
        let h = build_generator(Backbone::Attgan, Modality::Rgb, 13, 128, NetOpts::default(), &mut rng)
            .unwrap();
        let n = h.num_parameters() as f64;
        assert!((n - 43.0e6).abs() / 43.0e6 < 0.15, "attgan generator params: {n}");
    }

    #[test]
    fn seg_rgb_param_delta_is_first_and_last_layer() {
        let opts = NetOpts { width_mult: 0.25, leaky_slope: 0.01 };
        let mut rng = stream(1, "init");
        let rgb = build_generator(Backbone::Stargan, Modality::Rgb, 5, 32, opts, &mut rng).unwrap();
        let seg = build_generator(Backbone::Stargan, Modality::Seg, 5, 32, opts, &mut rng).unwrap();
        let w0 = scaled(64, opts.width_mult);
        // first layer: (12 - 3) extra input channels of a 7x7 conv with w0 outputs;
        // last layer: (12 - 3) extra output channels of a 7x7 conv plus biases
        let delta = w0 * 9 * 49 + 9 * w0 * 49 + 9;
        assert_eq!(seg.num_parameters(), rgb.num_parameters() + delta);
    }

    #[test]
    fn stargan_discriminator_shapes_at_128() {
        let mut rng = stream(2, "init");
        let opts = NetOpts { width_mult: 0.0625, leaky_slope: 0.01 };
        for modality in [Modality::Seg, Modality::Rgb] {
            let d = build_discriminator(Backbone::Stargan, modality, 13, 128, opts, &mut rng).unwrap();
            let g = Graph::new();
            let up = d.store.upload(&g, false);
            let x = g.constant(rand_input(2, modality.channels(), 128, 3));
            let out = d.discriminator_forward(&g, &up, x).unwrap();
            assert_eq!(g.shape(out.adv), vec![2, 1, 2, 2]);
            assert_eq!(g.shape(out.cls), vec![2, 13]);
            for &v in g.value(out.cls).iter() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn attgan_discriminator_shapes() {
        let mut rng = stream(3, "init");
        let opts = NetOpts { width_mult: 0.125, leaky_slope: 0.01 };
        let d = build_discriminator(Backbone::Attgan, Modality::Seg, 13, 128, opts, &mut rng).unwrap();
        let g = Graph::new();
        let up = d.store.upload(&g, false);
        let x = g.constant(rand_input(2, 12, 128, 4));
        let out = d.discriminator_forward(&g, &up, x).unwrap();
        assert_eq!(g.shape(out.adv), vec![2, 1]);
        assert_eq!(g.shape(out.cls), vec![2, 13]);
    }

    #[test]
    fn generator_shape_roundtrip_all_backbones() {
        let opts = NetOpts { width_mult: 0.0625, leaky_slope: 0.01 };
        for backbone in [Backbone::Stargan, Backbone::Attgan] {
            for modality in [Modality::Rgb, Modality::Seg] {
                for h in [32usize, 64, 128] {
                    let mut rng = stream(5, "init");
                    let gen = build_generator(backbone, modality, 5, h, opts, &mut rng).unwrap();
                    let g = Graph::new();
                    let up = gen.store.upload(&g, false);
                    let x = g.constant(rand_input(1, modality.channels(), h, 6));
                    let y = zero_labels(&g, 1, 5);
                    let out = gen.generator_forward(&g, &up, x, y, false, None).unwrap();
                    assert_eq!(g.shape(out), vec![1, modality.channels(), h, h]);
                    let v = g.value(out);
                    match modality {
                        Modality::Rgb => {
                            for &e in v.iter() {
                                assert!((-1.0..=1.0).contains(&e));
                            }
                        }
                        Modality::Seg => {
                            let s = g.sum_axes(out, &[1]);
                            for &e in g.value(s).iter() {
                                assert!((e - 1.0).abs() < 1e-5);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn generator_deterministic_in_eval() {
        let mut rng = stream(7, "init");
        let opts = NetOpts { width_mult: 0.125, leaky_slope: 0.01 };
        let gen = build_generator(Backbone::Attgan, Modality::Rgb, 5, 32, opts, &mut rng).unwrap();
        let x0 = rand_input(2, 3, 32, 8);
        let run = || {
            let g = Graph::new();
            let up = gen.store.upload(&g, false);
            let x = g.constant(x0.clone());
            let y = zero_labels(&g, 2, 5);
            let out = gen.generator_forward(&g, &up, x, y, false, None).unwrap();
            g.value(out)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_resolutions_rejected() {
        let mut rng = stream(9, "init");
        let opts = NetOpts::default();
        assert!(build_generator(Backbone::Stargan, Modality::Rgb, 5, 30, opts, &mut rng).is_err());
        assert!(build_generator(Backbone::Attgan, Modality::Rgb, 5, 48, opts, &mut rng).is_err());
        assert!(build_discriminator(Backbone::Stargan, Modality::Rgb, 5, 32, opts, &mut rng).is_err());
        assert!(build_discriminator(Backbone::Attgan, Modality::Rgb, 5, 24, opts, &mut rng).is_err());
    }

    #[test]
    fn critic_has_no_cross_example_coupling() {
        // doubling the batch concatenates per-example outputs
        let mut rng = stream(11, "init");
        let opts = NetOpts { width_mult: 0.0625, leaky_slope: 0.01 };
        let d = build_discriminator(Backbone::Stargan, Modality::Rgb, 5, 64, opts, &mut rng).unwrap();
        let a = rand_input(1, 3, 64, 12);
        let b = rand_input(1, 3, 64, 13);
        let single = |x: &ArrayD<f32>| {
            let g = Graph::new();
            let up = d.store.upload(&g, false);
            let xv = g.constant(x.clone());
            let out = d.discriminator_forward(&g, &up, xv).unwrap();
            (g.value(out.adv), g.value(out.cls))
        };
        let (adv_a, cls_a) = single(&a);
        let (adv_b, cls_b) = single(&b);

        let g = Graph::new();
        let up = d.store.upload(&g, false);
        let both = ndarray::concatenate(
            ndarray::Axis(0),
            &[a.view(), b.view()],
        )
        .unwrap();
        let xv = g.constant(both.as_standard_layout().to_owned());
        let out = d.discriminator_forward(&g, &up, xv).unwrap();
        let adv = g.value(out.adv);
        let cls = g.value(out.cls);
        for (i, &v) in adv_a.iter().enumerate() {
            assert!((adv.as_slice().unwrap()[i] - v).abs() < 1e-5);
        }
        let off = adv_a.len();
        for (i, &v) in adv_b.iter().enumerate() {
            assert!((adv.as_slice().unwrap()[off + i] - v).abs() < 1e-5);
        }
        for (i, &v) in cls_a.iter().enumerate() {
            assert!((cls.as_slice().unwrap()[i] - v).abs() < 1e-5);
        }
        for (i, &v) in cls_b.iter().enumerate() {
            assert!((cls.as_slice().unwrap()[cls_a.len() + i] - v).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_roundtrip_rebuilds_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let mut rng = stream(20, "init");
        let opts = NetOpts { width_mult: 0.125, leaky_slope: 0.01 };
        let gen = build_generator(Backbone::Stargan, Modality::Seg, 5, 32, opts, &mut rng).unwrap();
        gen.save(&path).unwrap();
        let loaded = NetworkHandle::load(&path).unwrap();
        assert_eq!(loaded.backbone, gen.backbone);
        assert_eq!(loaded.modality, gen.modality);
        assert_eq!(loaded.n_a, gen.n_a);
        assert_eq!(loaded.store.byte_hash(), gen.store.byte_hash());
    }
}
