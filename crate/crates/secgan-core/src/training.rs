//! The alternating mutual-learning loop: both discriminators update every
//! step, both generators every `n_critic` steps on the same mini-batch, each
//! generator consuming the other branch's detached one-hot output in its
//! consistency term. The parser stays frozen throughout.

use crate::config::{ExperimentConfig, ScheduleKind};
use crate::data::{sample_target_labels, AttributeDataset, Split, SplitTensors, TargetMode};
use crate::domain::{
    diffs_to_array, label_diff, labels_to_array, to_one_hot, AttributeLabel, AttributeSchema,
    SoftMask,
};
use crate::error::{Result, SecganError};
use crate::losses::{self, ClsLossVariant, LossParts, LossWeights};
use crate::networks::{build_discriminator, build_generator, Backbone, Modality, NetworkHandle};
use crate::nn::{self, param_grads, Adam, BnUpdates};
use crate::parsing::ParserHandle;
use crate::rng::stream;
use crate::tensor::{Graph, Var};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One mini-batch: images, source labels, sampled target labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_in: Array4<f32>,
    pub y_src: Vec<AttributeLabel>,
    pub y_trg: Vec<AttributeLabel>,
}

impl Batch {
    /// Content hash; used to verify the same-mini-batch rule.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &v in self.x_in.iter() {
            hasher.update(v.to_le_bytes());
        }
        for l in self.y_src.iter().chain(self.y_trg.iter()) {
            hasher.update(l.values());
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn y_diff(&self) -> Result<Array2<f32>> {
        let diffs = self
            .y_src
            .iter()
            .zip(self.y_trg.iter())
            .map(|(s, t)| label_diff(s, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(diffs_to_array(&diffs))
    }
}

/// Generator/discriminator pair of one modality plus its optimizers and the
/// branch-local randomness (gradient-penalty mixing).
pub struct Branch {
    pub modality: Modality,
    pub gen: NetworkHandle,
    pub disc: NetworkHandle,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub gp_rng: ChaCha8Rng,
    pub d_updates: u64,
    pub g_updates: u64,
}

impl Branch {
    pub fn new(
        backbone: Backbone,
        modality: Modality,
        config: &ExperimentConfig,
        seed: u64,
    ) -> Result<Self> {
        let tag = match modality {
            Modality::Rgb => "rgb",
            Modality::Seg => "seg",
        };
        let mut g_rng = stream(seed, &format!("init/gen/{tag}"));
        let mut d_rng = stream(seed, &format!("init/disc/{tag}"));
        let gen = build_generator(
            backbone,
            modality,
            config.n_a(),
            config.resolution,
            config.net_opts(),
            &mut g_rng,
        )?;
        let disc = build_discriminator(
            backbone,
            modality,
            config.n_a(),
            config.resolution,
            config.net_opts(),
            &mut d_rng,
        )?;
        let opt_g = Adam::new(&gen.store, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        let opt_d = Adam::new(&disc.store, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        Ok(Self {
            modality,
            gen,
            disc,
            opt_g,
            opt_d,
            gp_rng: stream(seed, &format!("gp/{tag}")),
            d_updates: 0,
            g_updates: 0,
        })
    }

    /// The branch's view of a batch: RGB pixels or the parsed one-hot mask.
    fn real_input(&self, batch: &Batch, parser: &ParserHandle) -> Result<ArrayD<f32>> {
        match self.modality {
            Modality::Rgb => Ok(batch.x_in.clone().into_dyn()),
            Modality::Seg => Ok(seg_input(parser, &batch.x_in)?.into_dyn()),
        }
    }
}

/// Draw `batch_size` examples with replacement and shuffle-sample targets.
/// Both the coupled trainer and independent baseline branches go through
/// this, so "identical batches" is a property of the stream, not the caller.
pub fn sample_training_batch(
    rng: &mut ChaCha8Rng,
    train: &SplitTensors,
    batch_size: usize,
    schema: &AttributeSchema,
) -> Result<Batch> {
    let n = train.images.shape()[0];
    let r = train.images.shape()[2];
    let mut x_in = Array4::zeros((batch_size, 3, r, r));
    let mut y_src = Vec::with_capacity(batch_size);
    for bi in 0..batch_size {
        let idx = rng.gen_range(0..n);
        x_in.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&train.images.index_axis(ndarray::Axis(0), idx));
        y_src.push(train.labels[idx].clone());
    }
    let y_trg = sample_target_labels(&y_src, TargetMode::Shuffle, schema, rng)?;
    Ok(Batch { x_in, y_src, y_trg })
}

/// Parse a batch and take the one-hot representation: the semantic branch's
/// real examples.
pub fn seg_input(parser: &ParserHandle, x_in: &Array4<f32>) -> Result<Array4<f32>> {
    let g = Graph::new();
    let up = parser.store.upload(&g, false);
    let x = g.constant(x_in.clone().into_dyn());
    let soft = parser.forward(&g, &up, x)?;
    let soft4 = g
        .value(soft)
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| SecganError::shape(format!("parser output: {e}")))?;
    let mask = SoftMask::new(soft4)?;
    Ok(to_one_hot(&mask).data().clone())
}

/// One discriminator update for a single branch on its own modality's view of
/// the mini-batch. Returns (adv_d, cls_d, gp).
pub fn d_step_branch(
    branch: &mut Branch,
    real: &ArrayD<f32>,
    y_src: &Array2<f32>,
    y_diff: &Array2<f32>,
    weights: &LossWeights,
    variant: ClsLossVariant,
    lr_d: f32,
    step: u64,
) -> Result<(f32, f32, f32)> {
    let g = Graph::new();
    let up_g = branch.gen.store.upload(&g, false);
    let up_d = branch.disc.store.upload(&g, true);
    let x = g.constant(real.clone());
    let yd = g.constant(y_diff.clone().into_dyn());
    let ys = g.constant(y_src.clone().into_dyn());

    // fake examples; the generator is a constant here
    let fake = branch.gen.generator_forward(&g, &up_g, x, yd, true, None)?;

    let out_real = branch.disc.discriminator_forward(&g, &up_d, x)?;
    let out_fake = branch.disc.discriminator_forward(&g, &up_d, fake)?;
    let batch = real.shape()[0];
    let u = losses::sample_gp_u(&mut branch.gp_rng, batch);
    let disc = &branch.disc;
    let gp = losses::gradient_penalty(
        &g,
        |g, xt| disc.adv_scores(g, &up_d, xt).expect("shape-checked critic"),
        x,
        fake,
        &u,
    )?;
    let adv = losses::adv_loss_d(&g, out_real.adv, out_fake.adv, gp, weights.lambda_gp);
    let cls = losses::cls_loss(&g, out_real.cls, ys, variant)?;
    let total = g.add(adv, g.scalar_mul(cls, weights.lambda_cls));

    let (adv_v, cls_v, gp_v) = (g.scalar_value(adv), g.scalar_value(cls), g.scalar_value(gp));
    if !adv_v.is_finite() || !cls_v.is_finite() {
        return Err(SecganError::Diverged {
            step,
            what: format!("{} discriminator loss (adv {adv_v}, cls {cls_v})", branch.modality),
        });
    }
    let grads = param_grads(&g, total, &branch.disc.store, &up_d);
    branch.opt_d.step(&mut branch.disc.store, &grads, lr_d);
    branch.d_updates += 1;
    Ok((adv_v, cls_v, gp_v))
}

/// Everything a generator update needs from one branch's forward pass.
struct BranchGForward {
    up_g: nn::Uploaded,
    out: Var,
    adv_g: Var,
    cls_g: Var,
    rec: Var,
    bn: BnUpdates,
}

fn g_forward_branch(
    g: &Graph,
    branch: &Branch,
    real: &ArrayD<f32>,
    y_trg: &Array2<f32>,
    y_diff: &Array2<f32>,
    variant: ClsLossVariant,
) -> Result<BranchGForward> {
    let up_g = branch.gen.store.upload(g, true);
    let up_d = branch.disc.store.upload(g, false);
    let x = g.constant(real.clone());
    let yd = g.constant(y_diff.clone().into_dyn());
    let yt = g.constant(y_trg.clone().into_dyn());
    let mut bn = BnUpdates::default();

    let out = branch.gen.generator_forward(g, &up_g, x, yd, true, Some(&mut bn))?;
    let d_out = branch.disc.discriminator_forward(g, &up_d, out)?;
    let adv_g = losses::adv_loss_g(g, d_out.adv);
    let cls_g = losses::cls_loss(g, d_out.cls, yt, variant)?;

    let b = real.shape()[0];
    let zeros = g.constant(ArrayD::zeros(IxDyn(&[b, branch.gen.n_a])));
    let rec_out = branch.gen.generator_forward(g, &up_g, x, zeros, true, Some(&mut bn))?;
    let rec = match branch.modality {
        Modality::Rgb => losses::rec_loss_rgb(g, x, rec_out)?,
        Modality::Seg => losses::rec_loss_seg(g, x, rec_out)?,
    };
    Ok(BranchGForward { up_g, out, adv_g, cls_g, rec, bn })
}

/// One generator update for a single branch with no consistency coupling:
/// the independent-baseline path. The coupled trainer at `lambda_sc = 0`
/// performs bit-identical arithmetic to this.
pub fn g_step_single(
    branch: &mut Branch,
    real: &ArrayD<f32>,
    y_trg: &Array2<f32>,
    y_diff: &Array2<f32>,
    weights: &LossWeights,
    variant: ClsLossVariant,
    lr_g: f32,
    step: u64,
) -> Result<(f32, f32, f32)> {
    let g = Graph::new();
    let fwd = g_forward_branch(&g, branch, real, y_trg, y_diff, variant)?;
    let mut total = fwd.adv_g;
    total = g.add(total, g.scalar_mul(fwd.cls_g, weights.lambda_cls));
    total = g.add(total, g.scalar_mul(fwd.rec, weights.lambda_rec));
    let (adv_v, cls_v, rec_v) =
        (g.scalar_value(fwd.adv_g), g.scalar_value(fwd.cls_g), g.scalar_value(fwd.rec));
    if ![adv_v, cls_v, rec_v].iter().all(|v| v.is_finite()) {
        return Err(SecganError::Diverged {
            step,
            what: format!("{} generator loss", branch.modality),
        });
    }
    let grads = param_grads(&g, total, &branch.gen.store, &fwd.up_g);
    branch.opt_g.step(&mut branch.gen.store, &grads, lr_g);
    fwd.bn.apply(&mut branch.gen.store);
    branch.g_updates += 1;
    Ok((adv_v, cls_v, rec_v))
}

/// Scalar record of one full training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr_g: f32,
    pub lr_d: f32,
    pub rgb: LossParts,
    pub seg: LossParts,
    pub g_updated: bool,
}

/// Live training state: both branches, the frozen parser, counters, and the
/// named random streams.
pub struct TrainState {
    pub config: ExperimentConfig,
    pub schema: AttributeSchema,
    pub rgb: Branch,
    pub seg: Branch,
    pub parser: ParserHandle,
    pub parser_hash: String,
    pub step: u64,
    pub data_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        config: ExperimentConfig,
        schema: AttributeSchema,
        parser: ParserHandle,
    ) -> Result<Self> {
        config.validate()?;
        if parser.resolution != config.resolution {
            return Err(SecganError::Config(format!(
                "parser resolution {} does not match configured resolution {}",
                parser.resolution, config.resolution
            )));
        }
        let rgb = Branch::new(config.backbone, Modality::Rgb, &config, config.seed)?;
        let seg = Branch::new(config.backbone, Modality::Seg, &config, config.seed)?;
        let parser_hash = parser.byte_hash();
        let data_rng = stream(config.seed, "data/batch");
        Ok(Self { config, schema, rgb, seg, parser, parser_hash, step: 0, data_rng })
    }

    /// Draw a mini-batch (with replacement) and sample shuffle targets.
    pub fn sample_batch(&mut self, train: &SplitTensors) -> Result<Batch> {
        sample_training_batch(&mut self.data_rng, train, self.config.batch_size, &self.schema)
    }

    /// Algorithm step: both discriminators, one gradient step each, same
    /// mini-batch. Generators untouched.
    pub fn train_step_d(&mut self, batch: &Batch, lr_d: f32) -> Result<StepRecord> {
        let y_src = labels_to_array(&batch.y_src);
        let y_diff = batch.y_diff()?;
        let w = self.config.weights;
        let variant = self.config.cls_loss_variant;
        let mut record = StepRecord {
            step: self.step,
            lr_g: 0.0,
            lr_d,
            rgb: LossParts::default(),
            seg: LossParts::default(),
            g_updated: false,
        };
        for branch in [&mut self.rgb, &mut self.seg] {
            let real = branch.real_input(batch, &self.parser)?;
            let (adv, cls, gp) =
                d_step_branch(branch, &real, &y_src, &y_diff, &w, variant, lr_d, self.step)?;
            let parts = match branch.modality {
                Modality::Rgb => &mut record.rgb,
                Modality::Seg => &mut record.seg,
            };
            parts.adv_d = adv;
            parts.cls_d = cls;
            parts.gp = gp;
        }
        Ok(record)
    }

    /// Generator step on the same mini-batch: forward both branches, couple
    /// them through the detached one-hot outputs, update both generators.
    pub fn train_step_g(&mut self, batch: &Batch, lr_g: f32, record: &mut StepRecord) -> Result<()> {
        let y_trg = labels_to_array(&batch.y_trg);
        let y_diff = batch.y_diff()?;
        let w = self.config.weights;
        let variant = self.config.cls_loss_variant;

        let g = Graph::new();
        let rgb_real = self.rgb.real_input(batch, &self.parser)?;
        let seg_real = self.seg.real_input(batch, &self.parser)?;
        let rgb_fwd = g_forward_branch(&g, &self.rgb, &rgb_real, &y_trg, &y_diff, variant)?;
        let seg_fwd = g_forward_branch(&g, &self.seg, &seg_real, &y_trg, &y_diff, variant)?;

        // semantic consistency: each branch consumes the other's detached
        // one-hot output; skipped entirely at lambda_sc = 0 so the branches
        // are bit-independent
        let (sc_rgb, sc_seg) = if w.lambda_sc > 0.0 {
            let up_p = self.parser.store.upload(&g, false);
            let parsed = self.parser.forward(&g, &up_p, rgb_fwd.out)?;
            let s_out_onehot = g.argmax_one_hot_c(seg_fwd.out);
            let parsed_onehot = g.argmax_one_hot_c(parsed);
            let sc_rgb = losses::sc_loss_rgb(&g, s_out_onehot, parsed)?;
            let sc_seg = losses::sc_loss_seg(&g, parsed_onehot, seg_fwd.out)?;
            (Some(sc_rgb), Some(sc_seg))
        } else {
            (None, None)
        };

        let mut totals = Vec::with_capacity(2);
        for (fwd, sc) in [(&rgb_fwd, sc_rgb), (&seg_fwd, sc_seg)] {
            let mut total = fwd.adv_g;
            total = g.add(total, g.scalar_mul(fwd.cls_g, w.lambda_cls));
            total = g.add(total, g.scalar_mul(fwd.rec, w.lambda_rec));
            if let Some(sc) = sc {
                total = g.add(total, g.scalar_mul(sc, w.lambda_sc));
            }
            totals.push((total, sc));
        }

        for (branch, fwd, (total, sc)) in [
            (&mut self.rgb, rgb_fwd, totals[0]),
            (&mut self.seg, seg_fwd, totals[1]),
        ] {
            let parts = match branch.modality {
                Modality::Rgb => &mut record.rgb,
                Modality::Seg => &mut record.seg,
            };
            parts.adv_g = g.scalar_value(fwd.adv_g);
            parts.cls_g = g.scalar_value(fwd.cls_g);
            parts.rec = g.scalar_value(fwd.rec);
            parts.sc = sc.map(|v| g.scalar_value(v)).unwrap_or(0.0);
            losses::total_losses(parts, &w).map_err(|_| SecganError::Diverged {
                step: self.step,
                what: format!("{} generator loss {parts:?}", branch.modality),
            })?;
            let grads = param_grads(&g, total, &branch.gen.store, &fwd.up_g);
            branch.opt_g.step(&mut branch.gen.store, &grads, lr_g);
            fwd.bn.apply(&mut branch.gen.store);
            branch.g_updates += 1;
        }
        record.lr_g = lr_g;
        record.g_updated = true;
        Ok(())
    }

    /// Run one full algorithm iteration (D step, plus a G step every
    /// `n_critic`). Returns the scalar record.
    pub fn step_once(&mut self, train: &SplitTensors) -> Result<StepRecord> {
        self.step += 1;
        let (lr_g, lr_d) = lr_schedule(&self.config, self.step)?;
        let batch = self.sample_batch(train)?;
        let mut record = self.train_step_d(&batch, lr_d)?;
        record.step = self.step;
        if self.step % self.config.n_critic == 0 {
            self.train_step_g(&batch, lr_g, &mut record)?;
        }
        debug_assert_eq!(self.parser.byte_hash(), self.parser_hash, "parser must stay frozen");
        Ok(record)
    }
}

/// Learning rates at step `t` (1-based; `t = 0` is the initial state).
/// StarGAN kind: constant for the first half, then linear to zero.
/// AttGAN kind: constant for the first half, then exponential to `lr_floor`.
pub fn lr_schedule(config: &ExperimentConfig, t: u64) -> Result<(f32, f32)> {
    let total = config.iterations;
    if t > total {
        return Err(SecganError::contract(format!("step {t} beyond total {total}")));
    }
    let half = total / 2;
    let factor = match config.lr_schedule {
        ScheduleKind::StarganLinear => {
            if t <= half || total == half {
                1.0
            } else {
                1.0 - (t - half) as f64 / (total - half) as f64
            }
        }
        ScheduleKind::AttganExp => {
            if t <= half || total == half {
                1.0
            } else {
                let floor = (config.lr_floor as f64 / config.lr_g as f64).max(f64::MIN_POSITIVE);
                let r = floor.powf(1.0 / (total - half) as f64);
                r.powi((t - half) as i32)
            }
        }
    };
    Ok(((config.lr_g as f64 * factor) as f32, (config.lr_d as f64 * factor) as f32))
}

// ---------------------------------------------------------------------------
// run orchestration: logging, checkpoints, resume
// ---------------------------------------------------------------------------

pub const LOG_HEADER: &str = "step\tlr_g\tlr_d\trgb_adv_d\trgb_cls_d\trgb_gp\trgb_d_total\trgb_adv_g\trgb_cls_g\trgb_rec\trgb_sc\trgb_g_total\tseg_adv_d\tseg_cls_d\tseg_gp\tseg_d_total\tseg_adv_g\tseg_cls_g\tseg_rec\tseg_sc\tseg_g_total";

fn format_record(r: &StepRecord, w: &LossWeights) -> String {
    let branch = |p: &LossParts| -> String {
        let t = losses::total_losses(p, w).ok();
        let (d_total, g_total) = t.map(|t| (t.d_total, t.g_total)).unwrap_or((f32::NAN, f32::NAN));
        if r.g_updated {
            format!(
                "{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
                p.adv_d, p.cls_d, p.gp, d_total, p.adv_g, p.cls_g, p.rec, p.sc, g_total
            )
        } else {
            format!(
                "{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t\t\t\t\t",
                p.adv_d, p.cls_d, p.gp, d_total
            )
        }
    };
    format!(
        "{}\t{:.6e}\t{:.6e}\t{}\t{}",
        r.step,
        r.lr_g,
        r.lr_d,
        branch(&r.rgb),
        branch(&r.seg)
    )
}

/// Paths inside a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.tsv")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn checkpoint_dir(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}"))
    }

    pub fn final_dir(&self) -> PathBuf {
        self.root.join("final")
    }

    pub fn list_checkpoints(&self) -> Vec<(u64, PathBuf)> {
        let dir = self.root.join("checkpoints");
        let mut out = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().to_string();
                if let Some(num) = name.strip_prefix("step_") {
                    if let Ok(step) = num.parse::<u64>() {
                        out.push((step, e.path()));
                    }
                }
            }
        }
        out.sort();
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    step: u64,
    data_rng: ChaCha8Rng,
    gp_rng_rgb: ChaCha8Rng,
    gp_rng_seg: ChaCha8Rng,
    d_updates_rgb: u64,
    g_updates_rgb: u64,
    d_updates_seg: u64,
    g_updates_seg: u64,
    parser_hash: String,
    config_hash: String,
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    state.rgb.gen.save(&dir.join("g_rgb.ckpt"))?;
    state.seg.gen.save(&dir.join("g_seg.ckpt"))?;
    state.rgb.disc.save(&dir.join("d_rgb.ckpt"))?;
    state.seg.disc.save(&dir.join("d_seg.ckpt"))?;
    let meta = serde_json::json!({"kind": "adam"});
    nn::save_adam(&dir.join("opt_g_rgb.ckpt"), &meta, &state.rgb.opt_g)?;
    nn::save_adam(&dir.join("opt_d_rgb.ckpt"), &meta, &state.rgb.opt_d)?;
    nn::save_adam(&dir.join("opt_g_seg.ckpt"), &meta, &state.seg.opt_g)?;
    nn::save_adam(&dir.join("opt_d_seg.ckpt"), &meta, &state.seg.opt_d)?;
    let resume = ResumeState {
        step: state.step,
        data_rng: state.data_rng.clone(),
        gp_rng_rgb: state.rgb.gp_rng.clone(),
        gp_rng_seg: state.seg.gp_rng.clone(),
        d_updates_rgb: state.rgb.d_updates,
        g_updates_rgb: state.rgb.g_updates,
        d_updates_seg: state.seg.d_updates,
        g_updates_seg: state.seg.g_updates,
        parser_hash: state.parser_hash.clone(),
        config_hash: state.config.hash(),
    };
    let json = serde_json::to_string_pretty(&resume)
        .map_err(|e| SecganError::Checkpoint(format!("state encode: {e}")))?;
    std::fs::write(dir.join("state.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(
    config: &ExperimentConfig,
    schema: &AttributeSchema,
    parser: ParserHandle,
    dir: &Path,
) -> Result<TrainState> {
    let json = std::fs::read_to_string(dir.join("state.json"))?;
    let resume: ResumeState = serde_json::from_str(&json)
        .map_err(|e| SecganError::Checkpoint(format!("state decode: {e}")))?;
    if resume.config_hash != config.hash() {
        return Err(SecganError::Checkpoint(
            "checkpoint was produced by a different configuration".into(),
        ));
    }
    if resume.parser_hash != parser.byte_hash() {
        return Err(SecganError::Checkpoint(
            "checkpoint was produced with a different parser".into(),
        ));
    }
    let g_rgb = NetworkHandle::load(&dir.join("g_rgb.ckpt"))?;
    let g_seg = NetworkHandle::load(&dir.join("g_seg.ckpt"))?;
    let d_rgb = NetworkHandle::load(&dir.join("d_rgb.ckpt"))?;
    let d_seg = NetworkHandle::load(&dir.join("d_seg.ckpt"))?;
    let opt_g_rgb = nn::load_adam(&dir.join("opt_g_rgb.ckpt"), &g_rgb.store)?;
    let opt_d_rgb = nn::load_adam(&dir.join("opt_d_rgb.ckpt"), &d_rgb.store)?;
    let opt_g_seg = nn::load_adam(&dir.join("opt_g_seg.ckpt"), &g_seg.store)?;
    let opt_d_seg = nn::load_adam(&dir.join("opt_d_seg.ckpt"), &d_seg.store)?;
    let parser_hash = parser.byte_hash();
    Ok(TrainState {
        config: config.clone(),
        schema: schema.clone(),
        rgb: Branch {
            modality: Modality::Rgb,
            gen: g_rgb,
            disc: d_rgb,
            opt_g: opt_g_rgb,
            opt_d: opt_d_rgb,
            gp_rng: resume.gp_rng_rgb,
            d_updates: resume.d_updates_rgb,
            g_updates: resume.g_updates_rgb,
        },
        seg: Branch {
            modality: Modality::Seg,
            gen: g_seg,
            disc: d_seg,
            opt_g: opt_g_seg,
            opt_d: opt_d_seg,
            gp_rng: resume.gp_rng_seg,
            d_updates: resume.d_updates_seg,
            g_updates: resume.g_updates_seg,
        },
        parser,
        parser_hash,
        step: resume.step,
        data_rng: resume.data_rng,
    })
}

/// Train according to `config` inside `run_dir`, resuming from the newest
/// checkpoint when one exists. Writes `config.txt`, `log.tsv`, periodic
/// checkpoints, and the final product networks under `final/`.
pub fn run_training(
    config: &ExperimentConfig,
    dataset: &AttributeDataset,
    parser: ParserHandle,
    run_dir: &Path,
) -> Result<TrainState> {
    config.validate()?;
    let run = RunDir::new(run_dir.to_path_buf());
    std::fs::create_dir_all(&run.root)?;
    let train = crate::data::load_split(dataset, Split::Train)?;
    let schema = dataset.schema.clone();

    let existing = run.config_path();
    if existing.is_file() {
        let prev = ExperimentConfig::load(&existing)?;
        if prev.hash() != config.hash() {
            return Err(SecganError::Config(format!(
                "run directory {} already holds a different configuration",
                run.root.display()
            )));
        }
    } else {
        config.save(&existing)?;
    }

    let mut state = match run.list_checkpoints().last() {
        Some((_, dir)) => load_checkpoint(config, &schema, parser, dir)?,
        None => TrainState::new(config.clone(), schema, parser)?,
    };

    let start_step = state.step;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run.log_path())?;
    if start_step == 0 {
        writeln!(log, "{LOG_HEADER}")?;
    }

    while state.step < config.iterations {
        let record = state.step_once(&train)?;
        if record.step % config.log_every == 0 || record.g_updated {
            writeln!(log, "{}", format_record(&record, &config.weights))?;
        }
        let at_checkpoint = config.checkpoint_every > 0
            && record.step % config.checkpoint_every == 0;
        if at_checkpoint || record.step == config.iterations {
            log.flush()?;
            save_checkpoint(&state, &run.checkpoint_dir(record.step))?;
        }
        if config.sample_every > 0 && record.step % config.sample_every == 0 {
            write_sample_grid(&state, &train, &run.root.join("samples"), record.step)?;
        }
    }
    log.flush()?;

    // product: the final RGB generator (plus companions for mask emission)
    if state.step == config.iterations || config.iterations == 0 {
        let final_dir = run.final_dir();
        std::fs::create_dir_all(&final_dir)?;
        if config.iterations > 0 {
            state.rgb.gen.save(&final_dir.join("g_rgb.ckpt"))?;
            state.seg.gen.save(&final_dir.join("g_seg.ckpt"))?;
        }
    }
    Ok(state)
}

fn write_sample_grid(
    state: &TrainState,
    train: &SplitTensors,
    dir: &Path,
    step: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = train.images.shape()[0].min(4);
    let h = state.config.resolution;
    let g = Graph::new();
    let up = state.rgb.gen.store.upload(&g, false);
    let x = g.constant(
        train
            .images
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..n))
            .to_owned()
            .into_dyn(),
    );
    // reverse the first attribute as the editing preview
    let mut diff = Array2::zeros((n, state.config.n_a()));
    for i in 0..n {
        diff[[i, 0]] = if train.labels[i].get(0) == 1 { -1.0 } else { 1.0 };
    }
    let y = g.constant(diff.into_dyn());
    let out = state.rgb.gen.generator_forward(&g, &up, x, y, false, None)?;
    let out_v = g.value(out);
    let mut img = image::RgbImage::new((h * n) as u32, (2 * h) as u32);
    for i in 0..n {
        for row in 0..h {
            for col in 0..h {
                let to_px = |v: f32| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                let top = image::Rgb([
                    to_px(train.images[[i, 0, row, col]]),
                    to_px(train.images[[i, 1, row, col]]),
                    to_px(train.images[[i, 2, row, col]]),
                ]);
                let bottom = image::Rgb([
                    to_px(out_v[[i, 0, row, col]]),
                    to_px(out_v[[i, 1, row, col]]),
                    to_px(out_v[[i, 2, row, col]]),
                ]);
                img.put_pixel((i * h + col) as u32, row as u32, top);
                img.put_pixel((i * h + col) as u32, (h + row) as u32, bottom);
            }
        }
    }
    img.save(dir.join(format!("step_{step:08}.png")))?;
    Ok(())
}

/// Parse a run's `log.tsv` back into records (missing generator columns
/// parse as NaN with `g_updated = false`).
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 21 {
            return Err(SecganError::Other(format!("log line {} malformed", i + 1)));
        }
        let f = |s: &str| -> f32 { s.parse().unwrap_or(f32::NAN) };
        let branch = |off: usize| -> LossParts {
            LossParts {
                adv_d: f(cols[off]),
                cls_d: f(cols[off + 1]),
                gp: f(cols[off + 2]),
                adv_g: f(cols[off + 4]),
                cls_g: f(cols[off + 5]),
                rec: f(cols[off + 6]),
                sc: f(cols[off + 7]),
            }
        };
        let g_updated = !cols[7].is_empty();
        out.push(StepRecord {
            step: cols[0].parse().map_err(|_| {
                SecganError::Other(format!("log line {}: bad step", i + 1))
            })?,
            lr_g: f(cols[1]),
            lr_d: f(cols[2]),
            rgb: branch(3),
            seg: branch(12),
            g_updated,
        });
    }
    Ok(out)
}


#[cfg(test)]
mod timing {
    use super::tests_support::*;

    #[test]
    #[ignore]
    fn step_timing() {
        for (wm, bs) in [(0.0625f32, 8usize), (0.0625, 4), (0.125, 8)] {
            let (mut state, train) = toy_state(wm, bs);
            // warmup
            for _ in 0..3 {
                state.step_once(&train).unwrap();
            }
            let t0 = std::time::Instant::now();
            let steps = 20;
            for _ in 0..steps {
                state.step_once(&train).unwrap();
            }
            let dt = t0.elapsed().as_secs_f64() / steps as f64;
            println!("width_mult {wm} batch {bs}: {:.1} ms/step -> {:.1} min per 5k run", dt * 1e3, dt * 5000.0 / 60.0);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::data::{generate_toy_dataset, toy_schema, ToySpec};

    pub fn toy_state(width_mult: f32, batch_size: usize) -> (TrainState, SplitTensors) {
        let mut c = ExperimentConfig::default();
        c.backbone = Backbone::Attgan;
        c.resolution = 32;
        c.attributes = toy_schema().names.clone();
        c.batch_size = batch_size;
        c.iterations = 10_000;
        c.width_mult = width_mult;
        c.seed = 0;
        let spec = ToySpec { canvas: 32, seed: 0, ..Default::default() };
        let examples = generate_toy_dataset(&spec, 32).unwrap();
        let mut images = Array4::zeros((32, 3, 32, 32));
        let mut labels = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            images.index_axis_mut(ndarray::Axis(0), i).assign(&ex.image);
            labels.push(ex.label.clone());
        }
        let train = SplitTensors { images, labels, masks: None };
        let mut rng = stream(0, "parser/init");
        let parser = ParserHandle::build(32, [6, 8, 12], &mut rng).unwrap();
        let state = TrainState::new(c, toy_schema(), parser).unwrap();
        (state, train)
    }
}
