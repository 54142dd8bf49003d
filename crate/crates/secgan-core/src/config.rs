//! Flat key-value experiment configuration. Every tunable named by a design
//! default is a key here, so a run's manifest pins the whole setup. Files are
//! `key = value` lines with `#` comments; the CLI applies `--key value`
//! overrides through the same parser.

use crate::data::SplitConfig;
use crate::error::{Result, SecganError};
use crate::losses::{ClsLossVariant, LossWeights};
use crate::networks::{Backbone, NetOpts};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant for the first half, then linear decay to zero.
    StarganLinear,
    /// Constant for the first half, then exponential decay to `lr_floor`.
    AttganExp,
}

impl FromStr for ScheduleKind {
    type Err = SecganError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stargan_linear" => Ok(ScheduleKind::StarganLinear),
            "attgan_exp" => Ok(ScheduleKind::AttganExp),
            other => Err(SecganError::Config(format!("unknown lr_schedule '{other}'"))),
        }
    }
}

impl ScheduleKind {
    fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::StarganLinear => "stargan_linear",
            ScheduleKind::AttganExp => "attgan_exp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Penultimate features of the evaluation classifier.
    Classifier,
    /// Fixed seeded random convolutional projection.
    RandomProj,
}

impl FromStr for EmbedderKind {
    type Err = SecganError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(EmbedderKind::Classifier),
            "random_proj" => Ok(EmbedderKind::RandomProj),
            other => Err(SecganError::Config(format!("unknown embedder '{other}'"))),
        }
    }
}

impl EmbedderKind {
    fn as_str(&self) -> &'static str {
        match self {
            EmbedderKind::Classifier => "classifier",
            EmbedderKind::RandomProj => "random_proj",
        }
    }
}

/// Everything a run needs: model, losses, optimizer, schedule, data, paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbone: Backbone,
    pub resolution: usize,
    pub attributes: Vec<String>,
    pub weights: LossWeights,
    pub cls_loss_variant: ClsLossVariant,
    pub batch_size: usize,
    pub iterations: u64,
    pub n_critic: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub lr_g: f32,
    pub lr_d: f32,
    pub lr_schedule: ScheduleKind,
    pub lr_floor: f32,
    pub width_mult: f32,
    pub leaky_slope: f32,
    pub seed: u64,
    pub data_root: PathBuf,
    pub parser_path: PathBuf,
    pub run_root: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub sample_every: u64,
    pub split: SplitConfig,
    pub embedder: EmbedderKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Stargan,
            resolution: 128,
            attributes: vec![],
            weights: LossWeights::default(),
            cls_loss_variant: ClsLossVariant::Bce,
            batch_size: 16,
            iterations: 200_000,
            n_critic: 5,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_schedule: ScheduleKind::StarganLinear,
            lr_floor: 2e-6,
            width_mult: 1.0,
            leaky_slope: 0.01,
            seed: 0,
            data_root: PathBuf::from("data"),
            parser_path: PathBuf::from("parser.ckpt"),
            run_root: PathBuf::from("runs"),
            checkpoint_every: 10_000,
            log_every: 1,
            sample_every: 0,
            split: SplitConfig { train: usize::MAX, val: 0, test: 0 },
            embedder: EmbedderKind::Classifier,
        }
    }
}

pub const CONFIG_KEYS: [&str; 30] = [
    "backbone",
    "resolution",
    "attributes",
    "lambda_cls",
    "lambda_rec",
    "lambda_gp",
    "lambda_sc",
    "cls_loss_variant",
    "batch_size",
    "iterations",
    "n_critic",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "lr_g",
    "lr_d",
    "lr_schedule",
    "lr_floor",
    "width_mult",
    "leaky_slope",
    "seed",
    "data_root",
    "parser_path",
    "run_root",
    "checkpoint_every",
    "log_every",
    "sample_every",
    "split",
    "embedder",
];

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn unknown_key_error(key: &str) -> SecganError {
    let best = CONFIG_KEYS
        .iter()
        .min_by_key(|k| edit_distance(key, k))
        .copied()
        .unwrap_or("seed");
    if edit_distance(key, best) <= 3 {
        SecganError::Config(format!("unknown config key '{key}' (did you mean '{best}'?)"))
    } else {
        SecganError::Config(format!("unknown config key '{key}'"))
    }
}

impl ExperimentConfig {
    pub fn n_a(&self) -> usize {
        self.attributes.len()
    }

    pub fn net_opts(&self) -> NetOpts {
        NetOpts { width_mult: self.width_mult, leaky_slope: self.leaky_slope }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.attributes.is_empty() {
            return Err(SecganError::Config("attributes list is empty".into()));
        }
        if self.batch_size < 1 {
            return Err(SecganError::Config("batch_size must be >= 1".into()));
        }
        if self.n_critic < 1 {
            return Err(SecganError::Config("n_critic must be >= 1".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(SecganError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| SecganError::Config(format!("bad value for {what}: '{value}'"));
        match key {
            "backbone" => self.backbone = value.parse()?,
            "resolution" => self.resolution = value.parse().map_err(|_| bad(key))?,
            "attributes" => {
                self.attributes =
                    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "lambda_cls" => self.weights.lambda_cls = value.parse().map_err(|_| bad(key))?,
            "lambda_rec" => self.weights.lambda_rec = value.parse().map_err(|_| bad(key))?,
            "lambda_gp" => self.weights.lambda_gp = value.parse().map_err(|_| bad(key))?,
            "lambda_sc" => self.weights.lambda_sc = value.parse().map_err(|_| bad(key))?,
            "cls_loss_variant" => {
                self.cls_loss_variant = match value {
                    "bce" => ClsLossVariant::Bce,
                    "paper_literal" => ClsLossVariant::PaperLiteral,
                    _ => return Err(bad(key)),
                }
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad(key))?,
            "n_critic" => self.n_critic = value.parse().map_err(|_| bad(key))?,
            "beta1" => self.beta1 = value.parse().map_err(|_| bad(key))?,
            "beta2" => self.beta2 = value.parse().map_err(|_| bad(key))?,
            "adam_eps" => self.adam_eps = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key))?,
            "lr_g" => self.lr_g = value.parse().map_err(|_| bad(key))?,
            "lr_d" => self.lr_d = value.parse().map_err(|_| bad(key))?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "lr_floor" => self.lr_floor = value.parse().map_err(|_| bad(key))?,
            "width_mult" => self.width_mult = value.parse().map_err(|_| bad(key))?,
            "leaky_slope" => self.leaky_slope = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "data_root" => self.data_root = PathBuf::from(value),
            "parser_path" => self.parser_path = PathBuf::from(value),
            "run_root" => self.run_root = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "log_every" => self.log_every = value.parse().map_err(|_| bad(key))?,
            "sample_every" => self.sample_every = value.parse().map_err(|_| bad(key))?,
            "split" => {
                let parts: Vec<&str> = value.split('/').collect();
                if parts.len() != 3 {
                    return Err(bad("split (want train/val/test)"));
                }
                self.split = SplitConfig {
                    train: parts[0].trim().parse().map_err(|_| bad(key))?,
                    val: parts[1].trim().parse().map_err(|_| bad(key))?,
                    test: parts[2].trim().parse().map_err(|_| bad(key))?,
                };
            }
            "embedder" => self.embedder = value.parse()?,
            other => return Err(unknown_key_error(other)),
        }
        Ok(())
    }

    /// Canonical text form; also the input to the config hash.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let cls = match self.cls_loss_variant {
            ClsLossVariant::Bce => "bce",
            ClsLossVariant::PaperLiteral => "paper_literal",
        };
        format!(
            "backbone = {}\nresolution = {}\nattributes = {}\nlambda_cls = {}\nlambda_rec = {}\n\
             lambda_gp = {}\nlambda_sc = {}\ncls_loss_variant = {cls}\nbatch_size = {}\n\
             iterations = {}\nn_critic = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n\
             weight_decay = {}\nlr_g = {}\nlr_d = {}\nlr_schedule = {}\nlr_floor = {}\n\
             width_mult = {}\nleaky_slope = {}\nseed = {}\ndata_root = {}\nparser_path = {}\n\
             run_root = {}\ncheckpoint_every = {}\nlog_every = {}\nsample_every = {}\n\
             split = {}/{}/{}\nembedder = {}\n",
            self.backbone,
            self.resolution,
            self.attributes.join(","),
            w.lambda_cls,
            w.lambda_rec,
            w.lambda_gp,
            w.lambda_sc,
            self.batch_size,
            self.iterations,
            self.n_critic,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.weight_decay,
            self.lr_g,
            self.lr_d,
            self.lr_schedule.as_str(),
            self.lr_floor,
            self.width_mult,
            self.leaky_slope,
            self.seed,
            self.data_root.display(),
            self.parser_path.display(),
            self.run_root.display(),
            self.checkpoint_every,
            self.log_every,
            self.sample_every,
            self.split.train,
            self.split.val,
            self.split.test,
            self.embedder.as_str(),
        )
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SecganError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SecganError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.attributes = vec!["a".into(), "b".into()];
        c.weights.lambda_sc = 0.25;
        c.backbone = Backbone::Attgan;
        c.split = SplitConfig { train: 10, val: 2, test: 3 };
        let text = c.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_suggests() {
        let mut c = ExperimentConfig::default();
        let err = c.set("lamda_sc", "0.1").unwrap_err().to_string();
        assert!(err.contains("lambda_sc"), "{err}");
    }

    #[test]
    fn override_changes_hash() {
        let mut c = ExperimentConfig::default();
        c.attributes = vec!["a".into()];
        let h0 = c.hash();
        c.set("lambda_sc", "0").unwrap();
        assert_ne!(h0, c.hash());
        assert_eq!(c.weights.lambda_sc, 0.0);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut c = ExperimentConfig::default();
        c.attributes = vec!["a".into()];
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c.batch_size = 8;
        c.weights.lambda_gp = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# a comment\n\nseed = 42\n";
        let c = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(c.seed, 42);
    }
}
