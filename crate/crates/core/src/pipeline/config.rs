//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | drives data generation, initialization and shuffling |
//! | `out` | `run` | output bundle directory |
//! | `image_side`, `channels`, `patch_side`, `depth`, `heads`, `embed_dim`, `mlp_hidden`, `num_classes` | 32, 3, 8, 4, 4, 64, 128, 10 | model shape |
//! | `train_data`, `eval_data` | `generate` | `generate` or a dataset directory |
//! | `train_per_class`, `eval_per_class` | 100, 50 | generated samples per class |
//! | `lr`, `momentum`, `batch_size`, `max_epochs`, `target_accuracy` | 0.03, 0.9, 16, 50, 0.97 | training |
//! | `attacks` | FGSM, PGD and C&W grid | comma-separated `fgsm:EPS`, `pgd:EPS[:ALPHA:STEPS]`, `cw:C[:KAPPA:STEPS:LR]`; empty for none |
//! | `phi` | `image_side` | DCT high/low index-sum threshold |
//! | `cka_batch` | 4 | samples per CKA batch |
//! | `bins` | 100 | histogram bins |

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::attacks::AttackSpec;
use crate::vit::{TrainConfig, ViTConfig};

use super::PipelineError;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generate,
    Directory(PathBuf),
}

impl DataSource {
    fn parse(v: &str) -> Self {
        if v == "generate" {
            DataSource::Generate
        } else {
            DataSource::Directory(PathBuf::from(v))
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Generate => "generate".into(),
            DataSource::Directory(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ViTConfig,
    pub train_data: DataSource,
    pub eval_data: DataSource,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub attacks: Vec<AttackSpec>,
    pub phi: Option<usize>,
    pub cka_batch: usize,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            model: ViTConfig::default(),
            train_data: DataSource::Generate,
            eval_data: DataSource::Generate,
            train_per_class: 100,
            eval_per_class: 50,
            lr: 0.03,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 50,
            target_accuracy: 0.97,
            attacks: AttackSpec::default_grid(),
            phi: None,
            cka_batch: 4,
            bins: crate::stats::DEFAULT_BINS,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key; used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "image_side" => m.image_side = num(key, value)?,
            "channels" => m.channels = num(key, value)?,
            "patch_side" => m.patch_side = num(key, value)?,
            "depth" => m.depth = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "mlp_hidden" => m.mlp_hidden = num(key, value)?,
            "num_classes" => m.num_classes = num(key, value)?,
            "train_data" => self.train_data = DataSource::parse(value),
            "eval_data" => self.eval_data = DataSource::parse(value),
            "train_per_class" => self.train_per_class = num(key, value)?,
            "eval_per_class" => self.eval_per_class = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "target_accuracy" => self.target_accuracy = num(key, value)?,
            "attacks" => {
                self.attacks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<AttackSpec>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "phi" => self.phi = Some(num(key, value)?),
            "cka_batch" => self.cka_batch = num(key, value)?,
            "bins" => self.bins = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return err("per-class sample counts must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return err(format!("lr {} / momentum {}", self.lr, self.momentum));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.cka_batch < 2 {
            return err(format!("cka_batch {} < 2", self.cka_batch));
        }
        if self.bins == 0 {
            return err("bins must be positive".into());
        }
        self.frequency_spec()
            .validate(self.model.image_side)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut tags: Vec<String> = self.attacks.iter().map(AttackSpec::tag).collect();
        tags.sort();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return err("duplicate attack tags in grid".into());
        }
        Ok(())
    }

    pub fn frequency_spec(&self) -> crate::signatures::FrequencySpec {
        crate::signatures::FrequencySpec {
            threshold: self.phi.unwrap_or(self.model.image_side),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            target_accuracy: self.target_accuracy,
            seed: self.seed,
        }
    }

    /// Every key with its resolved value; parses back to the same config.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("image_side", m.image_side.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_side", m.patch_side.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("train_data", self.train_data.render());
        kv("eval_data", self.eval_data.render());
        kv("train_per_class", self.train_per_class.to_string());
        kv("eval_per_class", self.eval_per_class.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("target_accuracy", self.target_accuracy.to_string());
        kv(
            "attacks",
            self.attacks.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        kv("phi", self.frequency_spec().threshold.to_string());
        kv("cka_batch", self.cka_batch.to_string());
        kv("bins", self.bins.to_string());
        s
    }
}
