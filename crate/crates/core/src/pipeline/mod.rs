//! End-to-end experiment: data, training, reference profile, attacks,
//! signature extraction, comparison and report.
//!
//! Every stage reads and writes only files under the output directory (or
//! a configured dataset directory), so stages can be rerun independently:
//!
//! ```text
//! <out>/config.txt                  resolved configuration
//! <out>/data/{train,eval}/          VTF1 images + labels.csv
//! <out>/model/                      checkpoint, train_log.csv, train.json
//! <out>/reference/                  reference.json, m_ref.vtf, m_ref.json
//! <out>/attacks/<tag>/              VTF1 images, labels.csv, manifest.csv
//! <out>/signatures/<set>.csv        per-sample FR, PH, AD per head, S_AP
//! <out>/signatures/<set>_posteriors.csv
//! <out>/signatures/<set>.json       set summary
//! <out>/cka/<set>.csv               per-batch S_CKA and per-layer sums
//! <out>/cka/<set>_d.vtf, _d.json    mean difference matrix D
//! <out>/compare/<tag>/<sig>.json    separability report
//! <out>/compare/<tag>/<sig>_hist.csv
//! <out>/report/                     report.json, accuracy.csv, separability.csv
//! ```

mod config;
mod extract;
mod report;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use config::{DataSource, RunConfig};
pub use extract::{
    head_names, read_cka_rows, tap_names, CkaRow, MatrixMeta, SetSummary, SignatureRow,
    SignatureTable, CLEAN,
};
pub use report::{
    accuracy_from_posteriors, cmd_compare, cmd_report, AttackRow, Report, SignatureTrend,
    TrendPoint, SIGNATURES,
};
pub use stages::{
    cmd_attack, cmd_build_reference, cmd_extract, cmd_gen_data, cmd_train, ReferenceProfile,
    TrainSummary,
};

use crate::attacks::AttackError;
use crate::dataset::DatasetError;
use crate::signatures::SignatureError;
use crate::stats::StatsError;
use crate::tensor::TensorError;
use crate::vit::{ModelError, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code for this failure category.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
            PipelineError::Io(_) => 5,
        }
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => PipelineError::Io(e),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Io(e) => PipelineError::Io(e),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            ModelError::InvalidConfig(m) => PipelineError::Config(m),
            ModelError::Io(e) => PipelineError::Io(e),
            ModelError::Tensor(e) => e.into(),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<AttackError> for PipelineError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Model(e) => e.into(),
            AttackError::InvalidSpec(m) => PipelineError::Config(m),
            AttackError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<SignatureError> for PipelineError {
    fn from(e: SignatureError) -> Self {
        match e {
            SignatureError::BadThreshold { .. } => PipelineError::Config(e.to_string()),
            SignatureError::DegenerateEnergy
            | SignatureError::ZeroAttention
            | SignatureError::NotSimplex(_) => PipelineError::Numeric(e.to_string()),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<StatsError> for PipelineError {
    fn from(e: StatsError) -> Self {
        PipelineError::Numeric(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    BuildReference,
    Attack,
    Extract,
    Compare,
    Report,
    /// Every stage in order.
    All,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::BuildReference,
        Stage::Attack,
        Stage::Extract,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::BuildReference => "build-reference",
            Stage::Attack => "attack",
            Stage::Extract => "extract",
            Stage::Compare => "compare",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Paths inside an output bundle.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("data").join("train")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("data").join("eval")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn reference_dir(&self) -> PathBuf {
        self.root.join("reference")
    }
    pub fn attack_dir(&self, tag: &str) -> PathBuf {
        self.root.join("attacks").join(tag)
    }
    pub fn signatures_dir(&self) -> PathBuf {
        self.root.join("signatures")
    }
    pub fn cka_dir(&self) -> PathBuf {
        self.root.join("cka")
    }
    pub fn compare_dir(&self, tag: &str) -> PathBuf {
        self.root.join("compare").join(tag)
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Runs one stage, or all of them, against `cfg.out`.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    std::fs::create_dir_all(&layout.root)?;
    // the output path itself stays out of the bundle so reruns elsewhere match
    let rendered: String = cfg
        .render()
        .lines()
        .filter(|l| !l.starts_with("out ="))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(layout.config_file(), rendered)?;
    let stages: Vec<Stage> = match stage {
        Stage::All => Stage::ORDER.to_vec(),
        s => vec![s],
    };
    for s in stages {
        log::info!("stage {s}");
        match s {
            Stage::GenData => cmd_gen_data(cfg, &layout)?,
            Stage::Train => cmd_train(cfg, &layout)?,
            Stage::BuildReference => cmd_build_reference(cfg, &layout)?,
            Stage::Attack => cmd_attack(cfg, &layout)?,
            Stage::Extract => cmd_extract(cfg, &layout)?,
            Stage::Compare => cmd_compare(cfg, &layout)?,
            Stage::Report => {
                cmd_report(cfg, &layout)?;
            }
            Stage::All => unreachable!(),
        }
    }
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Header and rows of a small comma-separated file without quoting.
pub(crate) fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| PipelineError::Data(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<String> = l.split(',').map(str::to_string).collect();
            if row.len() == header.len() {
                Ok(row)
            } else {
                Err(PipelineError::Data(format!(
                    "{}: row {} has {} fields, header has {}",
                    path.display(),
                    i + 2,
                    row.len(),
                    header.len()
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

pub(crate) fn parse_f64(field: &str, path: &Path) -> Result<f64> {
    field
        .parse()
        .map_err(|_| PipelineError::Data(format!("{}: bad number {field:?}", path.display())))
}
