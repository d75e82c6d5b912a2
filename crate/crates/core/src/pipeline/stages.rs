use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackResult};
use crate::dataset::{generate_shapes, Dataset, ShapesSpec};
use crate::signatures::{mean_cka, AttentionProfile, CkaMatrix};
use crate::stats::{histogram, shared_edges, Histogram};
use crate::tensor::write_tensor;
use crate::vit::{load_checkpoint, save_checkpoint, train_toy, TrainError, ViTConfig, ViTWeights};

use super::extract::{
    extract_set, head_names, read_cka_rows, tap_names, write_matrix, write_set, MatrixMeta,
    SignatureTable, CLEAN,
};
use super::{read_json, write_json, DataSource, Layout, PipelineError, Result, RunConfig};

/// Written when an attack tag fails; the rest of the grid carries on.
pub(crate) const FAILED_FILE: &str = "FAILED";
pub(crate) const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy)]
enum Split {
    Train,
    Eval,
}

fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn check_dataset(data: &Dataset, model: &ViTConfig, origin: &Path) -> Result<()> {
    let bad = |m: String| Err(PipelineError::Data(format!("{}: {m}", origin.display())));
    if data.is_empty() {
        return bad("no samples".into());
    }
    let shape = model.image_shape();
    let mut ids = BTreeSet::new();
    for s in &data.samples {
        if s.image.shape() != shape.as_slice() {
            return bad(format!("{} has shape {:?}, expected {shape:?}", s.id, s.image.shape()));
        }
        if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad(format!("{} has pixels outside [0,1]", s.id));
        }
        if s.label >= model.num_classes {
            return bad(format!("{} has label {}", s.id, s.label));
        }
        if !ids.insert(s.id.as_str()) {
            return bad(format!("duplicate sample id {}", s.id));
        }
    }
    Ok(())
}

fn load_sorted(dir: &Path, model: &ViTConfig) -> Result<Dataset> {
    let mut data = Dataset::load(dir)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    data.samples.sort_by(|a, b| a.id.cmp(&b.id));
    check_dataset(&data, model, dir)?;
    Ok(data)
}

fn load_split(cfg: &RunConfig, layout: &Layout, split: Split) -> Result<Dataset> {
    let (source, generated) = match split {
        Split::Train => (&cfg.train_data, layout.train_dir()),
        Split::Eval => (&cfg.eval_data, layout.eval_dir()),
    };
    match source {
        DataSource::Generate => load_sorted(&generated, &cfg.model),
        DataSource::Directory(dir) => load_sorted(dir, &cfg.model),
    }
}

fn load_model(cfg: &RunConfig, layout: &Layout) -> Result<ViTWeights> {
    let w = load_checkpoint(&layout.model_dir())?;
    if w.config() != &cfg.model {
        return Err(PipelineError::Config(
            "checkpoint model shape differs from the configured one".into(),
        ));
    }
    Ok(w)
}

/// Generates the train and evaluation sets, or validates the configured
/// dataset directories.
pub fn cmd_gen_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    for (split, source, dir, per_class, seed, prefix) in [
        (Split::Train, &cfg.train_data, layout.train_dir(), cfg.train_per_class, cfg.seed, "train-"),
        (
            Split::Eval,
            &cfg.eval_data,
            layout.eval_dir(),
            cfg.eval_per_class,
            cfg.seed.wrapping_add(1_000_003),
            "eval-",
        ),
    ] {
        if let DataSource::Generate = source {
            let data = generate_shapes(&ShapesSpec {
                side: cfg.model.image_side,
                channels: cfg.model.channels,
                classes: cfg.model.num_classes,
                per_class,
                seed,
                prefix: prefix.into(),
            })
            .map_err(|e| PipelineError::Config(e.to_string()))?;
            ensure_fresh_dir(&dir)?;
            data.save(&dir)?;
        }
        let data = load_split(cfg, layout, split)?;
        log::info!("{prefix}set: {} samples", data.len());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub reached_target: bool,
    pub train_accuracy: f64,
    pub num_params: usize,
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let data = load_split(cfg, layout, Split::Train)?;
    let dir = layout.model_dir();
    ensure_fresh_dir(&dir)?;
    let outcome = match train_toy(&data, &cfg.model, &cfg.train_config()) {
        Ok(o) => o,
        Err(TrainError::NonFiniteLoss { epoch, step, last_good, log }) => {
            save_checkpoint(&dir.join("last_good"), &last_good)?;
            write_train_log(&dir, &log)?;
            return Err(PipelineError::Numeric(format!(
                "training diverged at epoch {epoch}, step {step}; last finite weights in {}",
                dir.join("last_good").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&dir, &outcome.weights)?;
    write_train_log(&dir, &outcome.log)?;
    let summary = TrainSummary {
        epochs: outcome.log.len(),
        reached_target: outcome.reached_target,
        train_accuracy: outcome.log.last().map_or(0.0, |l| l.train_accuracy),
        num_params: outcome.weights.num_params(),
    };
    if !summary.reached_target {
        log::warn!(
            "training stopped at accuracy {:.3} below target {}",
            summary.train_accuracy,
            cfg.target_accuracy
        );
    }
    write_json(&dir.join("train.json"), &summary)
}

fn write_train_log(dir: &Path, log: &[crate::vit::EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,mean_loss,train_accuracy\n");
    for l in log {
        writeln!(s, "{},{},{}", l.epoch, l.mean_loss, l.train_accuracy).unwrap();
    }
    fs::write(dir.join("train_log.csv"), s)?;
    Ok(())
}

/// Clean-set statistics that attacked inputs are compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    /// Number of clean samples the profile was built from.
    pub count: usize,
    pub sample_ids_first: String,
    pub sample_ids_last: String,
    pub phi: usize,
    pub cka_batch: usize,
    pub cka_batches: usize,
    pub taps: Vec<String>,
    pub heads: Vec<String>,
    /// Mean attention distance per (block, head).
    pub mean_attention: AttentionProfile,
    /// Mean CKA matrix over the clean batches.
    pub m_ref: CkaMatrix,
    /// Clean-only histograms per signature, each over its own range.
    pub clean_histograms: BTreeMap<String, Histogram>,
}

impl ReferenceProfile {
    pub const FILE: &'static str = "reference.json";

    pub fn load(layout: &Layout) -> Result<Self> {
        read_json(&layout.reference_dir().join(Self::FILE))
    }
}

pub fn cmd_build_reference(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let model = load_model(cfg, layout)?;
    let eval = load_split(cfg, layout, Split::Eval)?;
    if eval.len() < cfg.cka_batch {
        return Err(PipelineError::Data(format!(
            "{} clean samples cannot fill a CKA batch of {}",
            eval.len(),
            cfg.cka_batch
        )));
    }
    let ex = extract_set(&model, &eval, cfg.frequency_spec(), cfg.cka_batch)?;
    let profiles: Vec<AttentionProfile> = ex.samples.iter().map(|t| t.profile.clone()).collect();
    let mean_attention = AttentionProfile::mean(&profiles)?;
    let matrices: Vec<CkaMatrix> = ex.batches.iter().map(|(_, m)| m.clone()).collect();
    let m_ref = mean_cka(&matrices)?;

    let dir = layout.reference_dir();
    ensure_fresh_dir(&dir)?;
    let taps = tap_names(&cfg.model);
    let undefined = (0..m_ref.layers)
        .flat_map(|i| (0..m_ref.layers).map(move |j| (i, j)))
        .filter(|&(i, j)| m_ref.get(i, j).is_none())
        .collect();
    write_matrix(
        &dir.join("m_ref"),
        &m_ref.to_tensor(),
        &MatrixMeta {
            m: cfg.cka_batch,
            taps: taps.clone(),
            batches: ex.batches.iter().map(|(ids, _)| ids.clone()).collect(),
            undefined,
            s_cka: None,
        },
    )?;

    write_set(layout, &cfg.model, CLEAN, &ex, &mean_attention, &m_ref)?;
    let table = SignatureTable::read(&layout.signatures_dir().join(format!("{CLEAN}.csv")))?;
    let (_, cka_rows) = read_cka_rows(&layout.cka_dir().join(format!("{CLEAN}.csv")))?;
    let mut clean_histograms = BTreeMap::new();
    for (name, values) in [
        ("fr", table.rows.iter().map(|r| r.fr).collect::<Vec<_>>()),
        ("ph", table.rows.iter().map(|r| r.ph).collect()),
        ("s_ap", table.rows.iter().map(|r| r.s_ap).collect()),
        ("s_cka", cka_rows.iter().map(|r| r.s_cka).collect()),
    ] {
        let edges = shared_edges(&[&values], cfg.bins)?;
        clean_histograms.insert(name.to_string(), histogram(&values, &edges)?);
    }

    let reference = ReferenceProfile {
        count: eval.len(),
        sample_ids_first: eval.samples[0].id.clone(),
        sample_ids_last: eval.samples[eval.len() - 1].id.clone(),
        phi: cfg.frequency_spec().threshold,
        cka_batch: cfg.cka_batch,
        cka_batches: ex.batches.len(),
        taps,
        heads: head_names(&cfg.model),
        mean_attention,
        m_ref,
        clean_histograms,
    };
    write_json(&dir.join(ReferenceProfile::FILE), &reference)?;
    log::info!("reference built from {} clean samples", reference.count);
    Ok(())
}

fn write_attacked_set(
    dir: &Path,
    eval: &Dataset,
    spec: &crate::attacks::AttackSpec,
    results: &[AttackResult],
) -> Result<()> {
    let mut labels = String::from("filename,label\n");
    let mut manifest = String::from(
        "source_file,label,family,hyperparameters,success,clean_prediction,prediction,linf,l2,iterations\n",
    );
    for (s, r) in eval.samples.iter().zip(results) {
        let name = format!("{}.vtf", s.id);
        let mut w = BufWriter::new(fs::File::create(dir.join(&name))?);
        write_tensor(&mut w, &r.image)?;
        w.flush()?;
        writeln!(labels, "{name},{}", s.label).unwrap();
        writeln!(
            manifest,
            "{name},{},{},{},{},{},{},{},{},{}",
            s.label,
            spec.family(),
            spec.hyperparameters(),
            u8::from(r.success),
            r.clean_prediction,
            r.prediction,
            r.linf,
            r.l2,
            r.iterations
        )
        .unwrap();
    }
    fs::write(dir.join(crate::dataset::LABELS_FILE), labels)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Attacks every evaluation sample with every configured attack. A failing
/// tag is recorded in its directory and skipped by later stages.
pub fn cmd_attack(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let model = load_model(cfg, layout)?;
    let eval = load_split(cfg, layout, Split::Eval)?;
    for spec in &cfg.attacks {
        let tag = spec.tag();
        let dir = layout.attack_dir(&tag);
        ensure_fresh_dir(&dir)?;
        let results: std::result::Result<Vec<AttackResult>, _> = eval
            .samples
            .par_iter()
            .map(|s| {
                run_attack(&model, &s.image, s.label, spec)
                    .map_err(|e| format!("{}: {e}", s.id))
            })
            .collect();
        match results {
            Ok(results) => {
                write_attacked_set(&dir, &eval, spec, &results)?;
                let success = results.iter().filter(|r| r.success).count();
                log::info!("{tag}: {success}/{} predictions changed", results.len());
            }
            Err(msg) => {
                log::error!("{tag} failed: {msg}");
                fs::write(dir.join(FAILED_FILE), format!("{msg}\n"))?;
            }
        }
    }
    Ok(())
}

pub(crate) fn attack_available(layout: &Layout, tag: &str) -> bool {
    let dir = layout.attack_dir(tag);
    dir.join(MANIFEST_FILE).exists() && !dir.join(FAILED_FILE).exists()
}

/// Signatures of every available attacked set against the reference.
pub fn cmd_extract(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let model = load_model(cfg, layout)?;
    let reference = ReferenceProfile::load(layout)?;
    if reference.phi != cfg.frequency_spec().threshold || reference.cka_batch != cfg.cka_batch {
        return Err(PipelineError::Config(
            "reference was built with a different phi or CKA batch size".into(),
        ));
    }
    for spec in &cfg.attacks {
        let tag = spec.tag();
        if !attack_available(layout, &tag) {
            log::warn!("{tag}: no attacked set, skipping");
            continue;
        }
        let data = load_sorted(&layout.attack_dir(&tag), &cfg.model)?;
        let ex = extract_set(&model, &data, cfg.frequency_spec(), cfg.cka_batch)?;
        let summary =
            write_set(layout, &cfg.model, &tag, &ex, &reference.mean_attention, &reference.m_ref)?;
        log::info!("{tag}: accuracy {:.3}", summary.accuracy);
    }
    Ok(())
}
