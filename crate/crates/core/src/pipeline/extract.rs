use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::signatures::{
    attention_profile_summary, cka_difference_summary, cka_matrix, frequency_ratio,
    posterior_entropy, AttentionProfile, CkaMatrix, FrequencySpec,
};
use crate::tensor::{write_tensor, Tensor};
use crate::vit::{PatchGrid, ViTConfig, ViTWeights, TAP_KINDS};

use super::{parse_f64, read_csv, write_json, Layout, PipelineError, Result};

/// Name of the clean evaluation set among signature outputs.
pub const CLEAN: &str = "clean";

pub fn tap_names(cfg: &ViTConfig) -> Vec<String> {
    (0..cfg.depth)
        .flat_map(|b| TAP_KINDS.iter().map(move |k| format!("b{b}.{k}")))
        .collect()
}

pub fn head_names(cfg: &ViTConfig) -> Vec<String> {
    (0..cfg.depth)
        .flat_map(|b| (0..cfg.heads).map(move |h| format!("b{b}h{h}")))
        .collect()
}

/// Per-sample quantities of one forward pass.
#[derive(Clone, Debug)]
pub(crate) struct SampleTrace {
    pub id: String,
    pub label: usize,
    pub fr: f64,
    pub ph: f64,
    pub profile: AttentionProfile,
    pub posterior: Vec<f64>,
    pub prediction: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Extraction {
    pub samples: Vec<SampleTrace>,
    /// Sample ids and CKA matrix of every full batch.
    pub batches: Vec<(Vec<String>, CkaMatrix)>,
    /// Trailing samples that did not fill a batch.
    pub leftover: usize,
}

/// Runs the model over `data` (sorted by id) in consecutive groups of `m`.
pub(crate) fn extract_set(
    model: &ViTWeights,
    data: &Dataset,
    spec: FrequencySpec,
    m: usize,
) -> Result<Extraction> {
    let grid = PatchGrid::new(model.config());
    let chunks: Vec<_> = data
        .samples
        .par_chunks(m)
        .map(|chunk| -> Result<(Vec<SampleTrace>, Option<CkaMatrix>)> {
            let mut traces = Vec::with_capacity(chunk.len());
            let mut latents: Vec<Vec<f64>> = Vec::new();
            for s in chunk {
                let tr = model.forward(&s.image)?;
                if latents.is_empty() {
                    latents = vec![Vec::new(); tr.latents.len()];
                }
                for (acc, t) in latents.iter_mut().zip(&tr.latents) {
                    acc.extend_from_slice(t.data());
                }
                traces.push(SampleTrace {
                    id: s.id.clone(),
                    label: s.label,
                    fr: frequency_ratio(&s.image, spec)?,
                    ph: posterior_entropy(&tr.posterior)?,
                    profile: AttentionProfile::from_trace(&tr, &grid)?,
                    prediction: tr.predicted(),
                    posterior: tr.posterior,
                });
            }
            let cka = if chunk.len() == m {
                let layers: Vec<Tensor> = latents
                    .into_iter()
                    .map(|d| {
                        let c = d.len() / m;
                        Tensor::new(vec![m, c], d)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                Some(cka_matrix(&layers)?)
            } else {
                None
            };
            Ok((traces, cka))
        })
        .collect::<Result<_>>()?;
    let mut out = Extraction { samples: Vec::new(), batches: Vec::new(), leftover: 0 };
    for (traces, cka) in chunks {
        match cka {
            Some(c) => out.batches.push((traces.iter().map(|t| t.id.clone()).collect(), c)),
            None => out.leftover += traces.len(),
        }
        out.samples.extend(traces);
    }
    Ok(out)
}

/// One row of `signatures/<set>.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureRow {
    pub sample_id: String,
    pub attack: String,
    pub fr: f64,
    pub ph: f64,
    /// Block-major attention distances.
    pub ad: Vec<f64>,
    pub s_ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignatureTable {
    /// `b{block}h{head}` labels of the `ad` entries.
    pub heads: Vec<String>,
    pub rows: Vec<SignatureRow>,
}

impl SignatureTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,attack,fr,ph");
        for h in &self.heads {
            write!(s, ",ad_{h}").unwrap();
        }
        s.push_str(",s_ap\n");
        for r in &self.rows {
            write!(s, "{},{},{},{}", r.sample_id, r.attack, r.fr, r.ph).unwrap();
            for v in &r.ad {
                write!(s, ",{v}").unwrap();
            }
            writeln!(s, ",{}", r.s_ap).unwrap();
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, rows) = read_csv(path)?;
        let n = header.len();
        if n < 5 || header[..4] != ["sample_id", "attack", "fr", "ph"] || header[n - 1] != "s_ap" {
            return Err(PipelineError::Data(format!("{}: unexpected header", path.display())));
        }
        let heads = header[4..n - 1]
            .iter()
            .map(|h| h.strip_prefix("ad_").unwrap_or(h).to_string())
            .collect();
        let rows = rows
            .into_iter()
            .map(|r| {
                Ok(SignatureRow {
                    sample_id: r[0].clone(),
                    attack: r[1].clone(),
                    fr: parse_f64(&r[2], path)?,
                    ph: parse_f64(&r[3], path)?,
                    ad: r[4..n - 1].iter().map(|v| parse_f64(v, path)).collect::<Result<_>>()?,
                    s_ap: parse_f64(&r[n - 1], path)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SignatureTable { heads, rows })
    }
}

/// One row of `cka/<set>.csv`: a batch, its `S_CKA` against the reference
/// and the per-layer row sums of its difference matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaRow {
    pub batch: usize,
    pub samples: Vec<String>,
    pub s_cka: f64,
    pub layer_sums: Vec<f64>,
}

pub(crate) fn cka_csv(taps: &[String], rows: &[CkaRow]) -> String {
    let mut s = String::from("batch,samples,s_cka");
    for t in taps {
        write!(s, ",{t}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{}", r.batch, r.samples.join(";"), r.s_cka).unwrap();
        for v in &r.layer_sums {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn read_cka_rows(path: &Path) -> Result<(Vec<String>, Vec<CkaRow>)> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 3 || header[..3] != ["batch", "samples", "s_cka"] {
        return Err(PipelineError::Data(format!("{}: unexpected header", path.display())));
    }
    let taps = header[3..].to_vec();
    let rows = rows
        .into_iter()
        .map(|r| {
            Ok(CkaRow {
                batch: r[0]
                    .parse()
                    .map_err(|_| PipelineError::Data(format!("{}: bad batch", path.display())))?,
                samples: r[1].split(';').map(str::to_string).collect(),
                s_cka: parse_f64(&r[2], path)?,
                layer_sums: r[3..].iter().map(|v| parse_f64(v, path)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((taps, rows))
}

/// Metadata written next to a persisted CKA or difference matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub m: usize,
    pub taps: Vec<String>,
    pub batches: Vec<Vec<String>>,
    /// `[i, j]` entries that were undefined and left out.
    pub undefined: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_cka: Option<f64>,
}

/// Writes `<stem>.vtf` and `<stem>.json`. The stem may itself contain dots.
pub(crate) fn write_matrix(path_stem: &Path, t: &Tensor, meta: &MatrixMeta) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(with_suffix(path_stem, ".vtf"))?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    write_json(&with_suffix(path_stem, ".json"), meta)
}

pub(crate) fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Summary of one extracted set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_fr: f64,
    pub mean_ph: f64,
    pub mean_s_ap: f64,
    pub cka_batches: usize,
    pub cka_leftover: usize,
    /// `S_CKA` of the mean matrix over all batches of the set.
    pub s_cka_of_mean: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Writes every per-set output for an extraction.
pub(crate) fn write_set(
    layout: &Layout,
    cfg: &ViTConfig,
    set: &str,
    ex: &Extraction,
    mean_profile: &AttentionProfile,
    m_ref: &CkaMatrix,
) -> Result<SetSummary> {
    let sig_dir = layout.signatures_dir();
    let cka_dir = layout.cka_dir();
    fs::create_dir_all(&sig_dir)?;
    fs::create_dir_all(&cka_dir)?;

    let rows = ex
        .samples
        .iter()
        .map(|t| {
            Ok(SignatureRow {
                sample_id: t.id.clone(),
                attack: set.to_string(),
                fr: t.fr,
                ph: t.ph,
                ad: t.profile.flat(),
                s_ap: attention_profile_summary(&t.profile, mean_profile)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SignatureTable { heads: head_names(cfg), rows };
    fs::write(sig_dir.join(format!("{set}.csv")), table.to_csv())?;

    let mut post = String::from("sample_id,label");
    for k in 0..cfg.num_classes {
        write!(post, ",p{k}").unwrap();
    }
    post.push('\n');
    for t in &ex.samples {
        write!(post, "{},{}", t.id, t.label).unwrap();
        for p in &t.posterior {
            write!(post, ",{p}").unwrap();
        }
        post.push('\n');
    }
    fs::write(sig_dir.join(format!("{set}_posteriors.csv")), post)?;

    let taps = tap_names(cfg);
    let mut cka_rows = Vec::with_capacity(ex.batches.len());
    for (i, (ids, matrix)) in ex.batches.iter().enumerate() {
        let d = cka_difference_summary(m_ref, std::slice::from_ref(matrix))?;
        cka_rows.push(CkaRow {
            batch: i,
            samples: ids.clone(),
            s_cka: d.s_cka,
            layer_sums: d.layer_sums(),
        });
    }
    fs::write(cka_dir.join(format!("{set}.csv")), cka_csv(&taps, &cka_rows))?;
    let matrices: Vec<CkaMatrix> = ex.batches.iter().map(|(_, c)| c.clone()).collect();
    let s_cka_of_mean = if matrices.is_empty() {
        0.0
    } else {
        let d = cka_difference_summary(m_ref, &matrices)?;
        let meta = MatrixMeta {
            m: m_ref.batch_size,
            taps,
            batches: ex.batches.iter().map(|(ids, _)| ids.clone()).collect(),
            undefined: d.excluded.clone(),
            s_cka: Some(d.s_cka),
        };
        write_matrix(&cka_dir.join(format!("{set}_d")), &d.to_tensor(), &meta)?;
        d.s_cka
    };

    let correct = ex.samples.iter().filter(|t| t.prediction == t.label).count();
    let summary = SetSummary {
        set: set.to_string(),
        count: ex.samples.len(),
        correct,
        accuracy: correct as f64 / ex.samples.len().max(1) as f64,
        mean_fr: mean(table.rows.iter().map(|r| r.fr)),
        mean_ph: mean(table.rows.iter().map(|r| r.ph)),
        mean_s_ap: mean(table.rows.iter().map(|r| r.s_ap)),
        cka_batches: ex.batches.len(),
        cka_leftover: ex.leftover,
        s_cka_of_mean,
    };
    write_json(&sig_dir.join(format!("{set}.json")), &summary)?;
    Ok(summary)
}
