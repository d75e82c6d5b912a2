use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::stats::{refine_best_unit, Comparison, RefineMode, SeparabilityReport, UnitValues};
use crate::vit::argmax;

use super::extract::{read_cka_rows, CkaRow, SetSummary, SignatureTable, CLEAN};
use super::stages::{attack_available, ReferenceProfile, TrainSummary, FAILED_FILE, MANIFEST_FILE};
use super::{parse_f64, read_csv, read_json, write_json, Layout, PipelineError, Result, RunConfig};

/// Signature summaries compared per attack, in report order.
pub const SIGNATURES: [&str; 4] = ["fr", "ph", "s_ap", "s_cka"];

struct SetValues {
    table: SignatureTable,
    cka: Vec<CkaRow>,
    taps: Vec<String>,
}

impl SetValues {
    fn load(layout: &Layout, set: &str) -> Result<Self> {
        let table = SignatureTable::read(&layout.signatures_dir().join(format!("{set}.csv")))?;
        let (taps, cka) = read_cka_rows(&layout.cka_dir().join(format!("{set}.csv")))?;
        Ok(SetValues { table, cka, taps })
    }

    fn summary(&self, signature: &str) -> Vec<f64> {
        match signature {
            "fr" => self.table.rows.iter().map(|r| r.fr).collect(),
            "ph" => self.table.rows.iter().map(|r| r.ph).collect(),
            "s_ap" => self.table.rows.iter().map(|r| r.s_ap).collect(),
            _ => self.cka.iter().map(|r| r.s_cka).collect(),
        }
    }

    /// Per-unit values whose sum is the summary: per-head absolute AD
    /// deviations for `s_ap`, per-layer difference row sums for `s_cka`.
    fn units(&self, signature: &str, reference: &ReferenceProfile) -> Vec<(String, Vec<f64>)> {
        match signature {
            "s_ap" => {
                let mean = reference.mean_attention.flat();
                self.table
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(k, h)| {
                        (h.clone(), self.table.rows.iter().map(|r| (r.ad[k] - mean[k]).abs()).collect())
                    })
                    .collect()
            }
            "s_cka" => self
                .taps
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), self.cka.iter().map(|r| r.layer_sums[i]).collect()))
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn compare_tag(
    cfg: &RunConfig,
    layout: &Layout,
    reference: &ReferenceProfile,
    clean: &SetValues,
    tag: &str,
) -> Result<()> {
    let attacked = SetValues::load(layout, tag)?;
    let dir = layout.compare_dir(tag);
    for sig in SIGNATURES {
        let (c, a) = (clean.summary(sig), attacked.summary(sig));
        let cmp = Comparison::new(&c, &a, cfg.bins)?;
        fs::write(dir.join(format!("{sig}_hist.csv")), cmp.to_csv())?;
        let clean_units = clean.units(sig, reference);
        let attacked_units = attacked.units(sig, reference);
        let mut refinement = Vec::new();
        if clean_units.len() >= 2 {
            let units: Vec<UnitValues> = clean_units
                .into_iter()
                .zip(attacked_units)
                .map(|((name, cv), (_, av))| UnitValues { name, clean: cv, attacked: av })
                .collect();
            let summary = UnitValues { name: sig.to_string(), clean: c.clone(), attacked: a.clone() };
            refinement.push(refine_best_unit(&units, &summary, RefineMode::CherryPick, cfg.bins)?);
            if c.len() >= 2 && a.len() >= 2 {
                refinement.push(refine_best_unit(&units, &summary, RefineMode::HeldOut, cfg.bins)?);
            }
        }
        let report = SeparabilityReport {
            signature: sig.to_string(),
            attack: tag.to_string(),
            bc: cmp.bc,
            clean_count: c.len(),
            attacked_count: a.len(),
            clean_mean: mean(&c),
            attacked_mean: mean(&a),
            degenerate: cmp.clean.edges.degenerate,
            refinement,
        };
        write_json(&dir.join(format!("{sig}.json")), &report)?;
    }
    Ok(())
}

/// Histograms, Bhattacharyya coefficients and refinements for every
/// extracted attack. A failing tag is recorded and skipped.
pub fn cmd_compare(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let reference = ReferenceProfile::load(layout)?;
    let clean = SetValues::load(layout, CLEAN)?;
    for spec in &cfg.attacks {
        let tag = spec.tag();
        let dir = layout.compare_dir(&tag);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        if !layout.signatures_dir().join(format!("{tag}.csv")).exists() {
            log::warn!("{tag}: no signatures, skipping");
            continue;
        }
        fs::create_dir_all(&dir)?;
        if let Err(e) = compare_tag(cfg, layout, &reference, &clean, &tag) {
            log::error!("{tag}: comparison failed: {e}");
            fs::write(dir.join(FAILED_FILE), format!("{e}\n"))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub tag: String,
    pub family: String,
    pub budget: f64,
    pub hyperparameters: String,
    /// `ok`, `failed` or `missing`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<SetSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_linf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_linf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub family: String,
    pub budget: f64,
    pub tag: String,
    pub bc: f64,
}

/// BC against budget within each family for one signature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureTrend {
    pub signature: String,
    pub points: Vec<TrendPoint>,
    /// Adjacent pairs within a family where BC rises with the budget.
    pub inversions: usize,
}

impl SignatureTrend {
    pub fn new(signature: &str, mut points: Vec<TrendPoint>) -> Self {
        points.sort_by(|a, b| a.family.cmp(&b.family).then(a.budget.total_cmp(&b.budget)));
        let inversions = points
            .windows(2)
            .filter(|w| w[0].family == w[1].family && w[1].bc > w[0].bc)
            .count();
        SignatureTrend { signature: signature.to_string(), points, inversions }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    pub clean: SetSummary,
    /// Clean accuracy recomputed from the persisted posteriors.
    pub clean_accuracy_from_posteriors: f64,
    pub attacks: Vec<AttackRow>,
    /// Absent when the attack grid is empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separability: Option<Vec<SeparabilityReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trends: Option<Vec<SignatureTrend>>,
}

/// Top-1 accuracy from a `<set>_posteriors.csv` file.
pub fn accuracy_from_posteriors(path: &Path) -> Result<(usize, usize)> {
    let (_, rows) = read_csv(path)?;
    let mut correct = 0;
    for r in &rows {
        let label: usize = r[1]
            .parse()
            .map_err(|_| PipelineError::Data(format!("{}: bad label", path.display())))?;
        let p = r[2..].iter().map(|v| parse_f64(v, path)).collect::<Result<Vec<_>>>()?;
        correct += usize::from(argmax(&p) == label);
    }
    Ok((correct, rows.len()))
}

fn checked_summary(layout: &Layout, set: &str) -> Result<(SetSummary, f64)> {
    let sig = layout.signatures_dir();
    let summary: SetSummary = read_json(&sig.join(format!("{set}.json")))?;
    let (correct, n) = accuracy_from_posteriors(&sig.join(format!("{set}_posteriors.csv")))?;
    if correct != summary.correct || n != summary.count {
        return Err(PipelineError::Numeric(format!(
            "{set}: posteriors give {correct}/{n} correct, summary says {}/{}",
            summary.correct, summary.count
        )));
    }
    Ok((summary, correct as f64 / n.max(1) as f64))
}

fn attack_row(layout: &Layout, spec: &AttackSpec, clean_accuracy: f64) -> Result<AttackRow> {
    let tag = spec.tag();
    let mut row = AttackRow {
        tag: tag.clone(),
        family: spec.family().into(),
        budget: spec.budget(),
        hyperparameters: spec.hyperparameters(),
        status: "missing".into(),
        summary: None,
        accuracy_drop: None,
        success_rate: None,
        mean_linf: None,
        max_linf: None,
        mean_l2: None,
    };
    if layout.attack_dir(&tag).join(FAILED_FILE).exists() {
        row.status = "failed".into();
        return Ok(row);
    }
    if !attack_available(layout, &tag)
        || !layout.signatures_dir().join(format!("{tag}.json")).exists()
    {
        return Ok(row);
    }
    let manifest = layout.attack_dir(&tag).join(MANIFEST_FILE);
    let (_, rows) = read_csv(&manifest)?;
    let n = rows.len().max(1) as f64;
    let mut success = 0usize;
    let (mut linf_sum, mut linf_max, mut l2_sum) = (0.0, 0.0f64, 0.0);
    for r in &rows {
        success += usize::from(r[4] == "1");
        let linf = parse_f64(&r[7], &manifest)?;
        linf_sum += linf;
        linf_max = linf_max.max(linf);
        l2_sum += parse_f64(&r[8], &manifest)?;
    }
    let (summary, acc) = checked_summary(layout, &tag)?;
    row.status = "ok".into();
    row.summary = Some(summary);
    row.accuracy_drop = Some(clean_accuracy - acc);
    row.success_rate = Some(success as f64 / n);
    row.mean_linf = Some(linf_sum / n);
    row.max_linf = Some(linf_max);
    row.mean_l2 = Some(l2_sum / n);
    Ok(row)
}

/// Collects everything into `report/`, checks that persisted posteriors
/// reproduce the stored accuracies, and returns the report.
pub fn cmd_report(cfg: &RunConfig, layout: &Layout) -> Result<Report> {
    let train_file = layout.model_dir().join("train.json");
    let train = if train_file.exists() { Some(read_json(&train_file)?) } else { None };
    let (clean, clean_acc) = checked_summary(layout, CLEAN)?;
    let attacks = cfg
        .attacks
        .iter()
        .map(|s| attack_row(layout, s, clean_acc))
        .collect::<Result<Vec<_>>>()?;

    let (separability, trends) = if cfg.attacks.is_empty() {
        (None, None)
    } else {
        let mut reports = Vec::new();
        for spec in &cfg.attacks {
            for sig in SIGNATURES {
                let p = layout.compare_dir(&spec.tag()).join(format!("{sig}.json"));
                if p.exists() {
                    reports.push(read_json::<SeparabilityReport>(&p)?);
                }
            }
        }
        let trends = SIGNATURES
            .iter()
            .map(|&sig| {
                let points = cfg
                    .attacks
                    .iter()
                    .filter_map(|spec| {
                        reports
                            .iter()
                            .find(|r| r.signature == sig && r.attack == spec.tag())
                            .map(|r| TrendPoint {
                                family: spec.family().into(),
                                budget: spec.budget(),
                                tag: spec.tag(),
                                bc: r.bc,
                            })
                    })
                    .collect();
                SignatureTrend::new(sig, points)
            })
            .collect();
        (Some(reports), Some(trends))
    };

    let report = Report {
        seed: cfg.seed,
        train,
        clean_accuracy_from_posteriors: clean_acc,
        clean,
        attacks,
        separability,
        trends,
    };
    let dir = layout.report_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(&report))?;
    if let Some(seps) = &report.separability {
        fs::write(dir.join("separability.csv"), separability_csv(seps))?;
    }
    log_report(&report);
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn accuracy_csv(r: &Report) -> String {
    let mut s = String::from(
        "set,family,budget,status,accuracy,accuracy_drop,success_rate,mean_linf,max_linf,mean_l2\n",
    );
    writeln!(s, "{CLEAN},,0,ok,{},0,,,,", r.clean.accuracy).unwrap();
    for a in &r.attacks {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            a.tag,
            a.family,
            a.budget,
            a.status,
            opt(a.summary.as_ref().map(|x| x.accuracy)),
            opt(a.accuracy_drop),
            opt(a.success_rate),
            opt(a.mean_linf),
            opt(a.max_linf),
            opt(a.mean_l2)
        )
        .unwrap();
    }
    s
}

fn separability_csv(reports: &[SeparabilityReport]) -> String {
    let mut s = String::from(
        "attack,signature,bc,clean_mean,attacked_mean,refined_bc,selected,best_unit,heldout_bc,heldout_summary_bc,heldout_selected\n",
    );
    for r in reports {
        let find = |m: RefineMode| r.refinement.iter().find(|x| x.mode == m);
        let cp = find(RefineMode::CherryPick);
        let ho = find(RefineMode::HeldOut);
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.attack,
            r.signature,
            r.bc,
            r.clean_mean,
            r.attacked_mean,
            opt(cp.map(|x| x.bc)),
            cp.map_or("", |x| x.selected.as_str()),
            cp.map_or("", |x| x.best_unit.as_str()),
            opt(ho.map(|x| x.bc)),
            opt(ho.map(|x| x.summary_bc)),
            ho.map_or("", |x| x.selected.as_str()),
        )
        .unwrap();
    }
    s
}

fn log_report(r: &Report) {
    log::info!("clean accuracy {:.3} on {} samples", r.clean.accuracy, r.clean.count);
    for a in &r.attacks {
        match &a.summary {
            Some(s) => log::info!(
                "{:<16} accuracy {:.3} success {:.3} mean l2 {:.4}",
                a.tag,
                s.accuracy,
                a.success_rate.unwrap_or(0.0),
                a.mean_l2.unwrap_or(0.0)
            ),
            None => log::info!("{:<16} {}", a.tag, a.status),
        }
    }
    for sep in r.separability.iter().flatten() {
        log::info!("{:<16} {:<6} BC {:.4}", sep.attack, sep.signature, sep.bc);
    }
}
