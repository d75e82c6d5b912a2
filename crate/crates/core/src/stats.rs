//! Histograms, the Bhattacharyya coefficient and per-unit refinement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no values")]
    Empty,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("bin edges must be strictly increasing with at least one bin")]
    BadEdges,
    #[error("histograms have different bin edges")]
    EdgeMismatch,
    #[error("refinement needs at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("unit {unit}: {reason}")]
    Unit { unit: String, reason: String },
}

/// Bin edges shared by the sets being compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
    /// Every pooled value was identical; a single unit-width bin is used.
    pub degenerate: bool,
}

impl BinEdges {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin `[e_i, e_{i+1})`; the last bin also takes its right edge.
    pub fn locate(&self, v: f64) -> Result<usize, StatsError> {
        if !v.is_finite() {
            return Err(StatsError::NonFinite(v));
        }
        let (lo, hi) = (self.edges[0], *self.edges.last().unwrap());
        if v < lo || v > hi {
            return Err(StatsError::OutOfRange { value: v, lo, hi });
        }
        let i = self.edges.partition_point(|&e| e <= v);
        Ok(i.saturating_sub(1).min(self.bins() - 1))
    }
}

/// `bins` equal-width bins over the pooled min/max of all sets.
pub fn shared_edges(sets: &[&[f64]], bins: usize) -> Result<BinEdges, StatsError> {
    if bins == 0 {
        return Err(StatsError::BadEdges);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for &v in sets.iter().flat_map(|s| s.iter()) {
        if !v.is_finite() {
            return Err(StatsError::NonFinite(v));
        }
        lo = lo.min(v);
        hi = hi.max(v);
        any = true;
    }
    if !any {
        return Err(StatsError::Empty);
    }
    if lo == hi {
        return Ok(BinEdges { edges: vec![lo - 0.5, lo + 0.5], degenerate: true });
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StatsError::BadEdges);
    }
    Ok(BinEdges { edges, degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: BinEdges,
    pub counts: Vec<usize>,
    /// Counts divided by the number of values.
    pub mass: Vec<f64>,
}

pub fn histogram(values: &[f64], edges: &BinEdges) -> Result<Histogram, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if edges.edges.len() < 2 || edges.edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StatsError::BadEdges);
    }
    let mut counts = vec![0usize; edges.bins()];
    for &v in values {
        counts[edges.locate(v)?] += 1;
    }
    let n = values.len() as f64;
    let mass = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(Histogram { edges: edges.clone(), counts, mass })
}

/// `Σ_i sqrt(h_i h'_i)` over identically binned histograms.
pub fn bhattacharyya(h: &Histogram, g: &Histogram) -> Result<f64, StatsError> {
    if h.edges.edges != g.edges.edges {
        return Err(StatsError::EdgeMismatch);
    }
    Ok(h.mass.iter().zip(&g.mass).map(|(a, b)| (a * b).sqrt()).sum())
}

/// Both histograms of one comparison and their coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub clean: Histogram,
    pub attacked: Histogram,
    pub bc: f64,
}

impl Comparison {
    pub fn new(clean: &[f64], attacked: &[f64], bins: usize) -> Result<Self, StatsError> {
        let edges = shared_edges(&[clean, attacked], bins)?;
        let clean = histogram(clean, &edges)?;
        let attacked = histogram(attacked, &edges)?;
        let bc = bhattacharyya(&clean, &attacked)?;
        Ok(Comparison { clean, attacked, bc })
    }

    /// `bin_left,bin_right,clean_density,attacked_density` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,clean_density,attacked_density\n");
        let e = &self.clean.edges.edges;
        for i in 0..self.clean.mass.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e[i], e[i + 1], self.clean.mass[i], self.attacked.mass[i]
            ));
        }
        out
    }
}

/// How the best unit is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    /// Select and report on the full sets.
    CherryPick,
    /// Select on even-indexed values, report on odd-indexed ones.
    HeldOut,
}

/// Values of one candidate unit (a head, a layer, or the summary itself)
/// over the clean and the attacked set.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitValues {
    pub name: String,
    pub clean: Vec<f64>,
    pub attacked: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitBc {
    pub unit: String,
    pub bc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub mode: RefineMode,
    /// BC of every unit on the selection split, units first, summary last.
    pub scanned: Vec<UnitBc>,
    /// Lowest-BC individual unit on the selection split.
    pub best_unit: String,
    /// Candidate with the lowest selection BC, possibly the summary.
    pub selected: String,
    /// BC of `selected` on the evaluation split.
    pub bc: f64,
    /// Summary BC on the evaluation split.
    pub summary_bc: f64,
    /// `summary_bc − bc`.
    pub improvement: f64,
}

fn parity(values: &[f64], odd: bool) -> Vec<f64> {
    values.iter().skip(usize::from(odd)).step_by(2).copied().collect()
}

fn unit_bc(u: &UnitValues, mode: RefineMode, bins: usize, evaluation: bool) -> Result<f64, StatsError> {
    let (c, a) = match mode {
        RefineMode::CherryPick => (u.clean.clone(), u.attacked.clone()),
        RefineMode::HeldOut => (parity(&u.clean, evaluation), parity(&u.attacked, evaluation)),
    };
    Comparison::new(&c, &a, bins)
        .map(|cmp| cmp.bc)
        .map_err(|e| StatsError::Unit { unit: u.name.clone(), reason: e.to_string() })
}

/// Scans the units and the summary, picks the candidate with the lowest BC
/// (earliest wins ties) and reports its BC next to the summary's.
pub fn refine_best_unit(
    units: &[UnitValues],
    summary: &UnitValues,
    mode: RefineMode,
    bins: usize,
) -> Result<Refinement, StatsError> {
    if units.len() < 2 {
        return Err(StatsError::TooFewUnits(units.len()));
    }
    let mut scanned = Vec::with_capacity(units.len() + 1);
    for u in units.iter().chain(std::iter::once(summary)) {
        scanned.push(UnitBc { unit: u.name.clone(), bc: unit_bc(u, mode, bins, false)? });
    }
    let argmin = |s: &[UnitBc]| {
        s.iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.bc < s[best].bc { i } else { best })
    };
    let best_unit = argmin(&scanned[..units.len()]);
    let selected = argmin(&scanned);
    let (bc, summary_bc) = match mode {
        RefineMode::CherryPick => (scanned[selected].bc, scanned[units.len()].bc),
        RefineMode::HeldOut => {
            let chosen = units.get(selected).unwrap_or(summary);
            (unit_bc(chosen, mode, bins, true)?, unit_bc(summary, mode, bins, true)?)
        }
    };
    Ok(Refinement {
        mode,
        best_unit: scanned[best_unit].unit.clone(),
        selected: scanned[selected].unit.clone(),
        scanned,
        bc,
        summary_bc,
        improvement: summary_bc - bc,
    })
}

/// Separability of one signature under one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub signature: String,
    pub attack: String,
    pub bc: f64,
    pub clean_count: usize,
    pub attacked_count: usize,
    pub clean_mean: f64,
    pub attacked_mean: f64,
    pub degenerate: bool,
    pub refinement: Vec<Refinement>,
}
