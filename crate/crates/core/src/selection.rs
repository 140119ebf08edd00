//! Model selection by peak voltage.
//!
//! A [`SelectionPlan`] maps half-open peak-voltage intervals `[lo, hi)` to a
//! reconstruction model. Plans are either the fixed four-interval default or
//! derived from a [`DeviationTable`]: per peak-voltage bin, the candidate with
//! the lowest mean absolute energy deviation from the trapezoid reference wins.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{reconstruct, ModelKind, ModelSpec};
use crate::pipeline::{analyze, AnalysisOptions, Calibration, MethodConfig};
use crate::sampler::{Sampler, ThresholdSet};
use crate::waveform::{integrate, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub lo: f64,
    /// Exclusive upper bound; `None` for the open-ended last interval.
    pub hi: Option<f64>,
    pub model: ModelSpec,
}

impl PlanEntry {
    fn contains(&self, v: f64) -> bool {
        v >= self.lo && self.hi.is_none_or(|hi| v < hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanDoc", into = "PlanDoc")]
pub struct SelectionPlan {
    entries: Vec<PlanEntry>,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    intervals: Vec<PlanEntry>,
}

impl TryFrom<PlanDoc> for SelectionPlan {
    type Error = Error;

    fn try_from(doc: PlanDoc) -> Result<Self> {
        Self::new(doc.intervals)
    }
}

impl From<SelectionPlan> for PlanDoc {
    fn from(plan: SelectionPlan) -> Self {
        PlanDoc {
            intervals: plan.entries,
        }
    }
}

impl SelectionPlan {
    pub fn new(entries: Vec<PlanEntry>) -> Result<Self> {
        let Some(last) = entries.last() else {
            return Err(Error::Plan("plan has no intervals".into()));
        };
        if last.hi.is_some() {
            return Err(Error::Plan("last interval must be open-ended".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if !e.lo.is_finite() {
                return Err(Error::Plan(format!(
                    "interval {i} has non-finite lower bound"
                )));
            }
            if i + 1 < entries.len() {
                let next = &entries[i + 1];
                match e.hi {
                    Some(hi) if hi == next.lo && hi > e.lo => {}
                    _ => {
                        return Err(Error::Plan(format!(
                            "interval {i} [{}, {:?}) does not abut interval {} at {}",
                            e.lo,
                            e.hi,
                            i + 1,
                            next.lo
                        )))
                    }
                }
            }
        }
        Ok(Self { entries })
    }

    /// A single model for every peak voltage from `lo` upward.
    pub fn uniform(lo: f64, model: ModelSpec) -> Self {
        Self {
            entries: vec![PlanEntry {
                lo,
                hi: None,
                model,
            }],
        }
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn lowest_bound(&self) -> f64 {
        self.entries[0].lo
    }

    pub fn select(&self, peak_v: f64) -> Result<ModelSpec> {
        self.entries
            .iter()
            .find(|e| e.contains(peak_v))
            .map(|e| e.model)
            .ok_or_else(|| {
                Error::Selection(format!(
                    "peak voltage {peak_v} mV is below the plan's lowest bound {} mV",
                    self.lowest_bound()
                ))
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn select_model(plan: &SelectionPlan, peak_v: f64) -> Result<ModelSpec> {
    plan.select(peak_v)
}

/// The four-threshold plan: breakpoints at 40, 50, 130 and 155 mV.
pub fn default_plan() -> SelectionPlan {
    use ModelKind::*;
    let e = |lo: f64, hi: Option<f64>, kind, peak_in_fit| PlanEntry {
        lo,
        hi,
        model: ModelSpec::new(kind, peak_in_fit),
    };
    SelectionPlan {
        entries: vec![
            e(40.0, Some(50.0), BiExpTrianglePeak, true),
            e(50.0, Some(130.0), LineExpTrianglePeak, false),
            e(130.0, Some(155.0), BiExpTrianglePeak, true),
            e(155.0, None, LineExp, true),
        ],
    }
}

/// All four kinds, with and without the peak in the fit.
pub fn all_candidates() -> Vec<ModelSpec> {
    ModelKind::ALL
        .into_iter()
        .flat_map(|k| [ModelSpec::new(k, false), ModelSpec::new(k, true)])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeviationBins {
    /// Uniform bins of this width from the highest threshold to the largest peak.
    Auto {
        width: f64,
    },
    Edges(Vec<f64>),
}

impl Default for DeviationBins {
    fn default() -> Self {
        DeviationBins::Auto { width: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviationCell {
    pub n: usize,
    pub failures: usize,
    /// Mean of `(E_model - E_ref) / E_ref * 100`.
    pub mean_signed: Option<f64>,
    pub mean_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTable {
    pub edges: Vec<f64>,
    pub candidates: Vec<ModelSpec>,
    /// Pulses per bin.
    pub populations: Vec<usize>,
    /// `cells[bin][candidate]`
    pub cells: Vec<Vec<DeviationCell>>,
    /// Pulses the sampler rejected.
    pub rejected: usize,
    /// Accepted pulses whose peak falls outside the bins.
    pub out_of_range: usize,
}

impl DeviationTable {
    pub fn n_bins(&self) -> usize {
        self.populations.len()
    }

    pub fn is_empty_bin(&self, bin: usize) -> bool {
        self.populations[bin] == 0
    }

    pub fn bin_range(&self, bin: usize) -> (f64, f64) {
        (self.edges[bin], self.edges[bin + 1])
    }

    /// Candidate index with the lowest mean absolute deviation; ties go to the earlier one.
    pub fn winner(&self, bin: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, cell) in self.cells[bin].iter().enumerate() {
            if let Some(m) = cell.mean_abs {
                if best.is_none_or(|(_, b)| m < b) {
                    best = Some((j, m));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    /// One row per bin; per candidate: signed mean, absolute mean, successes, failures.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,population");
        for c in &self.candidates {
            let l = c.label();
            let _ = write!(out, ",{l}_mean_signed,{l}_mean_abs,{l}_n,{l}_failed");
        }
        out.push('\n');
        for b in 0..self.n_bins() {
            let (lo, hi) = self.bin_range(b);
            let _ = write!(out, "{lo},{hi},{}", self.populations[b]);
            for cell in &self.cells[b] {
                let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                let _ = write!(
                    out,
                    ",{},{},{},{}",
                    f(cell.mean_signed),
                    f(cell.mean_abs),
                    cell.n,
                    cell.failures
                );
            }
            out.push('\n');
        }
        out
    }
}

fn auto_edges(lo: f64, max_peak: f64, width: f64) -> Vec<f64> {
    let n = (((max_peak - lo) / width).floor() as usize + 1).max(1);
    (0..=n).map(|i| lo + width * i as f64).collect()
}

/// Per-pulse, per-candidate relative energy deviation against the trapezoid area,
/// aggregated by peak-voltage bin.
pub fn deviation_analysis(
    pulses: &[Waveform],
    th: &ThresholdSet,
    candidates: &[ModelSpec],
    bins: &DeviationBins,
    sampler: &Sampler,
) -> Result<DeviationTable> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no candidate models".into()));
    }
    let batch = sampler.digitize_batch(pulses, th, true);
    let by_id: std::collections::HashMap<u64, &Waveform> =
        pulses.iter().map(|w| (w.id(), w)).collect();

    let edges = match bins {
        DeviationBins::Edges(edges) => {
            if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidParameter(
                    "bin edges must be strictly increasing with at least 2 entries".into(),
                ));
            }
            edges.clone()
        }
        DeviationBins::Auto { width } => {
            if !(*width > 0.0) {
                return Err(Error::InvalidParameter("bin width must be positive".into()));
            }
            let max_peak = batch
                .pulses
                .iter()
                .filter_map(|d| d.peak.map(|p| p.v9))
                .fold(th.highest(), f64::max);
            auto_edges(th.highest(), max_peak, *width)
        }
    };
    let n_bins = edges.len() - 1;

    // (bin, per-candidate deviation or failure) per accepted pulse
    let rows: Vec<Option<(usize, Vec<Option<f64>>)>> = batch
        .pulses
        .par_iter()
        .map(|d| {
            let v9 = d.peak.expect("digitized with peak").v9;
            let bin = edges.partition_point(|&e| e <= v9);
            if bin == 0 || bin > n_bins {
                return None;
            }
            let e_ref = integrate(by_id[&d.id]);
            let devs = candidates
                .iter()
                .map(|&spec| {
                    reconstruct(d, spec)
                        .ok()
                        .map(|fit| (fit.energy - e_ref) / e_ref * 100.0)
                        .filter(|v| v.is_finite())
                })
                .collect();
            Some((bin - 1, devs))
        })
        .collect();

    let mut populations = vec![0usize; n_bins];
    let mut sums = vec![vec![(0usize, 0usize, 0.0f64, 0.0f64); candidates.len()]; n_bins];
    let mut out_of_range = 0;
    for row in rows {
        let Some((bin, devs)) = row else {
            out_of_range += 1;
            continue;
        };
        populations[bin] += 1;
        for (acc, dev) in sums[bin].iter_mut().zip(devs) {
            match dev {
                Some(d) => {
                    acc.0 += 1;
                    acc.2 += d;
                    acc.3 += d.abs();
                }
                None => acc.1 += 1,
            }
        }
    }
    let cells = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(n, failures, s, a)| DeviationCell {
                    n,
                    failures,
                    mean_signed: (n > 0).then(|| s / n as f64),
                    mean_abs: (n > 0).then(|| a / n as f64),
                })
                .collect()
        })
        .collect();

    Ok(DeviationTable {
        edges,
        candidates: candidates.to_vec(),
        populations,
        cells,
        rejected: batch.rejections.len(),
        out_of_range,
    })
}

/// Picks each bin's winner and merges runs of equal winners.
///
/// Empty bins take the winner of the preceding populated bin (or the next one
/// when they lead the table).
pub fn derive_plan(table: &DeviationTable) -> Result<SelectionPlan> {
    let mut winners: Vec<Option<ModelSpec>> = Vec::with_capacity(table.n_bins());
    for b in 0..table.n_bins() {
        if table.is_empty_bin(b) {
            winners.push(None);
            continue;
        }
        match table.winner(b) {
            Some(j) => winners.push(Some(table.candidates[j])),
            None => {
                let (lo, hi) = table.bin_range(b);
                return Err(Error::Plan(format!(
                    "every candidate failed in bin [{lo}, {hi}) mV"
                )));
            }
        }
    }
    let Some(first) = winners.iter().flatten().next().copied() else {
        return Err(Error::Plan("deviation table has no populated bins".into()));
    };
    let mut current = first;
    let filled: Vec<ModelSpec> = winners
        .into_iter()
        .map(|w| {
            if let Some(w) = w {
                current = w;
            }
            current
        })
        .collect();

    let mut entries: Vec<PlanEntry> = Vec::new();
    for (b, model) in filled.into_iter().enumerate() {
        let lo = table.edges[b];
        match entries.last_mut() {
            Some(last) if last.model == model => {}
            Some(last) => {
                last.hi = Some(lo);
                entries.push(PlanEntry {
                    lo,
                    hi: None,
                    model,
                });
            }
            None => entries.push(PlanEntry {
                lo,
                hi: None,
                model,
            }),
        }
    }
    SelectionPlan::new(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GridCell {
    /// Not evaluated because V2 >= V3.
    Skipped,
    Failed {
        message: String,
    },
    Evaluated {
        resolution_pct: f64,
    },
}

impl GridCell {
    pub fn resolution(&self) -> Option<f64> {
        match self {
            GridCell::Evaluated { resolution_pct } => Some(*resolution_pct),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub v1: f64,
    pub v4: f64,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    /// `cells[i][j]` for `v2[i]`, `v3[j]`.
    pub cells: Vec<Vec<GridCell>>,
    /// Row-major first minimum, as `(i, j)`.
    pub best: Option<(usize, usize)>,
}

impl ThresholdGrid {
    pub fn best_thresholds(&self) -> Option<[f64; 4]> {
        self.best
            .map(|(i, j)| [self.v1, self.v2[i], self.v3[j], self.v4])
    }

    /// Rows are V2, columns V3. Skipped cells are blank, failed cells read `fail`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v2\\v3");
        for v in &self.v3 {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "{}", self.v2[i]);
            for cell in row {
                match cell {
                    GridCell::Skipped => out.push(','),
                    GridCell::Failed { .. } => out.push_str(",fail"),
                    GridCell::Evaluated { resolution_pct } => {
                        let _ = write!(out, ",{resolution_pct}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Full-pipeline energy resolution for every `v1 < v2 < v3 < v4` cell.
///
/// `template` supplies the reconstruction; its thresholds are replaced per cell.
#[allow(clippy::too_many_arguments)]
pub fn optimize_thresholds(
    pulses: &[Waveform],
    v1: f64,
    v4: f64,
    v2_candidates: &[f64],
    v3_candidates: &[f64],
    template: &MethodConfig,
    calibration: &Calibration,
    options: &AnalysisOptions,
) -> Result<ThresholdGrid> {
    if let Some(v) = v2_candidates
        .iter()
        .chain(v3_candidates)
        .find(|&&v| !(v > v1 && v < v4))
    {
        return Err(Error::InvalidParameter(format!(
            "candidate {v} mV is not strictly between V1={v1} and V4={v4}"
        )));
    }
    let coords: Vec<(usize, usize)> = (0..v2_candidates.len())
        .flat_map(|i| (0..v3_candidates.len()).map(move |j| (i, j)))
        .collect();
    let flat: Vec<GridCell> = coords
        .par_iter()
        .map(|&(i, j)| {
            let (v2, v3) = (v2_candidates[i], v3_candidates[j]);
            if v2 >= v3 {
                return GridCell::Skipped;
            }
            let th = match ThresholdSet::new(vec![v1, v2, v3, v4]) {
                Ok(th) => th,
                Err(e) => {
                    return GridCell::Failed {
                        message: e.to_string(),
                    }
                }
            };
            let config = template.with_thresholds(th);
            match analyze(pulses, &config, calibration, options) {
                Ok(a) => match a.report {
                    Some(r) => GridCell::Evaluated {
                        resolution_pct: r.resolution_pct,
                    },
                    None => GridCell::Failed {
                        message: a.error.unwrap_or_default(),
                    },
                },
                Err(e) => GridCell::Failed {
                    message: e.to_string(),
                },
            }
        })
        .collect();

    let mut cells = vec![Vec::with_capacity(v3_candidates.len()); v2_candidates.len()];
    let mut best: Option<((usize, usize), f64)> = None;
    for (&(i, j), cell) in coords.iter().zip(flat) {
        if let Some(r) = cell.resolution() {
            if best.is_none_or(|(_, b)| r < b) {
                best = Some(((i, j), r));
            }
        }
        cells[i].push(cell);
    }
    Ok(ThresholdGrid {
        v1,
        v4,
        v2: v2_candidates.to_vec(),
        v3: v3_candidates.to_vec(),
        cells,
        best: best.map(|(ij, _)| ij),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ModelKind::*;

    #[test]
    fn default_plan_lookups() {
        let plan = default_plan();
        assert_eq!(
            plan.select(45.0).unwrap(),
            ModelSpec::new(BiExpTrianglePeak, true)
        );
        assert_eq!(
            plan.select(100.0).unwrap(),
            ModelSpec::new(LineExpTrianglePeak, false)
        );
        assert_eq!(
            plan.select(140.0).unwrap(),
            ModelSpec::new(BiExpTrianglePeak, true)
        );
        assert_eq!(plan.select(200.0).unwrap(), ModelSpec::new(LineExp, true));
    }

    #[test]
    fn default_plan_boundaries_are_half_open() {
        let plan = default_plan();
        assert_eq!(plan.select(40.0).unwrap().kind, BiExpTrianglePeak);
        assert_eq!(plan.select(50.0).unwrap().kind, LineExpTrianglePeak);
        assert_eq!(plan.select(130.0).unwrap().kind, BiExpTrianglePeak);
        assert_eq!(plan.select(155.0).unwrap().kind, LineExp);
        assert_eq!(plan.select(1e9).unwrap().kind, LineExp);
        assert!(matches!(plan.select(39.999), Err(Error::Selection(_))));
    }

    #[test]
    fn default_plan_is_contiguous() {
        let plan = default_plan();
        assert!(SelectionPlan::new(plan.entries().to_vec()).is_ok());
        assert_eq!(plan.lowest_bound(), 40.0);
    }

    #[test]
    fn plan_validation() {
        let m = ModelSpec::new(LineExp, true);
        let gap = vec![
            PlanEntry {
                lo: 40.0,
                hi: Some(50.0),
                model: m,
            },
            PlanEntry {
                lo: 60.0,
                hi: None,
                model: m,
            },
        ];
        assert!(SelectionPlan::new(gap).is_err());
        let closed = vec![PlanEntry {
            lo: 40.0,
            hi: Some(50.0),
            model: m,
        }];
        assert!(SelectionPlan::new(closed).is_err());
        assert!(SelectionPlan::new(vec![]).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = default_plan();
        let json = plan.to_json().unwrap();
        assert!(json.contains("\"hi\": null"));
        assert_eq!(SelectionPlan::from_json(&json).unwrap(), plan);
        let bad =
            r#"{"intervals":[{"lo":40,"hi":50,"model":{"kind":"line_exp","peak_in_fit":true}}]}"#;
        assert!(SelectionPlan::from_json(bad).is_err());
    }

    fn table(
        edges: Vec<f64>,
        populations: Vec<usize>,
        abs: Vec<Vec<Option<f64>>>,
    ) -> DeviationTable {
        let candidates = vec![ModelSpec::new(BiExp, false), ModelSpec::new(LineExp, false)];
        let cells = abs
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|m| DeviationCell {
                        n: m.map_or(0, |_| 1),
                        failures: m.map_or(1, |_| 0),
                        mean_signed: m,
                        mean_abs: m,
                    })
                    .collect()
            })
            .collect();
        DeviationTable {
            edges,
            candidates,
            populations,
            cells,
            rejected: 0,
            out_of_range: 0,
        }
    }

    #[test]
    fn single_winner_gives_single_interval() {
        let t = table(
            vec![40.0, 45.0, 50.0, 55.0],
            vec![3, 3, 3],
            vec![
                vec![Some(0.5), Some(2.0)],
                vec![Some(0.4), Some(1.0)],
                vec![Some(0.1), Some(3.0)],
            ],
        );
        let plan = derive_plan(&t).unwrap();
        assert_eq!(plan.entries().len(), 1);
        assert_eq!(plan.entries()[0].lo, 40.0);
        assert_eq!(plan.entries()[0].model.kind, BiExp);
    }

    #[test]
    fn alternating_winners_give_one_interval_per_bin() {
        let t = table(
            vec![40.0, 45.0, 50.0, 55.0],
            vec![1, 1, 1],
            vec![
                vec![Some(0.5), Some(2.0)],
                vec![Some(3.0), Some(1.0)],
                vec![Some(0.1), Some(3.0)],
            ],
        );
        let plan = derive_plan(&t).unwrap();
        let e = plan.entries();
        assert_eq!(e.len(), 3);
        assert_eq!((e[0].lo, e[0].hi), (40.0, Some(45.0)));
        assert_eq!((e[1].lo, e[1].hi), (45.0, Some(50.0)));
        assert_eq!((e[2].lo, e[2].hi), (50.0, None));
        assert_eq!(e[1].model.kind, LineExp);
    }

    #[test]
    fn all_failed_bin_is_a_plan_error() {
        let t = table(
            vec![40.0, 45.0, 50.0],
            vec![1, 2],
            vec![vec![Some(0.5), Some(2.0)], vec![None, None]],
        );
        let err = derive_plan(&t).unwrap_err();
        assert!(err.to_string().contains("[45, 50)"), "{err}");
    }

    #[test]
    fn empty_bins_inherit() {
        let t = table(
            vec![40.0, 45.0, 50.0, 55.0],
            vec![0, 2, 0],
            vec![
                vec![None, None],
                vec![Some(3.0), Some(1.0)],
                vec![None, None],
            ],
        );
        let plan = derive_plan(&t).unwrap();
        assert_eq!(plan.entries().len(), 1);
        assert_eq!(plan.entries()[0].model.kind, LineExp);
        assert!(t.is_empty_bin(0) && t.is_empty_bin(2));
    }

    #[test]
    fn winner_ties_go_first() {
        let t = table(vec![40.0, 45.0], vec![1], vec![vec![Some(1.0), Some(1.0)]]);
        assert_eq!(t.winner(0), Some(0));
    }

    #[test]
    fn eight_candidates() {
        let c = all_candidates();
        assert_eq!(c.len(), 8);
        let unique: std::collections::BTreeSet<_> = c.iter().collect();
        assert_eq!(unique.len(), 8);
    }
}
