//! End-to-end runs: digitize, reconstruct, calibrate, histogram, fit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::SipmCurve;
use crate::error::{Error, RejectReason, Result};
use crate::models::{reconstruct, ModelKind, ModelSpec};
use crate::sampler::{Rejection, Sampler, ThresholdSet};
use crate::selection::{
    all_candidates, default_plan, derive_plan, deviation_analysis, DeviationBins, SelectionPlan,
};
use crate::spectrum::{
    count_in_window, fit_gaussian_xy, gaussian_fit, histogram, Binning, EnergySpectrum,
    ResolutionReport, DEFAULT_WINDOW,
};
use crate::waveform::{integrate, Waveform};

/// Photopeak energy the calibration anchors to, keV.
pub const PHOTOPEAK_KEV: f64 = 511.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reconstruction {
    /// Trapezoid area of the full trace.
    Reference,
    /// The same model for every pulse.
    Fixed { model: ModelSpec },
    /// Model chosen per pulse from its peak voltage.
    Adaptive { plan: SelectionPlan },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub label: String,
    pub thresholds: ThresholdSet,
    pub reconstruction: Reconstruction,
    /// Record the peak point while digitizing.
    pub with_peak: bool,
}

impl MethodConfig {
    /// Traditional MVT: bi-exponential fit to the crossings only.
    pub fn mvt(label: impl Into<String>, thresholds: ThresholdSet) -> Self {
        Self {
            label: label.into(),
            thresholds,
            reconstruction: Reconstruction::Fixed {
                model: ModelSpec::new(ModelKind::BiExp, false),
            },
            with_peak: false,
        }
    }

    pub fn ppmvt(label: impl Into<String>, thresholds: ThresholdSet, plan: SelectionPlan) -> Self {
        Self {
            label: label.into(),
            thresholds,
            reconstruction: Reconstruction::Adaptive { plan },
            with_peak: true,
        }
    }

    /// Trapezoid integration of the full trace, gated by the same thresholds.
    pub fn reference(label: impl Into<String>, thresholds: ThresholdSet) -> Self {
        Self {
            label: label.into(),
            thresholds,
            reconstruction: Reconstruction::Reference,
            with_peak: false,
        }
    }

    pub fn with_thresholds(&self, thresholds: ThresholdSet) -> Self {
        Self {
            thresholds,
            ..self.clone()
        }
    }

    pub fn with_label(&self, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_peak = match &self.reconstruction {
            Reconstruction::Reference => false,
            Reconstruction::Fixed { model } => model.needs_peak(),
            Reconstruction::Adaptive { .. } => true,
        };
        if needs_peak && !self.with_peak {
            return Err(Error::InvalidParameter(format!(
                "method '{}' needs the peak point but with_peak is off",
                self.label
            )));
        }
        Ok(())
    }
}

/// Raw (uncalibrated) energy of one pulse.
pub fn pulse_energy(
    w: &Waveform,
    config: &MethodConfig,
    sampler: &Sampler,
) -> std::result::Result<(f64, Option<ModelSpec>), RejectReason> {
    let d = sampler.digitize(w, &config.thresholds, config.with_peak)?;
    let spec = match &config.reconstruction {
        Reconstruction::Reference => return Ok((integrate(w), None)),
        Reconstruction::Fixed { model } => *model,
        Reconstruction::Adaptive { plan } => {
            let v9 = d.peak.map(|p| p.v9).unwrap_or(f64::NAN);
            plan.select(v9)
                .map_err(|_| RejectReason::OutsidePlan { peak_v: v9 })?
        }
    };
    let fit = reconstruct(&d, spec).map_err(|e| RejectReason::FitFailed {
        message: e.to_string(),
    })?;
    Ok((fit.energy, Some(spec)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PulseEnergy {
    pub id: u64,
    pub energy: f64,
    pub model: Option<ModelSpec>,
}

#[derive(Debug, Clone, Default)]
pub struct MethodRun {
    pub energies: Vec<PulseEnergy>,
    pub rejections: Vec<Rejection>,
}

/// Raw energies for every pulse, in input order.
pub fn run_method(
    pulses: &[Waveform],
    config: &MethodConfig,
    sampler: &Sampler,
) -> Result<MethodRun> {
    config.validate()?;
    let results: Vec<_> = pulses
        .par_iter()
        .map(|w| (w.id(), pulse_energy(w, config, sampler)))
        .collect();
    let mut run = MethodRun::default();
    for (id, r) in results {
        match r {
            Ok((energy, model)) => run.energies.push(PulseEnergy { id, energy, model }),
            Err(reason) => run.rejections.push(Rejection { id, reason }),
        }
    }
    Ok(run)
}

/// Maps raw energies to keV: a linear pre-scale puts the photopeak at the
/// target, then the optional SiPM curve is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub curve: Option<SipmCurve>,
    pub target_kev: f64,
    /// Fixed pre-scale; located from the photopeak when `None`.
    pub scale: Option<f64>,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            curve: None,
            target_kev: PHOTOPEAK_KEV,
            scale: None,
        }
    }
}

impl Calibration {
    pub fn uncorrected() -> Self {
        Self::default()
    }

    pub fn with_curve(curve: SipmCurve) -> Self {
        Self {
            curve: Some(curve),
            ..Self::default()
        }
    }

    /// Where the pre-scaled photopeak must land before the curve is inverted.
    pub fn measured_target(&self) -> f64 {
        match &self.curve {
            Some(c) => c.response(self.target_kev),
            None => self.target_kev,
        }
    }

    pub fn scale_for(&self, raw: &[f64]) -> Result<f64> {
        match self.scale {
            Some(k) if k.is_finite() && k > 0.0 => Ok(k),
            Some(k) => Err(Error::InvalidParameter(format!(
                "calibration scale {k} must be positive"
            ))),
            None => Ok(self.measured_target() / locate_photopeak(raw)?),
        }
    }

    pub fn to_kev(&self, scale: f64, raw: f64) -> std::result::Result<f64, RejectReason> {
        let m = scale * raw;
        match &self.curve {
            None => Ok(m),
            Some(c) => c.correct(m.max(0.0)).map_err(|_| RejectReason::Saturated),
        }
    }
}

/// Position of the dominant high-energy peak of a raw energy list.
///
/// A smoothed coarse histogram gives the starting point, which a Gaussian fit
/// over +-15% refines when it converges.
pub fn locate_photopeak(raw: &[f64]) -> Result<f64> {
    let mut vals: Vec<f64> = raw
        .iter()
        .copied()
        .filter(|v| v.is_finite() && *v > 0.0)
        .collect();
    if vals.len() < 10 {
        return Err(Error::Empty(format!(
            "{} usable energies, too few to locate the photopeak",
            vals.len()
        )));
    }
    vals.sort_by(f64::total_cmp);
    let top = vals[((vals.len() as f64 * 0.995) as usize).min(vals.len() - 1)] * 1.2;
    let n_bins = 240;
    let spec = histogram(&vals, 0.0, top, n_bins)?;
    let half = 3usize;
    let smooth: Vec<f64> = (0..n_bins)
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + half + 1).min(n_bins));
            spec.counts[a..b].iter().sum::<u64>() as f64 / (b - a) as f64
        })
        .collect();
    // the lowest tenth holds threshold-edge events, not the photopeak
    let skip = n_bins / 10;
    let imax = (skip..n_bins).fold(
        skip,
        |best, i| if smooth[i] > smooth[best] { i } else { best },
    );
    let coarse = spec.center(imax);

    let window = (0.85 * coarse, 1.15 * coarse);
    let fine = histogram(&vals, window.0, window.1, 60)?;
    let x: Vec<f64> = (0..fine.n_bins()).map(|i| fine.center(i)).collect();
    let y: Vec<f64> = fine.counts.iter().map(|&c| c as f64).collect();
    Ok(match fit_gaussian_xy(&x, &y, window) {
        Ok(g) => g.mu,
        Err(_) => coarse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub window: (f64, f64),
    pub binning: Binning,
    pub sampler: Sampler,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            binning: Binning::default(),
            sampler: Sampler::default(),
        }
    }
}

/// One method's run through the whole chain.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub label: String,
    pub thresholds: ThresholdSet,
    /// Raw-to-measured pre-scale.
    pub scale: f64,
    /// Calibrated energies, keV.
    pub energies: Vec<PulseEnergy>,
    pub rejections: Vec<Rejection>,
    pub spectrum: EnergySpectrum,
    pub count_in_window: u64,
    pub report: Option<ResolutionReport>,
    /// Why `report` is missing.
    pub error: Option<String>,
}

impl Analysis {
    pub fn accepted(&self) -> usize {
        self.energies.len()
    }

    pub fn kev(&self) -> Vec<f64> {
        self.energies.iter().map(|p| p.energy).collect()
    }

    pub fn rejection_summary(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rejections {
            *m.entry(r.reason.tag().to_string()).or_insert(0) += 1;
        }
        m
    }
}

/// Runs one method; a failed photopeak fit is recorded in the result, not returned.
pub fn analyze(
    pulses: &[Waveform],
    config: &MethodConfig,
    calibration: &Calibration,
    options: &AnalysisOptions,
) -> Result<Analysis> {
    let (w0, w1) = options.window;
    if !(w0 < w1) {
        return Err(Error::InvalidParameter(format!("bad window ({w0}, {w1})")));
    }
    let run = run_method(pulses, config, &options.sampler)?;
    let raw: Vec<f64> = run.energies.iter().map(|p| p.energy).collect();
    let mut rejections = run.rejections;
    let mut energies = Vec::with_capacity(raw.len());
    let mut error = None;

    let scale = match calibration.scale_for(&raw) {
        Ok(k) => k,
        Err(e) => {
            error = Some(e.to_string());
            f64::NAN
        }
    };
    if scale.is_finite() {
        for p in run.energies {
            match calibration.to_kev(scale, p.energy) {
                Ok(e) => energies.push(PulseEnergy { energy: e, ..p }),
                Err(reason) => rejections.push(Rejection { id: p.id, reason }),
            }
        }
    }
    let kev: Vec<f64> = energies.iter().map(|p| p.energy).collect();
    let b = options.binning;
    let spectrum = histogram(&kev, b.lo, b.hi, b.n_bins)?;
    let count = count_in_window(&kev, options.window);
    let report = if error.is_some() {
        None
    } else {
        match gaussian_fit(&spectrum, options.window) {
            Ok(fit) => Some(ResolutionReport::from_fit(
                &config.label,
                &fit,
                options.window,
                count,
            )),
            Err(e) => {
                error = Some(e.to_string());
                None
            }
        }
    };
    Ok(Analysis {
        label: config.label.clone(),
        thresholds: config.thresholds.clone(),
        scale,
        energies,
        rejections,
        spectrum,
        count_in_window: count,
        report,
        error,
    })
}

/// `(value - baseline) / baseline * 100`
pub fn relative_change_pct(value: f64, baseline: f64) -> f64 {
    (value - baseline) / baseline * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub thresholds: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub rejections: BTreeMap<String, usize>,
    pub count_in_window: u64,
    /// Window count relative to the baseline row, percent.
    pub count_change_pct: Option<f64>,
    pub report: Option<ResolutionReport>,
    pub error: Option<String>,
}

impl ComparisonRow {
    pub fn resolution_pct(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.resolution_pct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub window: (f64, f64),
    pub baseline: Option<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,thresholds,accepted,rejected,mu,sigma,fwhm,resolution_pct,count_in_window,count_change_pct,error\n",
        );
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let th: Vec<String> = r.thresholds.iter().map(|v| v.to_string()).collect();
            let rep = r.report.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.label),
                th.join(";"),
                r.accepted,
                r.rejected,
                f(rep.map(|x| x.mu)),
                f(rep.map(|x| x.sigma)),
                f(rep.map(|x| x.fwhm)),
                f(rep.map(|x| x.resolution_pct)),
                r.count_in_window,
                f(r.count_change_pct),
                csv_field(r.error.as_deref().unwrap_or("")),
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn row_from(a: &Analysis) -> ComparisonRow {
    ComparisonRow {
        label: a.label.clone(),
        thresholds: a.thresholds.levels().to_vec(),
        accepted: a.accepted(),
        rejected: a.rejections.len(),
        rejections: a.rejection_summary(),
        count_in_window: a.count_in_window,
        count_change_pct: None,
        report: a.report.clone(),
        error: a.error.clone(),
    }
}

/// Runs every config on the same pulses. Failures stay inside their row.
///
/// `baseline` names the row the count-change column is relative to.
pub fn compare_methods(
    pulses: &[Waveform],
    configs: &[MethodConfig],
    calibration: &Calibration,
    options: &AnalysisOptions,
    baseline: Option<&str>,
) -> Result<Comparison> {
    if configs.is_empty() {
        return Err(Error::InvalidParameter(
            "no method configs to compare".into(),
        ));
    }
    let results: Vec<Result<Analysis>> = configs
        .iter()
        .map(|c| analyze(pulses, c, calibration, options))
        .collect();
    Ok(assemble_comparison(
        configs,
        &results,
        options.window,
        baseline,
    ))
}

/// Builds the comparison table from per-config outcomes, in config order.
pub fn assemble_comparison(
    configs: &[MethodConfig],
    results: &[Result<Analysis>],
    window: (f64, f64),
    baseline: Option<&str>,
) -> Comparison {
    let mut rows: Vec<ComparisonRow> = configs
        .iter()
        .zip(results)
        .map(|(c, res)| match res {
            Ok(a) => row_from(a),
            Err(e) => ComparisonRow {
                label: c.label.clone(),
                thresholds: c.thresholds.levels().to_vec(),
                accepted: 0,
                rejected: 0,
                rejections: BTreeMap::new(),
                count_in_window: 0,
                count_change_pct: None,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let base = baseline.and_then(|b| {
        rows.iter()
            .find(|r| r.label == b)
            .map(|r| r.count_in_window)
    });
    if let Some(base) = base.filter(|&b| b > 0) {
        for r in &mut rows {
            r.count_change_pct = Some(relative_change_pct(r.count_in_window as f64, base as f64));
        }
    }
    Comparison {
        window,
        baseline: baseline.map(str::to_string),
        rows,
    }
}

/// Threshold sets of the standard six-row comparison.
pub fn standard_thresholds(n: usize) -> ThresholdSet {
    let levels: &[f64] = match n {
        4 => &[2.0, 12.0, 26.0, 40.0],
        3 => &[2.0, 12.0, 40.0],
        2 => &[2.0, 40.0],
        1 => &[2.0],
        _ => panic!("threshold count must be 1..=4"),
    };
    ThresholdSet::new(levels.to_vec()).expect("valid standard levels")
}

/// Label of the row the count change is measured against.
pub const BASELINE_LABEL: &str = "MVT4";

/// OSC, MVT4 and PP-MVT with four to one thresholds.
///
/// The three- and two-threshold plans are derived from `pulses` by deviation
/// analysis; the one-threshold variant uses the line-exponential model with
/// the peak above the four-threshold plan's lowest bound.
pub fn standard_configs(pulses: &[Waveform], sampler: &Sampler) -> Result<Vec<MethodConfig>> {
    let th4 = standard_thresholds(4);
    let plan4 = default_plan();
    let mut configs = vec![
        MethodConfig::reference("OSC", th4.clone()),
        MethodConfig::mvt(BASELINE_LABEL, th4.clone()),
        MethodConfig::ppmvt("PP-MVT4", th4, plan4.clone()),
    ];
    for n in [3, 2] {
        let th = standard_thresholds(n);
        let table = deviation_analysis(
            pulses,
            &th,
            &all_candidates(),
            &DeviationBins::default(),
            sampler,
        )?;
        configs.push(MethodConfig::ppmvt(
            format!("PP-MVT{n}"),
            th,
            derive_plan(&table)?,
        ));
    }
    configs.push(MethodConfig::ppmvt(
        "PP-MVT1",
        standard_thresholds(1),
        SelectionPlan::uniform(
            plan4.lowest_bound(),
            ModelSpec::new(ModelKind::LineExp, true),
        ),
    ));
    Ok(configs)
}
