//! Multi-voltage-threshold sampling.
//!
//! Each threshold level contributes a rise time and a fall time located by
//! linear interpolation between the bracketing samples. When noise makes a
//! level chatter, all crossings belonging to the same edge are averaged.
//! The peak point is the first maximum sample of the trace.
//!
//! An edge's crossings are collected outward from the peak until the trace
//! drops below a re-arm level `L * (1 - rearm_fraction)`. This keeps baseline
//! noise far from the pulse from being averaged into the edge.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RejectReason, Result};
use crate::waveform::Waveform;

pub const MAX_THRESHOLDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSet {
    levels: Vec<f64>,
}

impl ThresholdSet {
    pub fn new(levels: impl Into<Vec<f64>>) -> Result<Self> {
        let levels = levels.into();
        if levels.is_empty() || levels.len() > MAX_THRESHOLDS {
            return Err(Error::InvalidParameter(format!(
                "need 1 to {MAX_THRESHOLDS} thresholds, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must be positive, got {levels:?}"
            )));
        }
        if levels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must be strictly increasing, got {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    /// 2, 12, 26 and 40 mV.
    pub fn four_level_default() -> Self {
        Self {
            levels: vec![2.0, 12.0, 26.0, 40.0],
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn lowest(&self) -> f64 {
        self.levels[0]
    }

    pub fn highest(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for ThresholdSet {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<ThresholdSet> for Vec<f64> {
    fn from(th: ThresholdSet) -> Self {
        th.levels
    }
}

impl std::str::FromStr for ThresholdSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("bad threshold {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingPair {
    pub level: f64,
    pub t_rise: f64,
    pub t_fall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPoint {
    pub t9: f64,
    pub v9: f64,
    /// `t9` minus the rise time at the lowest threshold.
    pub dt_from_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitizedPulse {
    pub id: u64,
    pub crossings: Vec<CrossingPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peak: Option<PeakPoint>,
}

impl DigitizedPulse {
    pub fn rising_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.crossings.iter().map(|c| (c.t_rise, c.level))
    }

    pub fn falling_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.crossings.iter().map(|c| (c.t_fall, c.level))
    }

    /// Crossings of the highest threshold.
    pub fn top(&self) -> &CrossingPair {
        self.crossings
            .last()
            .expect("digitized pulse without crossings")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub id: u64,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub pulses: Vec<DigitizedPulse>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    /// Fraction of a level the trace must fall below it to end an edge.
    pub rearm_fraction: f64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            rearm_fraction: 0.5,
        }
    }
}

/// Index of the first maximum of the baseline-subtracted trace.
fn peak_index(w: &Waveform) -> usize {
    let mut best = 0;
    for k in 1..w.len() {
        if w.value(k) > w.value(best) {
            best = k;
        }
    }
    best
}

impl Sampler {
    fn rising_time(
        &self,
        w: &Waveform,
        level: f64,
        peak: usize,
    ) -> std::result::Result<f64, RejectReason> {
        let rearm = level * (1.0 - self.rearm_fraction);
        let (mut sum, mut n) = (0.0, 0usize);
        for k in (0..peak).rev() {
            let (a, b) = (w.value(k), w.value(k + 1));
            if a < level && b >= level {
                sum += k as f64 + (level - a) / (b - a);
                n += 1;
            }
            if a < rearm {
                break;
            }
        }
        if n == 0 {
            return Err(RejectReason::MissingEdge { level });
        }
        Ok(sum / n as f64 * w.dt())
    }

    fn falling_time(
        &self,
        w: &Waveform,
        level: f64,
        peak: usize,
    ) -> std::result::Result<f64, RejectReason> {
        let rearm = level * (1.0 - self.rearm_fraction);
        let (mut sum, mut n) = (0.0, 0usize);
        for k in peak..w.len() - 1 {
            let (a, b) = (w.value(k), w.value(k + 1));
            if a >= level && b < level {
                sum += k as f64 + (a - level) / (a - b);
                n += 1;
            }
            if b < rearm {
                break;
            }
        }
        if n == 0 {
            return Err(RejectReason::MissingEdge { level });
        }
        Ok(sum / n as f64 * w.dt())
    }

    fn crossings(
        &self,
        w: &Waveform,
        th: &ThresholdSet,
        peak: usize,
    ) -> std::result::Result<Vec<CrossingPair>, RejectReason> {
        let vmax = w.value(peak);
        let mut out = Vec::with_capacity(th.len());
        for &level in th.levels() {
            if vmax < level {
                return Err(RejectReason::BelowThreshold { level });
            }
            out.push(CrossingPair {
                level,
                t_rise: self.rising_time(w, level, peak)?,
                t_fall: self.falling_time(w, level, peak)?,
            });
        }
        let ordered = out
            .windows(2)
            .all(|p| p[0].t_rise < p[1].t_rise && p[0].t_fall > p[1].t_fall);
        if !ordered {
            return Err(RejectReason::NonMonotonic);
        }
        Ok(out)
    }

    /// Rise and fall times for every level; the pulse must reach all of them.
    pub fn mvt_sample(
        &self,
        w: &Waveform,
        th: &ThresholdSet,
    ) -> std::result::Result<DigitizedPulse, RejectReason> {
        let crossings = self.crossings(w, th, peak_index(w))?;
        Ok(DigitizedPulse {
            id: w.id(),
            crossings,
            peak: None,
        })
    }

    pub fn pick_peak(
        &self,
        w: &Waveform,
        th: &ThresholdSet,
    ) -> std::result::Result<PeakPoint, RejectReason> {
        let p = peak_index(w);
        let level = th.lowest();
        if w.value(p) < level {
            return Err(RejectReason::BelowThreshold { level });
        }
        let t1 = self.rising_time(w, level, p)?;
        let t9 = w.time_at(p);
        Ok(PeakPoint {
            t9,
            v9: w.value(p),
            dt_from_first: t9 - t1,
        })
    }

    pub fn digitize(
        &self,
        w: &Waveform,
        th: &ThresholdSet,
        with_peak: bool,
    ) -> std::result::Result<DigitizedPulse, RejectReason> {
        let p = peak_index(w);
        let crossings = self.crossings(w, th, p)?;
        let peak = with_peak.then(|| {
            let t9 = w.time_at(p);
            PeakPoint {
                t9,
                v9: w.value(p),
                dt_from_first: t9 - crossings[0].t_rise,
            }
        });
        Ok(DigitizedPulse {
            id: w.id(),
            crossings,
            peak,
        })
    }

    pub fn digitize_batch(&self, pulses: &[Waveform], th: &ThresholdSet, with_peak: bool) -> Batch {
        let mut batch = Batch::default();
        for w in pulses {
            match self.digitize(w, th, with_peak) {
                Ok(d) => batch.pulses.push(d),
                Err(reason) => batch.rejections.push(Rejection { id: w.id(), reason }),
            }
        }
        batch
    }
}

pub fn mvt_sample(
    w: &Waveform,
    th: &ThresholdSet,
) -> std::result::Result<DigitizedPulse, RejectReason> {
    Sampler::default().mvt_sample(w, th)
}

pub fn pick_peak(w: &Waveform, th: &ThresholdSet) -> std::result::Result<PeakPoint, RejectReason> {
    Sampler::default().pick_peak(w, th)
}

pub fn digitize(
    w: &Waveform,
    th: &ThresholdSet,
    with_peak: bool,
) -> std::result::Result<DigitizedPulse, RejectReason> {
    Sampler::default().digitize(w, th, with_peak)
}

pub fn digitize_batch(pulses: &[Waveform], th: &ThresholdSet, with_peak: bool) -> Batch {
    Sampler::default().digitize_batch(pulses, th, with_peak)
}

/// One JSON object per line: accepted pulses first, then rejections.
pub fn write_jsonl<W: Write>(mut out: W, batch: &Batch) -> Result<()> {
    for p in &batch.pulses {
        serde_json::to_writer(&mut out, p)?;
        writeln!(out)?;
    }
    for r in &batch.rejections {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{synth_biexp, PulseParams};

    /// 0 -> 50 mV over [0, 100] ns, back to 0 at 300 ns, 1 ns sampling.
    fn triangle() -> Waveform {
        let s = (0..=400)
            .map(|k| {
                let t = k as f64;
                if t <= 100.0 {
                    0.5 * t
                } else if t <= 300.0 {
                    50.0 - 0.25 * (t - 100.0)
                } else {
                    0.0
                }
            })
            .collect();
        Waveform::new(3, 1.0, s).unwrap()
    }

    fn th(levels: &[f64]) -> ThresholdSet {
        ThresholdSet::new(levels.to_vec()).unwrap()
    }

    #[test]
    fn threshold_set_validation() {
        assert!(ThresholdSet::new(vec![]).is_err());
        assert!(ThresholdSet::new(vec![1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert!(ThresholdSet::new(vec![2.0, 2.0]).is_err());
        assert!(ThresholdSet::new(vec![3.0, 2.0]).is_err());
        assert!(ThresholdSet::new(vec![0.0, 2.0]).is_err());
        assert_eq!(
            "2, 12,26,40".parse::<ThresholdSet>().unwrap(),
            ThresholdSet::four_level_default()
        );
    }

    #[test]
    fn triangle_crossings() {
        let d = mvt_sample(&triangle(), &th(&[10.0])).unwrap();
        assert!(d.peak.is_none());
        assert!((d.crossings[0].t_rise - 20.0).abs() < 1e-12);
        assert!((d.crossings[0].t_fall - 260.0).abs() < 1e-12);
    }

    #[test]
    fn unreached_level_rejects() {
        let err = mvt_sample(&triangle(), &th(&[10.0, 60.0])).unwrap_err();
        assert_eq!(err, RejectReason::BelowThreshold { level: 60.0 });
    }

    #[test]
    fn triangle_peak() {
        let p = pick_peak(&triangle(), &th(&[10.0])).unwrap();
        assert_eq!((p.t9, p.v9), (100.0, 50.0));
        assert!((p.dt_from_first - 80.0).abs() < 1e-12);
    }

    #[test]
    fn peak_ties_break_to_earliest() {
        let mut s = vec![0.0; 20];
        s[5] = 30.0;
        s[6] = 20.0;
        s[12] = 30.0;
        let w = Waveform::new(0, 2.0, s).unwrap();
        let p = pick_peak(&w, &th(&[10.0])).unwrap();
        assert_eq!(p.t9, 10.0);
    }

    #[test]
    fn sub_threshold_peak_rejects() {
        let err = pick_peak(&triangle(), &th(&[55.0])).unwrap_err();
        assert_eq!(err, RejectReason::BelowThreshold { level: 55.0 });
    }

    #[test]
    fn truncated_pulse_has_missing_edge() {
        // starts above the level: no rising crossing exists
        let s: Vec<f64> = (0..50).map(|k| 40.0 - k as f64).collect();
        let w = Waveform::new(0, 1.0, s).unwrap();
        let err = mvt_sample(&w, &th(&[10.0])).unwrap_err();
        assert_eq!(err, RejectReason::MissingEdge { level: 10.0 });
    }

    #[test]
    fn digitize_composite() {
        let w = triangle();
        let d = digitize(&w, &th(&[10.0, 40.0]), false).unwrap();
        assert!(d.peak.is_none());

        let d = digitize(&w, &th(&[10.0, 40.0]), true).unwrap();
        assert_eq!(d.crossings.len(), 2);
        let c = d.crossings[1];
        assert!((c.t_rise - 80.0).abs() < 1e-12);
        assert!((c.t_fall - 140.0).abs() < 1e-12);
        let p = d.peak.unwrap();
        assert_eq!((p.t9, p.v9), (100.0, 50.0));
    }

    #[test]
    fn batch_collects_rejections() {
        let small = triangle().scaled(0.5).unwrap().with_id(9);
        let batch = digitize_batch(
            &[triangle().with_id(1), small, triangle().with_id(2)],
            &th(&[10.0, 40.0]),
            true,
        );
        assert_eq!(batch.pulses.len(), 2);
        assert_eq!(batch.rejections.len(), 1);
        assert_eq!(batch.rejections[0].id, 9);

        let mut buf = Vec::new();
        write_jsonl(&mut buf, &batch).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(
            lines[2].contains("\"reason\":\"below_threshold\""),
            "{}",
            lines[2]
        );
    }

    #[test]
    fn chatter_is_averaged_per_edge() {
        // rising edge chatters across 10 mV: up at 2.5, down at 3.5, up at 4.5
        let s = vec![0.0, 0.0, 5.0, 15.0, 5.0, 15.0, 30.0, 15.0, 5.0, 0.0, 0.0];
        let w = Waveform::new(0, 1.0, s).unwrap();
        let d = mvt_sample(&w, &th(&[10.0])).unwrap();
        assert!((d.crossings[0].t_rise - 3.5).abs() < 1e-12);
        assert!((d.crossings[0].t_fall - 7.5).abs() < 1e-12);
    }

    #[test]
    fn baseline_noise_far_from_pulse_is_ignored() {
        let mut s = vec![0.0; 60];
        s[3] = 12.0; // isolated spike well before the pulse
        for (k, v) in [(20, 5.0), (21, 20.0), (22, 40.0), (23, 20.0), (24, 5.0)] {
            s[k] = v;
        }
        let w = Waveform::new(0, 1.0, s).unwrap();
        let d = mvt_sample(&w, &th(&[10.0])).unwrap();
        assert!((d.crossings[0].t_rise - 20.0 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn biexp_peak_near_analytic_argmax() {
        let p = PulseParams {
            amplitude_scale: 120.0,
            onset: 0.0,
            tau_rise: 5.0,
            tau_decay: 40.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let dt = 0.16;
        let w = synth_biexp(&p, dt, 3000).unwrap();
        let peak = pick_peak(&w, &th(&[2.0])).unwrap();
        let t_star = 5.0 * 40.0 / 35.0 * (8.0f64).ln();
        assert!((peak.t9 - t_star).abs() <= dt, "{} vs {t_star}", peak.t9);
    }
}
