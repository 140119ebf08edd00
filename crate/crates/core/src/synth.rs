//! Seeded pulse populations shaped like a positron-source spectrum.
//!
//! Each pulse draws an energy from a two-component mixture: a narrow
//! photopeak around 511 keV and a flat continuum below it. The energy maps to
//! a pulse area (charge) through an optional exponential saturation, and the
//! pulse is synthesized with jittered time constants and Gaussian noise. The
//! time-constant jitter moves the peak voltage, not the area.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::SipmCurve;
use crate::error::{Error, Result};
use crate::waveform::{synth_biexp, synth_line_exp, LineExpParams, PulseParams, Waveform};

/// Microcell count used when the generator's saturation is expressed as a curve.
pub const N_CELLS: u32 = 5676;

/// Seeds of the shipped benchmark.
pub const BENCHMARK_SEEDS: [u64; 3] = [11, 22, 33];

/// Pulse population recipe. All fields have defaults, so partial documents parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub count: usize,
    pub seed: u64,
    /// Sample spacing, ns.
    pub dt: f64,
    pub n_samples: usize,
    pub onset: f64,
    /// Standard deviation of the onset, ns.
    pub onset_jitter: f64,
    pub tau_rise: f64,
    pub tau_rise_jitter: f64,
    pub tau_decay: f64,
    pub tau_decay_jitter: f64,
    /// Gaussian noise per sample, mV.
    pub noise_sigma: f64,
    pub photopeak_fraction: f64,
    pub photopeak_kev: f64,
    pub photopeak_sigma_kev: f64,
    pub continuum_lo_kev: f64,
    pub continuum_hi_kev: f64,
    /// Peak voltage of a pulse at `photopeak_kev` with nominal time constants, mV.
    pub photopeak_peak_mv: f64,
    /// Energy scale `n_cells * B` of the saturation, keV; linear when absent.
    pub saturation_kev: Option<f64>,
    /// Pulses whose nominal peak voltage reaches this use the line-exponential shape.
    pub line_exp_above_mv: Option<f64>,
    /// Rise time of line-exponential pulses, ns.
    pub line_rise_time: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            seed: 1,
            dt: 0.5,
            n_samples: 640,
            onset: 40.0,
            onset_jitter: 2.0,
            tau_rise: 5.0,
            tau_rise_jitter: 0.3,
            tau_decay: 40.0,
            tau_decay_jitter: 1.5,
            noise_sigma: 1.0,
            photopeak_fraction: 0.5,
            photopeak_kev: 511.0,
            photopeak_sigma_kev: 25.0,
            continuum_lo_kev: 100.0,
            continuum_hi_kev: 341.0,
            photopeak_peak_mv: 170.0,
            saturation_kev: Some(1000.0),
            line_exp_above_mv: None,
            line_rise_time: 10.0,
        }
    }
}

/// The 30,000-pulse benchmark population.
pub fn benchmark_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        count: 30_000,
        seed,
        ..GeneratorSpec::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Photopeak,
    Continuum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    BiExp,
    LineExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTruth {
    pub id: u64,
    pub component: Component,
    pub energy_kev: f64,
    /// Noiseless peak voltage, mV.
    pub peak_mv: f64,
    pub shape: Shape,
    /// Noiseless area, mV ns.
    pub area: f64,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub pulses: Vec<Waveform>,
    pub truth: Vec<PulseTruth>,
}

/// Maximum of `exp(-x/d) - exp(-x/r)` over `x >= 0`.
pub fn biexp_shape_max(tau_rise: f64, tau_decay: f64) -> f64 {
    let (r, d) = (tau_rise, tau_decay);
    let x = r * d / (d - r) * (d / r).ln();
    (-x / d).exp() - (-x / r).exp()
}

enum Params {
    Bi(PulseParams),
    Line(LineExpParams),
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.n_samples < crate::waveform::MIN_SAMPLES {
            return bad("n_samples too small");
        }
        if !(0.0..=1.0).contains(&self.photopeak_fraction) {
            return bad("photopeak_fraction must lie in [0, 1]");
        }
        if !(self.continuum_lo_kev > 0.0 && self.continuum_hi_kev > self.continuum_lo_kev) {
            return bad("continuum needs 0 < lo < hi");
        }
        if !(self.photopeak_kev > 0.0 && self.photopeak_sigma_kev >= 0.0) {
            return bad("photopeak energy must be positive and its width non-negative");
        }
        if !(self.tau_rise > 0.0 && self.tau_decay > self.tau_rise) {
            return bad("need tau_decay > tau_rise > 0");
        }
        if [
            self.onset_jitter,
            self.tau_rise_jitter,
            self.tau_decay_jitter,
            self.noise_sigma,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return bad("jitters and noise must be non-negative");
        }
        if !(self.photopeak_peak_mv > 0.0 && self.line_rise_time > 0.0) {
            return bad("photopeak_peak_mv and line_rise_time must be positive");
        }
        if let Some(s) = self.saturation_kev {
            if !(s > 0.0) {
                return bad("saturation_kev must be positive");
            }
        }
        Ok(())
    }

    /// Peak voltage for a deposited energy at nominal time constants, mV.
    pub fn peak_mv(&self, energy_kev: f64) -> f64 {
        let e = energy_kev.max(0.0);
        match self.saturation_kev {
            Some(s) => {
                self.photopeak_peak_mv * (-e / s).exp_m1() / (-self.photopeak_kev / s).exp_m1()
            }
            None => self.photopeak_peak_mv * e / self.photopeak_kev,
        }
    }

    /// The saturation as a curve in small-signal keV units (`A = saturation_kev`).
    pub fn sipm_curve(&self) -> Option<SipmCurve> {
        self.saturation_kev
            .map(|s| SipmCurve::new(s, s / N_CELLS as f64, N_CELLS).expect("validated scale"))
    }

    /// Pulse area for a deposited energy, mV ns.
    pub fn area(&self, energy_kev: f64) -> f64 {
        let (r, d) = (self.tau_rise, self.tau_decay);
        self.peak_mv(energy_kev) / biexp_shape_max(r, d) * (d - r)
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<Population> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let peak = Normal::new(spec.photopeak_kev, spec.photopeak_sigma_kev)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let flat = Uniform::new(spec.continuum_lo_kev, spec.continuum_hi_kev)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut plans = Vec::with_capacity(spec.count);
    let mut truth = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let id = i as u64;
        let (component, energy) = if rng.random::<f64>() < spec.photopeak_fraction {
            (Component::Photopeak, peak.sample(&mut rng).max(1.0))
        } else {
            (Component::Continuum, flat.sample(&mut rng))
        };
        let onset = spec.onset + spec.onset_jitter * unit.sample(&mut rng);
        let tau_rise =
            (spec.tau_rise + spec.tau_rise_jitter * unit.sample(&mut rng)).max(0.1 * spec.tau_rise);
        let tau_decay =
            (spec.tau_decay + spec.tau_decay_jitter * unit.sample(&mut rng)).max(2.0 * tau_rise);
        let noise_seed: u64 = rng.random();
        let area = spec.area(energy);
        let line = spec
            .line_exp_above_mv
            .is_some_and(|b| spec.peak_mv(energy) >= b);
        let (shape, peak_mv, params) = if line {
            let p = LineExpParams {
                apex: area / (0.5 * spec.line_rise_time + tau_decay),
                onset,
                rise_time: spec.line_rise_time,
                tau_decay,
                noise_sigma: spec.noise_sigma,
                seed: noise_seed,
            };
            (Shape::LineExp, p.apex, Params::Line(p))
        } else {
            let scale = area / (tau_decay - tau_rise);
            let p = PulseParams {
                amplitude_scale: scale,
                onset,
                tau_rise,
                tau_decay,
                noise_sigma: spec.noise_sigma,
                seed: noise_seed,
            };
            (
                Shape::BiExp,
                scale * biexp_shape_max(tau_rise, tau_decay),
                Params::Bi(p),
            )
        };
        truth.push(PulseTruth {
            id,
            component,
            energy_kev: energy,
            peak_mv,
            shape,
            area,
        });
        plans.push(params);
    }
    let pulses = plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let w = match p {
                Params::Bi(p) => synth_biexp(p, spec.dt, spec.n_samples)?,
                Params::Line(p) => synth_line_exp(p, spec.dt, spec.n_samples)?,
            };
            Ok(w.with_id(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Population { pulses, truth })
}
