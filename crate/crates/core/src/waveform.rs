//! Uniformly sampled pulse traces.
//!
//! Voltages are in mV, times in ns. Pulses are positive-going; the
//! reference ("OSC") energy of a trace is its trapezoidal area above the
//! stored baseline.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shortest trace accepted anywhere in the toolkit.
pub const MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    id: u64,
    dt: f64,
    samples: Vec<f64>,
    baseline: f64,
}

impl Waveform {
    pub fn new(id: u64, dt: f64, samples: Vec<f64>) -> Result<Self> {
        Self::with_baseline(id, dt, samples, 0.0)
    }

    pub fn with_baseline(id: u64, dt: f64, samples: Vec<f64>, baseline: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sample interval must be positive and finite, got {dt}"
            )));
        }
        if samples.len() < MIN_SAMPLES {
            return Err(Error::InvalidParameter(format!(
                "waveform needs at least {MIN_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample {k} is not finite")));
        }
        if !baseline.is_finite() {
            return Err(Error::InvalidParameter("baseline is not finite".into()));
        }
        Ok(Self {
            id,
            dt,
            samples,
            baseline,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of sample `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Baseline-subtracted value of sample `k`.
    pub fn value(&self, k: usize) -> f64 {
        self.samples[k] - self.baseline
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    /// Copy with every baseline-subtracted sample multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|v| self.baseline + (v - self.baseline) * factor)
            .collect();
        Self::with_baseline(self.id, self.dt, samples, self.baseline)
    }

    /// Copy delayed by `k` whole samples, padded at the front with the baseline.
    pub fn delayed(&self, k: usize) -> Self {
        let mut samples = vec![self.baseline; k];
        samples.extend_from_slice(&self.samples);
        Self {
            samples,
            ..self.clone()
        }
    }
}

/// Bi-exponential pulse generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseParams {
    /// Scale `S` of `S (exp(-x/tau_decay) - exp(-x/tau_rise))`, mV.
    pub amplitude_scale: f64,
    pub onset: f64,
    pub tau_rise: f64,
    pub tau_decay: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PulseParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.amplitude_scale,
            self.onset,
            self.tau_rise,
            self.tau_decay,
            self.noise_sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(
                "pulse parameters must be finite".into(),
            ));
        }
        if !(self.tau_rise > 0.0 && self.tau_decay > self.tau_rise) {
            return Err(Error::InvalidParameter(format!(
                "need tau_decay > tau_rise > 0, got tau_rise={} tau_decay={}",
                self.tau_rise, self.tau_decay
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Noiseless value at time `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        if t < self.onset {
            return 0.0;
        }
        let x = t - self.onset;
        self.amplitude_scale * ((-x / self.tau_decay).exp() - (-x / self.tau_rise).exp())
    }

    /// Area from onset to infinity, `S (tau_decay - tau_rise)`.
    pub fn area(&self) -> f64 {
        self.amplitude_scale * (self.tau_decay - self.tau_rise)
    }

    /// Time of the maximum.
    pub fn peak_time(&self) -> f64 {
        let (r, d) = (self.tau_rise, self.tau_decay);
        self.onset + r * d / (d - r) * (d / r).ln()
    }
}

/// Straight-line rise followed by an exponential decay from the apex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineExpParams {
    /// Apex voltage, mV.
    pub apex: f64,
    pub onset: f64,
    /// Duration of the linear rise, onset to apex.
    pub rise_time: f64,
    pub tau_decay: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl LineExpParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.apex,
            self.onset,
            self.rise_time,
            self.tau_decay,
            self.noise_sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.rise_time <= 0.0 || self.tau_decay <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "invalid line-exponential parameters {self:?}"
            )));
        }
        Ok(())
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let x = t - self.onset;
        if x < 0.0 {
            0.0
        } else if x < self.rise_time {
            self.apex * x / self.rise_time
        } else {
            self.apex * (-(x - self.rise_time) / self.tau_decay).exp()
        }
    }

    pub fn area(&self) -> f64 {
        0.5 * self.apex * self.rise_time + self.apex * self.tau_decay
    }
}

fn sample_trace(
    dt: f64,
    n: usize,
    noise_sigma: f64,
    seed: u64,
    shape: impl Fn(f64) -> f64,
) -> Result<Waveform> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sample interval must be positive, got {dt}"
        )));
    }
    if n < MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    let mut samples: Vec<f64> = (0..n).map(|k| shape(k as f64 * dt)).collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in &mut samples {
            *v += normal.sample(&mut rng);
        }
    }
    Waveform::new(0, dt, samples)
}

/// Sample a bi-exponential pulse at `n` points spaced `dt` apart, starting at t = 0.
pub fn synth_biexp(params: &PulseParams, dt: f64, n: usize) -> Result<Waveform> {
    params.validate()?;
    sample_trace(dt, n, params.noise_sigma, params.seed, |t| {
        params.value_at(t)
    })
}

pub fn synth_line_exp(params: &LineExpParams, dt: f64, n: usize) -> Result<Waveform> {
    params.validate()?;
    sample_trace(dt, n, params.noise_sigma, params.seed, |t| {
        params.value_at(t)
    })
}

/// Trapezoidal area of the baseline-subtracted trace, mV·ns.
pub fn integrate(w: &Waveform) -> f64 {
    let s = &w.samples;
    let interior: f64 = s[1..s.len() - 1].iter().map(|v| v - w.baseline).sum();
    let ends = 0.5 * ((s[0] - w.baseline) + (s[s.len() - 1] - w.baseline));
    (interior + ends) * w.dt
}

// Bundle files: `dt_ns=<dt>` header, then one `<id>,<v0>,<v1>,...` row per pulse.
// `{}` formatting of f64 is the shortest representation that parses back exactly.

pub fn write_bundle<W: Write>(out: W, pulses: &[Waveform]) -> Result<()> {
    write_bundle_with_dt(out, pulses.first().map_or(1.0, |w| w.dt), pulses)
}

/// Like [`write_bundle`], with the header's dt given, so an empty bundle keeps it.
pub fn write_bundle_with_dt<W: Write>(mut out: W, dt: f64, pulses: &[Waveform]) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bundle dt must be positive, got {dt}"
        )));
    }
    if let Some(w) = pulses.iter().find(|w| w.dt != dt) {
        return Err(Error::InvalidParameter(format!(
            "pulse {} has dt {} but the bundle uses {dt}",
            w.id, w.dt
        )));
    }
    writeln!(out, "dt_ns={dt}")?;
    for w in pulses {
        write!(out, "{}", w.id)?;
        for v in &w.samples {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_bundle<R: Read>(input: R) -> Result<Vec<Waveform>> {
    let mut lines = BufReader::new(input).lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing dt_ns header".into(),
            })
        }
    };
    let dt = header
        .trim()
        .strip_prefix("dt_ns=")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("malformed header {header:?}, expected dt_ns=<decimal>"),
        })?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Parse {
            line: 1,
            message: format!("dt_ns must be positive, got {dt}"),
        });
    }

    let mut pulses = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields
            .next()
            .and_then(|f| f.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::Parse {
                line: lineno,
                message: "pulse id is not an unsigned integer".into(),
            })?;
        let samples = fields
            .enumerate()
            .map(|(col, f)| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("sample {col} ({f:?}) is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if samples.len() < MIN_SAMPLES {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "row has {} samples, at least {MIN_SAMPLES} required",
                    samples.len()
                ),
            });
        }
        let w = Waveform::new(id, dt, samples).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        pulses.push(w);
    }
    Ok(pulses)
}

pub fn save_bundle(path: impl AsRef<Path>, pulses: &[Waveform]) -> Result<()> {
    let file = File::create(path)?;
    write_bundle(BufWriter::new(file), pulses)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Vec<Waveform>> {
    read_bundle(File::open(path)?)
}
