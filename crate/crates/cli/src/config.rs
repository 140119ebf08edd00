//! Run configuration: command-line flags layered over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;

use ppmvt::pipeline::AnalysisOptions;
use ppmvt::spectrum::{Binning, DEFAULT_WINDOW};
use ppmvt::synth::{benchmark_spec, generate, GeneratorSpec};
use ppmvt::waveform::load_bundle;
use ppmvt::{SipmCurve, ThresholdSet, Waveform};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Bi-exponential fit to the threshold crossings only.
    Mvt,
    /// Peak point recorded, model picked per pulse from a selection plan.
    Ppmvt,
}

/// Flags shared by every subcommand. Each one overrides the same key in `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with any of the keys below (snake_case); flags win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Pulse bundle to read.
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,

    /// Generate pulses instead: `key=value,...` over the generator defaults.
    /// A leading `benchmark` item starts from the 30,000-pulse benchmark.
    #[arg(long, value_name = "SPEC")]
    pub synthetic: Option<String>,

    /// Generator seed; with no other source, the default generator is used.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Threshold levels in mV, ascending.
    #[arg(long, value_name = "V1,V2,..", value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,

    #[arg(long, value_enum)]
    pub method: Option<Method>,

    /// Selection plan for ppmvt: `default`, `derived`, or a plan JSON file.
    #[arg(long, value_name = "PLAN")]
    pub plan: Option<String>,

    /// SiPM curve JSON `{"A": .., "B": .., "n_cells": ..}`.
    #[arg(long, value_name = "FILE", conflicts_with = "no_sipm_correction")]
    pub calibration: Option<PathBuf>,

    /// Skip saturation correction, including a synthetic input's own curve.
    #[arg(long)]
    pub no_sipm_correction: bool,

    /// Photopeak window in keV.
    #[arg(long, value_name = "LO,HI", value_delimiter = ',')]
    pub window: Option<Vec<f64>>,

    /// Spectrum bins over 0-1200 keV.
    #[arg(long)]
    pub bins: Option<usize>,

    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    synthetic: Option<toml::Value>,
    seed: Option<u64>,
    thresholds: Option<Vec<f64>>,
    method: Option<Method>,
    plan: Option<String>,
    calibration: Option<PathBuf>,
    no_sipm_correction: Option<bool>,
    window: Option<Vec<f64>>,
    bins: Option<usize>,
    out_dir: Option<PathBuf>,
    bin_width: Option<f64>,
    candidates: Option<Vec<String>>,
    v2: Option<Vec<f64>>,
    v3: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Bundle(PathBuf),
    Synthetic(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanSource {
    Default,
    Derived,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationSource {
    /// The generator's curve for synthetic input, none for bundles.
    Auto,
    Curve(PathBuf),
    Off,
}

/// Subcommand-specific settings that may also come from the file.
#[derive(Debug, Clone, Default)]
pub struct Extra {
    pub bin_width: Option<f64>,
    pub candidates: Option<Vec<String>>,
    pub v2: Option<Vec<f64>>,
    pub v3: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<Input>,
    pub thresholds: ThresholdSet,
    pub method: Method,
    pub plan: PlanSource,
    pub calibration: CalibrationSource,
    pub window: (f64, f64),
    pub binning: Binning,
    pub out_dir: PathBuf,
    pub extra: Extra,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Turns `k=v,k=v` into a TOML table, so values get TOML typing.
fn parse_pairs(spec: &str) -> Result<(bool, toml::Table), Failure> {
    let mut benchmark = false;
    let mut lines = String::new();
    for (i, item) in spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
    {
        if i == 0 && item == "benchmark" {
            benchmark = true;
            continue;
        }
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("synthetic spec item `{item}` is not key=value")))?;
        lines.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    let table = lines
        .parse::<toml::Table>()
        .map_err(|e| usage(format!("synthetic spec: {e}")))?;
    Ok((benchmark, table))
}

fn generator_spec(
    file: Option<&toml::Value>,
    flag: Option<&str>,
    seed: Option<u64>,
) -> Result<GeneratorSpec, Failure> {
    let mut benchmark = false;
    let mut table = toml::Table::new();
    match file {
        Some(toml::Value::String(s)) => {
            let (b, t) = parse_pairs(s)?;
            benchmark |= b;
            table.extend(t);
        }
        Some(toml::Value::Table(t)) => table.extend(t.clone()),
        Some(other) => {
            return Err(usage(format!(
                "`synthetic` must be a string or table, got {other}"
            )))
        }
        None => {}
    }
    if let Some(s) = flag {
        let (b, t) = parse_pairs(s)?;
        benchmark |= b;
        table.extend(t);
    }
    let mut spec = if benchmark {
        let mut base =
            toml::Table::try_from(benchmark_spec(1)).map_err(|e| usage(e.to_string()))?;
        base.extend(table);
        GeneratorSpec::deserialize(base)
    } else {
        GeneratorSpec::deserialize(table)
    }
    .map_err(|e| usage(format!("synthetic spec: {e}")))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn pair(v: &[f64], what: &str) -> Result<(f64, f64), Failure> {
    match v {
        [lo, hi] if lo < hi => Ok((*lo, *hi)),
        _ => Err(usage(format!(
            "{what} needs two ascending values, got {v:?}"
        ))),
    }
}

impl RunConfig {
    pub fn resolve(flags: &CommonArgs, extra: Extra) -> Result<Self, Failure> {
        let file: FileConfig = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };

        if file.input.is_some() && file.synthetic.is_some() {
            return Err(usage("config file sets both `input` and `synthetic`"));
        }
        let seed = flags.seed.or(file.seed);
        // an input flag replaces the file's source as a whole
        let input = if let Some(path) = &flags.input {
            Some(Input::Bundle(path.clone()))
        } else if flags.synthetic.is_some() {
            Some(Input::Synthetic(generator_spec(
                file.synthetic.as_ref(),
                flags.synthetic.as_deref(),
                seed,
            )?))
        } else if let Some(path) = file.input {
            Some(Input::Bundle(path))
        } else if file.synthetic.is_some() {
            Some(Input::Synthetic(generator_spec(
                file.synthetic.as_ref(),
                None,
                seed,
            )?))
        } else if seed.is_some() {
            Some(Input::Synthetic(generator_spec(None, None, seed)?))
        } else {
            None
        };
        if seed.is_some() && matches!(input, Some(Input::Bundle(_))) {
            return Err(usage("--seed applies to synthetic input only"));
        }

        let thresholds = match flags.thresholds.clone().or(file.thresholds) {
            Some(levels) => ThresholdSet::new(levels)?,
            None => ThresholdSet::four_level_default(),
        };
        let method = flags.method.or(file.method).unwrap_or(Method::Ppmvt);
        let plan = match flags.plan.clone().or(file.plan).as_deref() {
            None | Some("default") => PlanSource::Default,
            Some("derived") => PlanSource::Derived,
            Some(path) => PlanSource::File(PathBuf::from(path)),
        };
        let calibration = if flags.no_sipm_correction {
            CalibrationSource::Off
        } else if let Some(path) = &flags.calibration {
            CalibrationSource::Curve(path.clone())
        } else {
            match (file.calibration, file.no_sipm_correction.unwrap_or(false)) {
                (Some(_), true) => {
                    return Err(usage(
                        "config file sets both `calibration` and `no_sipm_correction`",
                    ))
                }
                (Some(path), false) => CalibrationSource::Curve(path),
                (None, true) => CalibrationSource::Off,
                (None, false) => CalibrationSource::Auto,
            }
        };
        let window = match flags.window.clone().or(file.window) {
            Some(v) => pair(&v, "--window")?,
            None => DEFAULT_WINDOW,
        };
        let mut binning = Binning::default();
        if let Some(n) = flags.bins.or(file.bins) {
            if n == 0 {
                return Err(usage("--bins must be positive"));
            }
            binning.n_bins = n;
        }
        let out_dir = flags
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("out"));
        let extra = Extra {
            bin_width: extra.bin_width.or(file.bin_width),
            candidates: extra.candidates.or(file.candidates),
            v2: extra.v2.or(file.v2),
            v3: extra.v3.or(file.v3),
        };
        Ok(Self {
            input,
            thresholds,
            method,
            plan,
            calibration,
            window,
            binning,
            out_dir,
            extra,
        })
    }

    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            window: self.window,
            binning: self.binning,
            ..AnalysisOptions::default()
        }
    }

    /// The pulses, plus the generator spec when they were synthesized.
    pub fn load_pulses(&self) -> Result<(Vec<Waveform>, Option<GeneratorSpec>), Failure> {
        match &self.input {
            Some(Input::Bundle(path)) => {
                let pulses = load_bundle(path).map_err(|e| match e {
                    ppmvt::Error::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
                    other => usage(format!("{}: {other}", path.display())),
                })?;
                Ok((pulses, None))
            }
            Some(Input::Synthetic(spec)) => Ok((generate(spec)?.pulses, Some(spec.clone()))),
            None => Err(usage("no input: pass --input FILE or --synthetic SPEC")),
        }
    }

    pub fn sipm_curve(
        &self,
        generator: Option<&GeneratorSpec>,
    ) -> Result<Option<SipmCurve>, Failure> {
        match &self.calibration {
            CalibrationSource::Off => Ok(None),
            CalibrationSource::Auto => Ok(generator.and_then(GeneratorSpec::sipm_curve)),
            CalibrationSource::Curve(path) => read_curve(path).map(Some),
        }
    }
}

pub fn read_curve(path: &Path) -> Result<SipmCurve, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let curve: SipmCurve =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    curve.validate()?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_become_typed_values() {
        let (bench, t) = parse_pairs("count=10, dt=0.25,line_exp_above_mv=100").unwrap();
        assert!(!bench);
        let spec = GeneratorSpec::deserialize(t).unwrap();
        assert_eq!(spec.count, 10);
        assert_eq!(spec.dt, 0.25);
        assert_eq!(spec.line_exp_above_mv, Some(100.0));
    }

    #[test]
    fn benchmark_prefix_and_seed_override() {
        let spec = generator_spec(None, Some("benchmark,count=50"), Some(9)).unwrap();
        assert_eq!((spec.count, spec.seed), (50, 9));
        assert_eq!(spec.n_samples, benchmark_spec(1).n_samples);
    }

    #[test]
    fn flag_keys_override_file_keys() {
        let file: toml::Value = toml::from_str::<toml::Table>("count = 5\nnoise_sigma = 0.0")
            .map(toml::Value::Table)
            .unwrap();
        let spec = generator_spec(Some(&file), Some("count=7"), None).unwrap();
        assert_eq!((spec.count, spec.noise_sigma), (7, 0.0));
    }

    #[test]
    fn bad_items_are_usage_errors() {
        assert!(matches!(parse_pairs("count"), Err(Failure::Usage(_))));
        assert!(matches!(
            generator_spec(None, Some("bogus=1"), None),
            Err(Failure::Usage(_))
        ));
        assert!(generator_spec(None, Some("count=-1"), None).is_err());
    }
}
