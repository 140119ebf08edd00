//! Peak-picking multi-voltage-threshold (PP-MVT) digitizer toolkit.
//!
//! A pulse is sampled at a handful of fixed voltage thresholds on both edges,
//! optionally together with its peak point. The pulse is then reconstructed
//! with a model chosen from its peak voltage and integrated analytically.
//! Energies from many pulses are histogrammed and the photopeak is fitted to
//! obtain an energy resolution, which is how the traditional fixed-model MVT
//! scheme and the adaptive peak-picking scheme are compared.
//!
//! Module map:
//!
//! - [`waveform`]: sampled traces, synthesis, trapezoid reference energy, bundle files
//! - [`sampler`]: threshold crossings and the peak point
//! - [`models`]: the four reconstruction models and their analytic energies
//! - [`selection`]: selection plans, deviation analysis, threshold grid search
//! - [`calibration`]: SiPM saturation curve and its inverse
//! - [`spectrum`]: histograms, photopeak Gaussian fit, resolution reports
//! - [`pipeline`]: method configurations and multi-method comparison
//! - [`synth`]: seeded pulse-population generator used by the benchmark

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
mod lm;
pub mod models;
pub mod pipeline;
pub mod sampler;
pub mod selection;
pub mod spectrum;
pub mod synth;
pub mod waveform;

pub use calibration::SipmCurve;
pub use error::{Error, RejectReason, Result};
pub use models::{FittedPulse, ModelKind, ModelSpec};
pub use pipeline::{Calibration, Comparison, MethodConfig, Reconstruction};
pub use sampler::{CrossingPair, DigitizedPulse, PeakPoint, ThresholdSet};
pub use selection::{DeviationTable, SelectionPlan, ThresholdGrid};
pub use spectrum::{EnergySpectrum, GaussianFit, ResolutionReport};
pub use waveform::{PulseParams, Waveform};
