//! Energy spectra and photopeak resolution.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm;

/// FWHM of a Gaussian in units of its standard deviation, `2 sqrt(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

pub const DEFAULT_WINDOW: (f64, f64) = (450.0, 650.0);

/// Histogram layout used for resolution reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1200.0,
            n_bins: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergySpectrum {
    lo: u64,
    hi: u64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

// Edges are stored as raw bits so the spectrum stays `Eq` and merges compare exactly.
impl EnergySpectrum {
    pub fn new(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "histogram range must satisfy lo < hi, got [{lo}, {hi})"
            )));
        }
        if n_bins == 0 {
            return Err(Error::InvalidParameter("n_bins must be >= 1".into()));
        }
        Ok(Self {
            lo: lo.to_bits(),
            hi: hi.to_bits(),
            counts: vec![0; n_bins],
            underflow: 0,
            overflow: 0,
        })
    }

    pub fn lo(&self) -> f64 {
        f64::from_bits(self.lo)
    }

    pub fn hi(&self) -> f64 {
        f64::from_bits(self.hi)
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi() - self.lo()) / self.n_bins() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo() + (i as f64 + 0.5) * self.bin_width()
    }

    /// Entries inside the histogram range.
    pub fn entries(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin index for `e`, `None` when out of range (or NaN).
    pub fn bin_of(&self, e: f64) -> Option<usize> {
        if !(e >= self.lo() && e < self.hi()) {
            return None;
        }
        let i = ((e - self.lo()) / self.bin_width()) as usize;
        Some(i.min(self.n_bins() - 1))
    }

    pub fn fill(&mut self, e: f64) {
        match self.bin_of(e) {
            Some(i) => self.counts[i] += 1,
            None if e < self.lo() => self.underflow += 1,
            None => self.overflow += 1,
        }
    }

    /// Adds another spectrum with identical binning.
    pub fn merge(&mut self, other: &EnergySpectrum) -> Result<()> {
        if self.lo != other.lo || self.hi != other.hi || self.counts.len() != other.counts.len() {
            return Err(Error::InvalidParameter(
                "cannot merge spectra with different binning".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        Ok(())
    }

    pub fn to_csv(&self, fit: Option<&GaussianFit>) -> String {
        let mut out = String::from("bin_lo,bin_hi,center,count,fit\n");
        let w = self.bin_width();
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo() + i as f64 * w;
            let x = self.center(i);
            let f = fit.map(|g| g.eval(x).to_string()).unwrap_or_default();
            let _ = writeln!(out, "{lo},{},{x},{c},{f}", lo + w);
        }
        out
    }
}

pub fn histogram(energies: &[f64], lo: f64, hi: f64, n_bins: usize) -> Result<EnergySpectrum> {
    let mut spec = EnergySpectrum::new(lo, hi, n_bins)?;
    for &e in energies {
        spec.fill(e);
    }
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl GaussianFit {
    pub fn eval(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        self.amplitude * (-0.5 * z * z).exp()
    }
}

struct GaussProblem<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

impl lm::Problem for GaussProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }

    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for ((o, &x), &y) in out.iter_mut().zip(self.x).zip(self.y) {
            let z = (x - p[1]) / p[2];
            *o = p[0] * (-0.5 * z * z).exp() - y;
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut [f64]) {
        for (row, &x) in jac.chunks_exact_mut(3).zip(self.x) {
            let z = (x - p[1]) / p[2];
            let e = (-0.5 * z * z).exp();
            row[0] = e;
            row[1] = p[0] * e * z / p[2];
            row[2] = p[0] * e * z * z / p[2];
        }
    }
}

/// Unweighted least-squares Gaussian through `(x, y)` points inside `window`.
pub fn fit_gaussian_xy(x: &[f64], y: &[f64], window: (f64, f64)) -> Result<GaussianFit> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!("bad window [{lo}, {hi}]")));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(&x, _)| x >= lo && x <= hi)
        .map(|(&x, &y)| (x, y))
        .unzip();
    let populated = ys.iter().filter(|&&y| y > 0.0).count();
    if populated < 5 {
        return Err(Error::fit(
            format!("only {populated} populated bins in [{lo}, {hi}], need 5"),
            f64::NAN,
        ));
    }
    let (imax, &a0) = ys
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let init = [a0, xs[imax], (hi - lo) / 6.0];
    let out = lm::minimize(
        &GaussProblem { x: &xs, y: &ys },
        &init,
        lm::Settings::default(),
    );
    let residual = (out.cost / xs.len() as f64).sqrt();
    if !out.converged {
        return Err(Error::fit("Gaussian fit did not converge", residual));
    }
    let (amplitude, mu, sigma) = (out.params[0], out.params[1], out.params[2].abs());
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite() && amplitude > 0.0) {
        return Err(Error::fit(
            format!("degenerate Gaussian sigma={sigma}"),
            residual,
        ));
    }
    if !(mu >= lo && mu <= hi) || sigma > hi - lo {
        return Err(Error::fit(
            format!("no photopeak in window: mu={mu}, sigma={sigma}"),
            residual,
        ));
    }
    Ok(GaussianFit {
        mu,
        sigma,
        amplitude,
    })
}

pub fn gaussian_fit(spec: &EnergySpectrum, window: (f64, f64)) -> Result<GaussianFit> {
    let x: Vec<f64> = (0..spec.n_bins()).map(|i| spec.center(i)).collect();
    let y: Vec<f64> = spec.counts.iter().map(|&c| c as f64).collect();
    fit_gaussian_xy(&x, &y, window)
}

/// Number of energies in the closed window.
pub fn count_in_window(energies: &[f64], window: (f64, f64)) -> u64 {
    energies
        .iter()
        .filter(|&&e| e >= window.0 && e <= window.1)
        .count() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub label: String,
    pub mu: f64,
    pub sigma: f64,
    pub amplitude: f64,
    pub fwhm: f64,
    pub resolution_pct: f64,
    pub window: (f64, f64),
    pub count_in_window: u64,
}

impl ResolutionReport {
    pub fn from_fit(label: &str, fit: &GaussianFit, window: (f64, f64), count: u64) -> Self {
        let fwhm = FWHM_PER_SIGMA * fit.sigma;
        Self {
            label: label.to_string(),
            mu: fit.mu,
            sigma: fit.sigma,
            amplitude: fit.amplitude,
            fwhm,
            resolution_pct: fwhm / fit.mu * 100.0,
            window,
            count_in_window: count,
        }
    }

    pub fn gaussian(&self) -> GaussianFit {
        GaussianFit {
            mu: self.mu,
            sigma: self.sigma,
            amplitude: self.amplitude,
        }
    }
}

/// Histogram, photopeak fit inside `window`, FWHM resolution and window count.
pub fn resolution_report(
    energies: &[f64],
    window: (f64, f64),
    label: &str,
    binning: Binning,
) -> Result<ResolutionReport> {
    if !(window.0 < window.1) {
        return Err(Error::InvalidParameter(format!("bad window {window:?}")));
    }
    let spec = histogram(energies, binning.lo, binning.hi, binning.n_bins)?;
    let fit = gaussian_fit(&spec, window)?;
    Ok(ResolutionReport::from_fit(
        label,
        &fit,
        window,
        count_in_window(energies, window),
    ))
}

/// Static line plot of a spectrum with the fitted Gaussian and shaded window.
pub fn render_svg(
    spec: &EnergySpectrum,
    fit: Option<&GaussianFit>,
    window: (f64, f64),
    title: &str,
) -> String {
    let (w, h) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 45.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let y_max = spec.counts.iter().copied().max().unwrap_or(0).max(1) as f64 * 1.1;
    let sx = |x: f64| ml + (x - spec.lo()) / (spec.hi() - spec.lo()) * pw;
    let sy = |y: f64| mt + ph - (y / y_max).clamp(0.0, 1.0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (wx0, wx1) = (sx(window.0.max(spec.lo())), sx(window.1.min(spec.hi())));
    if wx1 > wx0 {
        let _ = writeln!(
            s,
            r##"<rect x="{wx0:.2}" y="{mt}" width="{:.2}" height="{ph}" fill="#cfe3ff" fill-opacity="0.6"/>"##,
            wx1 - wx0
        );
    }
    let _ = writeln!(
        s,
        r#"<path d="M{ml} {mt} V{} H{}" stroke="black" fill="none"/>"#,
        mt + ph,
        ml + pw
    );
    let bw = spec.bin_width();
    let mut path = format!("M{:.2} {:.2}", sx(spec.lo()), sy(0.0));
    for (i, &c) in spec.counts.iter().enumerate() {
        let x0 = spec.lo() + i as f64 * bw;
        let _ = write!(
            path,
            " L{:.2} {:.2} L{:.2} {:.2}",
            sx(x0),
            sy(c as f64),
            sx(x0 + bw),
            sy(c as f64)
        );
    }
    let _ = writeln!(
        s,
        r##"<path d="{path}" stroke="#1f3b73" stroke-width="1" fill="none"/>"##
    );
    if let Some(g) = fit {
        let mut pts = String::new();
        let n = 400;
        for i in 0..=n {
            let x = window.0 + (window.1 - window.0) * i as f64 / n as f64;
            let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(g.eval(x)));
        }
        let _ = writeln!(
            s,
            r##"<polyline points="{}" stroke="#d62728" stroke-width="3" fill="none"/>"##,
            pts.trim_end()
        );
    }
    for k in 0..=6 {
        let x = spec.lo() + (spec.hi() - spec.lo()) * k as f64 / 6.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-size="11" text-anchor="middle">{x:.0}</text>"#,
            sx(x),
            h - mb + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">Energy (keV)</text>"#,
        ml + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        xml_escape(title)
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fwhm_constant() {
        let exact = 2.0 * (2.0 * std::f64::consts::LN_2).sqrt();
        assert!((FWHM_PER_SIGMA - exact).abs() < 1e-15);
    }

    #[test]
    fn empty_and_single_entry() {
        let s = histogram(&[], 0.0, 10.0, 5).unwrap();
        assert!(s.counts.iter().all(|&c| c == 0));
        let s = histogram(&[5.0], 0.0, 10.0, 5).unwrap();
        assert_eq!(s.counts, vec![0, 0, 1, 0, 0]);
    }

    #[test]
    fn out_of_range_entries_are_separate() {
        let s = histogram(&[-1.0, 0.0, 9.999, 10.0, 11.0], 0.0, 10.0, 10).unwrap();
        assert_eq!(s.entries(), 2);
        assert_eq!((s.underflow, s.overflow), (1, 2));
    }

    #[test]
    fn invalid_histograms() {
        assert!(histogram(&[], 1.0, 1.0, 3).is_err());
        assert!(histogram(&[], 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn merge_requires_same_binning() {
        let mut a = histogram(&[1.0], 0.0, 10.0, 10).unwrap();
        let b = histogram(&[1.0], 0.0, 10.0, 5).unwrap();
        assert!(a.merge(&b).is_err());
    }

    #[test]
    fn exact_gaussian_is_recovered() {
        let g = GaussianFit {
            mu: 511.0,
            sigma: 30.0,
            amplitude: 1000.0,
        };
        let x: Vec<f64> = (0..200).map(|i| 3.0 + 6.0 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&x| g.eval(x)).collect();
        let fit = fit_gaussian_xy(&x, &y, (450.0, 650.0)).unwrap();
        assert!((fit.mu - 511.0).abs() <= 1e-6 * 511.0);
        assert!((fit.sigma - 30.0).abs() <= 1e-6 * 30.0);
        assert!((fit.amplitude - 1000.0).abs() <= 1e-6 * 1000.0);
    }

    #[test]
    fn flat_spectrum_is_rejected() {
        let x: Vec<f64> = (0..200).map(|i| 3.0 + 6.0 * i as f64).collect();
        let y = vec![50.0; 200];
        assert!(matches!(
            fit_gaussian_xy(&x, &y, (450.0, 650.0)),
            Err(Error::Fit { .. })
        ));
    }

    #[test]
    fn constructed_resolution_ten_percent() {
        let fit = GaussianFit {
            mu: 511.0,
            sigma: 21.7,
            amplitude: 1.0,
        };
        let r = ResolutionReport::from_fit("x", &fit, DEFAULT_WINDOW, 0);
        assert!((r.fwhm - 51.1).abs() < 0.05, "{}", r.fwhm);
        assert!(
            (r.resolution_pct - 10.0).abs() < 0.01,
            "{}",
            r.resolution_pct
        );
    }

    #[test]
    fn all_outside_window() {
        let e = vec![100.0; 500];
        assert_eq!(count_in_window(&e, DEFAULT_WINDOW), 0);
        assert!(resolution_report(&e, DEFAULT_WINDOW, "x", Binning::default()).is_err());
    }

    #[test]
    fn window_is_closed() {
        assert_eq!(
            count_in_window(&[450.0, 650.0, 449.999, 650.001], DEFAULT_WINDOW),
            2
        );
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = histogram(&[500.0, 510.0, 520.0], 0.0, 1200.0, 200).unwrap();
        let g = GaussianFit {
            mu: 510.0,
            sigma: 10.0,
            amplitude: 1.0,
        };
        let svg = render_svg(&s, Some(&g), DEFAULT_WINDOW, "a <b>");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt;b&gt;"));
        assert!(svg.contains("polyline"));
    }
}
