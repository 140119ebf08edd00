//! SiPM saturation correction.
//!
//! The SiPM output saturates with deposited energy as
//! `V(E) = A (1 - exp(-E / (n_cells B)))`. [`correct`] inverts it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SipmCurve {
    /// Saturation output, in measured units.
    #[serde(rename = "A")]
    pub a: f64,
    /// keV per cell.
    #[serde(rename = "B")]
    pub b: f64,
    pub n_cells: u32,
}

impl SipmCurve {
    pub fn new(a: f64, b: f64, n_cells: u32) -> Result<Self> {
        let curve = Self { a, b, n_cells };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0 && self.b.is_finite() && self.b > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "SiPM curve needs A > 0 and B > 0, got A={} B={}",
                self.a, self.b
            )));
        }
        if self.n_cells == 0 {
            return Err(Error::InvalidParameter("n_cells must be >= 1".into()));
        }
        Ok(())
    }

    /// `n_cells * B`, the energy scale of the saturation, keV.
    pub fn energy_scale(&self) -> f64 {
        self.n_cells as f64 * self.b
    }

    pub fn response(&self, e_true: f64) -> f64 {
        response(self, e_true)
    }

    pub fn correct(&self, measured: f64) -> Result<f64> {
        correct(self, measured)
    }
}

/// Measured output for a deposited energy `e_true` (keV).
pub fn response(curve: &SipmCurve, e_true: f64) -> f64 {
    -curve.a * (-e_true / curve.energy_scale()).exp_m1()
}

/// Deposited energy (keV) that produces `measured`.
pub fn correct(curve: &SipmCurve, measured: f64) -> Result<f64> {
    if measured.is_nan() || measured < 0.0 {
        return Err(Error::Domain(format!(
            "measured value {measured} must be non-negative"
        )));
    }
    if measured >= curve.a {
        return Err(Error::Saturation {
            value: measured,
            limit: curve.a,
        });
    }
    Ok(-curve.energy_scale() * (-measured / curve.a).ln_1p())
}

/// `1 - exp(-rate * e)`
fn shape(rate: f64, e: f64) -> f64 {
    -(-rate * e).exp_m1()
}

/// Best amplitude and squared error for a fixed saturation rate.
fn profile(points: &[(f64, f64)], rate: f64) -> (f64, f64) {
    let (mut gm, mut gg) = (0.0, 0.0);
    for &(e, m) in points {
        let g = shape(rate, e);
        gm += g * m;
        gg += g * g;
    }
    let a = gm / gg;
    let sse = points
        .iter()
        .map(|&(e, m)| {
            let r = m - a * shape(rate, e);
            r * r
        })
        .sum();
    (a, sse)
}

/// Least-squares `A`, `B` for known `n_cells`; exact interpolation for two points.
pub fn fit_curve(points: &[(f64, f64)], n_cells: u32) -> Result<SipmCurve> {
    if n_cells == 0 {
        return Err(Error::InvalidParameter("n_cells must be >= 1".into()));
    }
    if points.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 calibration points, got {}",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|&(e, m)| !(e.is_finite() && m.is_finite() && e >= 0.0 && m >= 0.0))
    {
        return Err(Error::InvalidParameter(
            "calibration points must be finite and non-negative".into(),
        ));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    for w in pts.windows(2) {
        if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
            return Err(Error::fit(
                format!(
                    "measured values must increase strictly with energy: ({}, {}) then ({}, {})",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ),
                f64::NAN,
            ));
        }
    }
    let e_max = pts[pts.len() - 1].0;

    // search over x = rate * e_max on a log scale
    let (x_lo, x_hi) = (1e-6f64, 1e3f64);
    let rate_at = |u: f64| u.exp() / e_max;

    let rate = if pts.len() == 2 {
        // ratio m1/m0 = shape(e1)/shape(e0) is monotone in the rate
        let ((e0, m0), (e1, m1)) = (pts[0], pts[1]);
        let h = |u: f64| {
            let r = rate_at(u);
            m1 * shape(r, e0) - m0 * shape(r, e1)
        };
        let (mut lo, mut hi) = (x_lo.ln(), x_hi.ln());
        if h(lo).signum() == h(hi).signum() {
            return Err(Error::fit(
                "points show no saturation consistent with the curve",
                f64::NAN,
            ));
        }
        let sign_lo = h(lo).signum();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid).signum() == sign_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        rate_at(0.5 * (lo + hi))
    } else {
        let grid = 400;
        let us: Vec<f64> = (0..=grid)
            .map(|i| x_lo.ln() + (x_hi.ln() - x_lo.ln()) * i as f64 / grid as f64)
            .collect();
        let sse: Vec<f64> = us.iter().map(|&u| profile(&pts, rate_at(u)).1).collect();
        let best = sse
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if best == 0 || best == grid {
            return Err(Error::fit(
                "saturation rate runs to the edge of the search range",
                sse[best].sqrt(),
            ));
        }
        // golden-section refinement inside the bracketing grid cells
        let (mut a, mut b) = (us[best - 1], us[best + 1]);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let f = |u: f64| profile(&pts, rate_at(u)).1;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        for _ in 0..200 {
            if (b - a).abs() < 1e-14 {
                break;
            }
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d);
            }
        }
        rate_at(0.5 * (a + b))
    };

    let (a, _) = profile(&pts, rate);
    SipmCurve::new(a, 1.0 / (rate * n_cells as f64), n_cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn curve() -> SipmCurve {
        SipmCurve::new(2.0, 0.2, 5676).unwrap()
    }

    #[test]
    fn zero_and_saturation_limit() {
        let c = curve();
        assert_eq!(c.response(0.0), 0.0);
        assert!(c.response(1e9) <= c.a);
        assert!((c.response(1e6) - c.a).abs() < 1e-12);
        assert_eq!(c.correct(0.0).unwrap(), 0.0);
        assert!(matches!(c.correct(c.a), Err(Error::Saturation { .. })));
        assert!(matches!(c.correct(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn small_energy_is_linear() {
        let c = curve();
        let scale = c.energy_scale();
        for i in 1..=20 {
            let e = 0.02 * scale * i as f64 / 20.0;
            let linear = c.a * e / scale;
            // series: 1 - exp(-x) = x - x^2/2 + ..., so relative gap is about x/2 <= 1%
            assert!((c.response(e) - linear).abs() <= 0.01 * linear);
        }
    }

    #[test]
    fn invalid_curves() {
        assert!(SipmCurve::new(0.0, 1.0, 10).is_err());
        assert!(SipmCurve::new(1.0, -1.0, 10).is_err());
        assert!(SipmCurve::new(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn two_points_recover_exactly() {
        let c = curve();
        let pts = [(300.0, c.response(300.0)), (1500.0, c.response(1500.0))];
        let fit = fit_curve(&pts, c.n_cells).unwrap();
        assert!((fit.a - c.a).abs() <= 1e-6 * c.a, "{fit:?}");
        assert!((fit.b - c.b).abs() <= 1e-6 * c.b, "{fit:?}");
    }

    #[test]
    fn equal_energies_fail() {
        let pts = [(511.0, 1.0), (511.0, 1.1), (511.0, 0.9)];
        assert!(fit_curve(&pts, 100).is_err());
    }

    #[test]
    fn non_increasing_measurements_fail() {
        let pts = [(100.0, 1.0), (200.0, 0.9), (300.0, 1.2)];
        assert!(matches!(fit_curve(&pts, 100), Err(Error::Fit { .. })));
    }

    #[test]
    fn noisy_points_recover_within_one_percent() {
        let c = curve();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1e-3).unwrap();
            let pts: Vec<(f64, f64)> = (1..=10)
                .map(|i| {
                    let e = 300.0 * i as f64;
                    (e, c.response(e) * (1.0 + noise.sample(&mut rng)))
                })
                .collect();
            let fit = fit_curve(&pts, c.n_cells).unwrap();
            assert!((fit.a - c.a).abs() <= 0.01 * c.a, "seed {seed}: {fit:?}");
            assert!((fit.b - c.b).abs() <= 0.01 * c.b, "seed {seed}: {fit:?}");
        }
    }

    #[test]
    fn json_field_names() {
        let json = serde_json::to_string(&curve()).unwrap();
        assert_eq!(json, r#"{"A":2.0,"B":0.2,"n_cells":5676}"#);
    }
}
