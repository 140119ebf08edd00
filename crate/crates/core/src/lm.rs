//! Small dense Levenberg-Marquardt solver.
//!
//! Problems here have 3 or 4 parameters and a handful to a few hundred
//! residuals, so the normal equations are formed explicitly and solved with
//! nalgebra's LU.

use nalgebra::{DMatrix, DVector};

pub(crate) trait Problem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    /// Writes residuals (model - data) into `out`.
    fn residuals(&self, p: &[f64], out: &mut [f64]);
    /// Writes the row-major Jacobian of the residuals into `jac`.
    fn jacobian(&self, p: &[f64], jac: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Settings {
    pub max_iter: usize,
    /// Relative change in the sum of squares that counts as converged.
    pub rel_tol: f64,
    /// Sum of squares at or below which the fit is exact.
    pub abs_tol: f64,
    /// Largest accepted step, relative to `|p| + 1`, that counts as converged.
    pub step_tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-8,
            abs_tol: 1e-24,
            step_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub params: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub(crate) fn minimize<P: Problem>(problem: &P, init: &[f64], settings: Settings) -> Outcome {
    let n = problem.n_params();
    let m = problem.n_residuals();
    let mut p = init.to_vec();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; m];

    problem.residuals(&p, &mut r);
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return Outcome {
            params: p,
            cost,
            converged: false,
        };
    }
    let mut lambda = 1e-3;

    for _ in 0..settings.max_iter {
        if cost <= settings.abs_tol {
            return Outcome {
                params: p,
                cost,
                converged: true,
            };
        }
        problem.jacobian(&p, &mut jac);
        let j = DMatrix::from_row_slice(m, n, &jac);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * DVector::from_column_slice(&r);

        // retry with growing damping until the cost drops
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let step = a.lu().solve(&(-&g));
            let accepted = match step {
                Some(step) => {
                    for i in 0..n {
                        trial[i] = p[i] + step[i];
                    }
                    problem.residuals(&trial, &mut r_trial);
                    let c = sum_sq(&r_trial);
                    if c.is_finite() && c < cost {
                        let rel = (cost - c) / cost;
                        let moved = (0..n)
                            .map(|i| step[i].abs() / (p[i].abs() + 1.0))
                            .fold(0.0, f64::max);
                        p.copy_from_slice(&trial);
                        r.copy_from_slice(&r_trial);
                        cost = c;
                        lambda = (lambda * 0.1).max(1e-15);
                        Some((rel, moved))
                    } else {
                        None
                    }
                }
                None => None,
            };
            match accepted {
                Some((rel, moved)) => {
                    if (rel < settings.rel_tol && moved < settings.step_tol)
                        || cost <= settings.abs_tol
                    {
                        return Outcome {
                            params: p,
                            cost,
                            converged: true,
                        };
                    }
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        // no descent direction left: stationary point
                        return Outcome {
                            params: p,
                            cost,
                            converged: true,
                        };
                    }
                }
            }
        }
    }
    Outcome {
        params: p,
        cost,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = a * exp(b x)
    struct ExpProblem {
        x: Vec<f64>,
        y: Vec<f64>,
    }

    impl Problem for ExpProblem {
        fn n_params(&self) -> usize {
            2
        }
        fn n_residuals(&self) -> usize {
            self.x.len()
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for (i, (&x, &y)) in self.x.iter().zip(&self.y).enumerate() {
                out[i] = p[0] * (p[1] * x).exp() - y;
            }
        }
        fn jacobian(&self, p: &[f64], jac: &mut [f64]) {
            for (i, &x) in self.x.iter().enumerate() {
                let e = (p[1] * x).exp();
                jac[2 * i] = e;
                jac[2 * i + 1] = p[0] * x * e;
            }
        }
    }

    #[test]
    fn recovers_exponential() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let y = x.iter().map(|x| 2.5 * (-0.7 * x).exp()).collect();
        let out = minimize(&ExpProblem { x, y }, &[1.0, -0.1], Settings::default());
        assert!(out.converged);
        assert!((out.params[0] - 2.5).abs() < 1e-8);
        assert!((out.params[1] + 0.7).abs() < 1e-8);
    }
}
