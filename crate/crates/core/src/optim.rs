//! Box-constrained quasi-Newton minimization with multiple starts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Stop when the projected gradient's largest component falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of the objective falls below this.
    pub f_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iterations: 200,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Projected BFGS. `objective` returns the value and gradient; an error at a
/// trial point is treated as an infinite value, an error at `x0` is returned.
pub fn minimize_box(
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &OptimOptions,
) -> Result<OptimResult> {
    let n = x0.len();
    if lo.len() != n || hi.len() != n || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::Config("inconsistent optimization bounds".into()));
    }
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::Fit("objective is not finite at the start point".into()));
    }
    let width: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut small_steps = 0;
    for it in 0..opts.max_iterations {
        // variables held at a bound by the gradient
        let fixed: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
            .collect();
        let pg = (0..n).map(|i| if fixed[i] { 0.0 } else { g[i].abs() }).fold(0.0, f64::max);
        if pg <= opts.grad_tol {
            return Ok(OptimResult { x, f, iterations: it, converged: true });
        }
        let gv = DVector::from_fn(n, |i, _| if fixed[i] { 0.0 } else { g[i] });
        let mut d = -(&hinv * &gv);
        for i in 0..n {
            if fixed[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            d = -gv.clone();
        }
        let mut step = 1.0;
        if fresh {
            // first step after a reset moves at most a tenth of the box
            let ratio = (0..n)
                .filter(|&i| d[i] != 0.0 && width[i] > 0.0)
                .map(|i| 0.1 * width[i] / d[i].abs())
                .fold(f64::INFINITY, f64::min);
            step = ratio.min(1.0);
        }
        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = (0..n).map(|i| x[i] + step * d[i]).collect();
            project(&mut xt, lo, hi);
            let dec: f64 = (0..n).map(|i| g[i] * (xt[i] - x[i])).sum();
            if xt == x {
                break;
            }
            if let Ok((ft, gt)) = objective(&xt) {
                if ft.is_finite() && ft <= f + 1e-4 * dec {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                return Ok(OptimResult { x, f, iterations: it, converged: false });
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s = DVector::from_fn(n, |i, _| xn[i] - x[i]);
        let y = DVector::from_fn(n, |i, _| gnew[i] - g[i]);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // scale the initial inverse Hessian
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        let rel = (f - fnew).abs() / (1.0 + f.abs());
        x = xn;
        f = fnew;
        g = gnew;
        if rel < opts.f_tol {
            small_steps += 1;
            if small_steps >= 2 {
                return Ok(OptimResult { x, f, iterations: it + 1, converged: true });
            }
        } else {
            small_steps = 0;
        }
    }
    Ok(OptimResult {
        x,
        f,
        iterations: opts.max_iterations,
        converged: false,
    })
}

/// Outcome of one start of [`multistart`].
#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub start: Vec<f64>,
    pub result: std::result::Result<OptimResult, String>,
}

/// Minimize from every start; the lowest objective wins, ties going to the
/// earlier start.
pub fn multistart(
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    starts: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    opts: &OptimOptions,
) -> (Option<(usize, OptimResult)>, Vec<StartOutcome>) {
    let mut best: Option<(usize, OptimResult)> = None;
    let mut log = Vec::with_capacity(starts.len());
    for (i, s) in starts.iter().enumerate() {
        let r = minimize_box(&mut objective, s, lo, hi, opts);
        if let Ok(res) = &r {
            if best.as_ref().is_none_or(|(_, b)| res.f < b.f) {
                best = Some((i, res.clone()));
            }
        }
        log.push(StartOutcome {
            start: s.clone(),
            result: r.map_err(|e| e.to_string()),
        });
    }
    (best, log)
}

/// Central finite-difference gradient, one-sided at the box faces.
pub fn fd_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: &[f64],
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let a = (x[i] - h[i]).max(lo[i]);
        let b = (x[i] + h[i]).min(hi[i]);
        xp[i] = b;
        let fb = f(&xp)?;
        xp[i] = a;
        let fa = f(&xp)?;
        xp[i] = x[i];
        g[i] = if b > a { (fb - fa) / (b - a) } else { 0.0 };
    }
    Ok(g)
}
