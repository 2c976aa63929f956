//! Derivative-free helpers: BFGS with finite-difference gradients and golden-section search.

use nalgebra::{DMatrix, DVector};

use crate::error::{DsmError, IterationRecord, Result};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when the (projected) gradient ∞-norm falls below this value.
    pub grad_tol: f64,
    /// Relative finite-difference step, scaled by `max(1, |x_j|)`.
    pub fd_step: f64,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Cap on the step length of any single coordinate.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            fd_step: 1e-5,
            lower: None,
            upper: None,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

fn clamp(x: &mut DVector<f64>, opts: &BfgsOptions) {
    for i in 0..x.len() {
        if let Some(lo) = &opts.lower {
            x[i] = x[i].max(lo[i]);
        }
        if let Some(hi) = &opts.upper {
            x[i] = x[i].min(hi[i]);
        }
    }
}

/// Central-difference gradient.
pub fn fd_gradient<F>(f: &mut F, x: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

fn projected_norm(x: &DVector<f64>, g: &DVector<f64>, opts: &BfgsOptions) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..x.len() {
        let at_lo = opts.lower.as_ref().is_some_and(|lo| x[i] <= lo[i] && g[i] > 0.0);
        let at_hi = opts.upper.as_ref().is_some_and(|hi| x[i] >= hi[i] && g[i] < 0.0);
        if !(at_lo || at_hi) {
            m = m.max(g[i].abs());
        }
    }
    m
}

/// Minimize `f` by BFGS with an Armijo backtracking line search.
pub fn minimize_bfgs<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions, what: &str) -> Result<BfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0;
    clamp(&mut x, opts);
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Err(DsmError::numerical(format!("{what}: objective not finite at start")));
    }
    let mut g = fd_gradient(&mut f, &x, opts.fd_step)?;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut trace = Vec::new();
    let mut resets = 0;

    for iter in 0..opts.max_iter {
        let gnorm = projected_norm(&x, &g, opts);
        trace.push(IterationRecord {
            iteration: iter,
            objective: fx,
            gradient_norm: gnorm,
        });
        if gnorm < opts.grad_tol {
            return Ok(BfgsResult {
                x,
                value: fx,
                gradient: g,
                iterations: iter,
                trace,
            });
        }

        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // components pushing into an active bound cannot move
        for i in 0..n {
            let at_lo = opts.lower.as_ref().is_some_and(|lo| x[i] <= lo[i] && dir[i] < 0.0);
            let at_hi = opts.upper.as_ref().is_some_and(|hi| x[i] >= hi[i] && dir[i] > 0.0);
            if at_lo || at_hi {
                dir[i] = 0.0;
            }
        }
        let longest = dir.amax();
        if longest > opts.max_step {
            dir *= opts.max_step / longest;
        }

        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn = &x + &dir * step;
            clamp(&mut xn, opts);
            if (&xn - &x).amax() == 0.0 {
                break;
            }
            let fxn = f(&xn)?;
            if fxn.is_finite() && fxn < fx && fxn <= fx + 1e-4 * step * slope.min(0.0) {
                accepted = Some((xn, fxn));
                break;
            }
            step *= 0.5;
        }

        let Some((xn, fxn)) = accepted else {
            if resets < 2 && hinv != DMatrix::identity(n, n) {
                resets += 1;
                hinv = DMatrix::identity(n, n);
                continue;
            }
            // No descent possible: accept a near-stationary point, otherwise fail.
            if gnorm < 1e3 * opts.grad_tol || gnorm < 1e-8 * fx.abs().max(1.0) {
                return Ok(BfgsResult {
                    x,
                    value: fx,
                    gradient: g,
                    iterations: iter,
                    trace,
                });
            }
            return Err(DsmError::NonConvergence {
                what: format!("{what} (line search failed)"),
                iterations: iter,
                trace,
            });
        };

        let gn = fd_gradient(&mut f, &xn, opts.fd_step)?;
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // Sherman–Morrison form of the BFGS inverse update.
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = xn;
        fx = fxn;
        g = gn;
    }
    Err(DsmError::NonConvergence {
        what: what.to_string(),
        iterations: opts.max_iter,
        trace,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GoldenResult {
    pub x: f64,
    pub value: f64,
    pub at_lower: bool,
    pub at_upper: bool,
    pub evaluations: usize,
}

/// Minimize a unimodal function on `[lo, hi]` to an interval width of `tol`.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<GoldenResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    let ratio = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut evals = 2;
    while (b - a) > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d)?;
        }
        evals += 1;
    }
    let (x, value) = if fc < fd { (c, fc) } else { (d, fd) };
    Ok(GoldenResult {
        x,
        value,
        at_lower: (x - lo) < 2.0 * tol,
        at_upper: (hi - x) < 2.0 * tol,
        evaluations: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_finds_rosenbrock_minimum() {
        let f = |x: &DVector<f64>| -> Result<f64> {
            Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        };
        let opts = BfgsOptions {
            grad_tol: 1e-7,
            fd_step: 1e-6,
            ..Default::default()
        };
        let r = minimize_bfgs(f, DVector::from_vec(vec![-1.2, 1.0]), &opts, "rosenbrock").unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!((r.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn bfgs_respects_bounds() {
        let f = |x: &DVector<f64>| -> Result<f64> { Ok((x[0] - 3.0).powi(2)) };
        let opts = BfgsOptions {
            upper: Some(vec![1.0]),
            ..Default::default()
        };
        let r = minimize_bfgs(f, DVector::from_vec(vec![0.0]), &opts, "bounded").unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bfgs_reports_trace_on_failure() {
        let f = |x: &DVector<f64>| -> Result<f64> { Ok(-x[0]) };
        let opts = BfgsOptions {
            max_iter: 5,
            ..Default::default()
        };
        let err = minimize_bfgs(f, DVector::from_vec(vec![0.0]), &opts, "unbounded").unwrap_err();
        match err {
            DsmError::NonConvergence { trace, .. } => assert_eq!(trace.len(), 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn golden_section_quadratic() {
        let r = golden_section(|x| Ok((x - 0.3).powi(2)), -2.0, 2.0, 1e-6).unwrap();
        assert!((r.x - 0.3).abs() < 1e-6);
        assert!(!r.at_lower && !r.at_upper);
        let r = golden_section(Ok, -2.0, 2.0, 1e-6).unwrap();
        assert!(r.at_lower);
    }
}
