//! Box-constrained quasi-Newton minimisation with numerical gradients.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BoxOptions {
    pub max_iters: usize,
    /// Projected-gradient infinity-norm tolerance.
    pub gtol: f64,
    /// Relative objective decrease below which an iteration counts as stalled.
    pub ftol: f64,
    /// Central-difference step scale per variable.
    pub fd_step: f64,
}

impl Default for BoxOptions {
    fn default() -> Self {
        Self { max_iters: 300, gtol: 1e-7, ftol: 1e-12, fd_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub f_start: f64,
    pub iters: usize,
    pub evals: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Central differences; one-sided at an active bound.
pub fn numerical_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    lo: &[f64],
    hi: &[f64],
    h: f64,
    evals: &mut usize,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        if lo[i] == hi[i] {
            continue;
        }
        let step = h * x[i].abs().max(1.0);
        let up = (x[i] + step).min(hi[i]);
        let dn = (x[i] - step).max(lo[i]);
        xp[i] = up;
        let fu = f(&xp);
        xp[i] = dn;
        let fd = f(&xp);
        xp[i] = x[i];
        *evals += 2;
        g[i] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
    }
    g
}

fn free_mask(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<bool> {
    (0..x.len())
        .map(|i| {
            if lo[i] == hi[i] {
                return false;
            }
            let at_lo = x[i] <= lo[i] && g[i] > 0.0;
            let at_hi = x[i] >= hi[i] && g[i] < 0.0;
            !(at_lo || at_hi)
        })
        .collect()
}

/// Projected BFGS with Armijo backtracking. Every accepted step decreases
/// the objective, so the result never exceeds the starting value.
pub fn minimize_box<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &BoxOptions,
) -> LocalResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp_into(&mut x, lo, hi);
    let mut evals = 1;
    let mut fx = f(&x);
    let f_start = fx;
    let mut g = numerical_gradient(&mut f, &x, lo, hi, opts.fd_step, &mut evals);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut free = free_mask(&x, &g, lo, hi);
    let mut stalls = 0;
    let mut converged = false;
    let mut iters = 0;

    while iters < opts.max_iters {
        iters += 1;
        let pg: f64 = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg <= opts.gtol {
            converged = true;
            break;
        }
        let gv = DVector::from_iterator(n, (0..n).map(|i| if free[i] { g[i] } else { 0.0 }));
        let mut d = -(&hinv * &gv);
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            scaled = false;
            d = -gv.clone();
        }
        if !scaled {
            let dn = d.amax();
            if dn > 0.0 {
                d *= 0.05 / dn;
            }
        }

        let slope = d.dot(&gv);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
            clamp_into(&mut xn, lo, hi);
            let fnew = f(&xn);
            evals += 1;
            let actual: f64 = (0..n).map(|i| (xn[i] - x[i]) * g[i]).sum();
            if fnew.is_finite() && fnew <= fx + 1e-4 * actual.min(alpha * slope).min(0.0) && fnew < fx {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if scaled {
                hinv = DMatrix::identity(n, n);
                scaled = false;
                continue;
            }
            converged = true;
            break;
        };
        let gn = numerical_gradient(&mut f, &xn, lo, hi, opts.fd_step, &mut evals);
        let s = DVector::from_iterator(n, (0..n).map(|i| xn[i] - x[i]));
        let y = DVector::from_iterator(n, (0..n).map(|i| gn[i] - g[i]));
        let sy = s.dot(&y);
        let rel = (fx - fnew) / fx.abs().max(1e-12);
        x = xn;
        fx = fnew;
        g = gn;
        let new_free = free_mask(&x, &g, lo, hi);
        if new_free != free {
            hinv = DMatrix::identity(n, n);
            scaled = false;
            free = new_free;
        } else if sy > 1e-14 * s.norm() * y.norm() {
            if !scaled {
                hinv *= sy / y.dot(&y);
                scaled = true;
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * y.transpose();
            let b = &i - rho * &y * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        if rel < opts.ftol {
            stalls += 1;
            if stalls >= 3 {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    LocalResult { x, f: fx, f_start, iters, evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize_box(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &BoxOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!(r.f <= r.f_start);
    }

    #[test]
    fn active_bound() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2);
        let r = minimize_box(f, &[0.0, 0.0], &[-1.0, -0.5], &[1.0, 1.0], &BoxOptions::default());
        assert_eq!(r.x[0], 1.0);
        assert_eq!(r.x[1], -0.5);
    }

    #[test]
    fn fixed_variable_untouched() {
        let f = |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] - 2.0).powi(2);
        let r = minimize_box(f, &[0.0, 0.3], &[-5.0, 0.3], &[5.0, 0.3], &BoxOptions::default());
        assert_eq!(r.x[1], 0.3);
        assert!((r.x[0] - 2.0).abs() < 1e-5);
    }
}
