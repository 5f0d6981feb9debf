use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Iteration cap for the Riccati fixed point.
pub const DARE_MAX_ITERS: usize = 1_000_000;

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Domain("inconsistent DARE dimensions".into()));
    }
    Ok(())
}

/// `(R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let ch = s.cholesky().ok_or(Error::Singular("R + BᵀPB"))?;
    Ok(ch.solve(&(btp * a)))
}

/// Residual `AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = lqr_gain(a, b, r, p)?;
    let atp = a.transpose() * p;
    Ok(&atp * a - p - &atp * b * k + q)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Value iteration `P ← AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q` from `P = Q` until
/// the step is below `1e-12·max(1, ‖P‖)`.
pub fn dare_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(a, b, q, r)?;
    if r.clone().cholesky().is_none() {
        return Err(Error::Domain("R must be positive definite".into()));
    }
    if q.symmetric_eigenvalues().iter().any(|&v| v < -1e-12 * q.norm().max(1.0)) {
        return Err(Error::Domain("Q must be positive semidefinite".into()));
    }
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITERS {
        let k = lqr_gain(a, b, r, &p)?;
        let atp = a.transpose() * &p;
        let mut next = &atp * a - &atp * b * &k + q;
        next = (&next + next.transpose()) * 0.5;
        let step = (&next - &p).norm();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if step <= 1e-12 * p.norm().max(1.0) {
            let p = polish(a, b, q, r, p)?;
            let k = lqr_gain(a, b, r, &p)?;
            let rho = spectral_radius(&(a - b * &k));
            if rho >= 1.0 {
                return Err(Error::NoConvergence(format!("closed-loop spectral radius {rho} >= 1")));
            }
            return Ok((p, k));
        }
    }
    Err(Error::NoConvergence(format!("Riccati iteration did not settle in {DARE_MAX_ITERS} steps")))
}

/// Solves `P = AᵀPA + W` through the Kronecker form; `None` when singular.
fn stein(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let mut m = DMatrix::identity(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    // vec(AᵀPA)[i + n·j] = Σ Aᵀ[i,k] P[k,l] A[l,j]
                    m[(i + n * j, k + n * l)] -= at[(i, k)] * a[(l, j)];
                }
            }
        }
    }
    let x = m.lu().solve(&DVector::from_column_slice(w.as_slice()))?;
    let p = DMatrix::from_column_slice(n, n, x.as_slice());
    Some((&p + p.transpose()) * 0.5)
}

/// Newton (Hewer) refinement of a near-converged iterate. Kept only while it
/// lowers the Riccati residual.
fn polish(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, mut p: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() > 16 {
        return Ok(p);
    }
    let mut res = riccati_residual(a, b, q, r, &p)?.norm();
    for _ in 0..4 {
        let k = lqr_gain(a, b, r, &p)?;
        let ac = a - b * &k;
        let w = q + k.transpose() * r * &k;
        let Some(next) = stein(&ac, &w) else { break };
        let next_res = riccati_residual(a, b, q, r, &next)?.norm();
        if !(next_res < res) {
            break;
        }
        p = next;
        res = next_res;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_golden_ratio() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (p, k) = dare_gain(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - phi).abs() < 1e-9);
        assert!((k[(0, 0)] - (phi - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_gives_zero_gain() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let (p, k) = dare_gain(&a, &b, &DMatrix::zeros(1, 1), &b).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
        assert_eq!(k[(0, 0)], 0.0);
    }
}
