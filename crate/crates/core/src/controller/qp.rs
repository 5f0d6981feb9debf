use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_log, Mat3, Vec3};

/// Result of a box-constrained convex QP.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    /// Infinity norm of the projected KKT stationarity residual.
    pub kkt: f64,
    pub iters: usize,
}

fn kkt_residual(h: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let g = h * x + c;
    let mut r: f64 = 0.0;
    for i in 0..x.len() {
        let v = if lo[i] == hi[i] {
            0.0
        } else if x[i] <= lo[i] {
            (-g[i]).max(0.0)
        } else if x[i] >= hi[i] {
            g[i].max(0.0)
        } else {
            g[i].abs()
        };
        r = r.max(v);
    }
    r
}

/// Minimum-norm least-squares solve of the free block.
fn solve_free(h: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = h.clone().svd(true, true);
    let tol = 1e-13 * svd.singular_values.max().max(1e-300);
    svd.solve(rhs, tol).unwrap_or_else(|_| DVector::zeros(rhs.len()))
}

/// Primal active-set method for `min ½xᵀHx + cᵀx` s.t. `lo ≤ x ≤ hi`,
/// with `H` symmetric positive semidefinite.
pub fn box_qp(h: &DMatrix<f64>, c: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<BoxQpSolution> {
    let n = c.len();
    if h.shape() != (n, n) || lo.len() != n || hi.len() != n {
        return Err(Error::Domain("box QP dimensions disagree".into()));
    }
    for i in 0..n {
        if lo[i] > hi[i] {
            return Err(Error::Infeasible(format!("joint {i}: lower {} > upper {}", lo[i], hi[i])));
        }
    }
    // 0: free, -1: at lower, +1: at upper
    let mut x = DVector::from_fn(n, |i, _| 0.0f64.clamp(lo[i], hi[i]));
    let mut act: Vec<i8> = (0..n)
        .map(|i| if lo[i] == hi[i] { -1 } else if x[i] <= lo[i] { -1 } else if x[i] >= hi[i] { 1 } else { 0 })
        .collect();
    let mut iters = 0;
    for _ in 0..(50 * n + 50) {
        iters += 1;
        let free: Vec<usize> = (0..n).filter(|&i| act[i] == 0).collect();
        let mut target = x.clone();
        if !free.is_empty() {
            let g = h * &x + c;
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
            let d = solve_free(&hff, &(-gf));
            for (a, &i) in free.iter().enumerate() {
                target[i] = x[i] + d[a];
            }
        }
        // longest feasible step toward the free-block minimiser
        let mut alpha = 1.0;
        let mut block = None;
        for &i in &free {
            let d = target[i] - x[i];
            if d > 0.0 && target[i] > hi[i] {
                let a = (hi[i] - x[i]) / d;
                if a < alpha {
                    alpha = a;
                    block = Some((i, 1));
                }
            } else if d < 0.0 && target[i] < lo[i] {
                let a = (lo[i] - x[i]) / d;
                if a < alpha {
                    alpha = a;
                    block = Some((i, -1));
                }
            }
        }
        for &i in &free {
            x[i] = (x[i] + alpha * (target[i] - x[i])).clamp(lo[i], hi[i]);
        }
        if let Some((i, s)) = block {
            x[i] = if s > 0 { hi[i] } else { lo[i] };
            act[i] = s;
            continue;
        }
        let g = h * &x + c;
        let mut worst = None;
        let mut wv = 0.0;
        for i in 0..n {
            if lo[i] == hi[i] {
                continue;
            }
            let v = match act[i] {
                -1 => -g[i],
                1 => g[i],
                _ => 0.0,
            };
            if v > wv {
                wv = v;
                worst = Some(i);
            }
        }
        match worst {
            Some(i) if wv > 1e-14 * (1.0 + g.amax()) => act[i] = 0,
            _ => break,
        }
    }
    let kkt = kkt_residual(h, c, &x, lo, hi);
    Ok(BoxQpSolution { x, kkt, iters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacroQPParams {
    pub w_p: [f64; 3],
    pub lambda_r: f64,
    pub lambda_dq: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Cap on `‖J q̇‖₂`.
    pub v_max: f64,
    pub r_goal: Mat3,
    pub dt: f64,
}

impl Default for MacroQPParams {
    fn default() -> Self {
        Self {
            w_p: [1e4; 3],
            lambda_r: 0.0,
            lambda_dq: 1e-6,
            lower: vec![-20.0; 3],
            upper: vec![20.0; 3],
            v_max: 20.0,
            r_goal: Mat3::identity(),
            dt: super::DT,
        }
    }
}

impl MacroQPParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Config(format!("joint box must have {n} entries")));
        }
        if self.w_p.iter().any(|&w| !(w >= 0.0)) || !(self.lambda_r >= 0.0) || !(self.lambda_dq >= 0.0) {
            return Err(Error::Config("QP weights must be non-negative".into()));
        }
        if !(self.v_max > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("v_max and dt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroQpSolution {
    pub qdot: DVector<f64>,
    pub kkt: f64,
    /// The Cartesian cap required post-hoc scaling.
    pub scaled: bool,
    pub objective: f64,
}

/// Quadratic model `½q̇ᵀHq̇ + cᵀq̇ + k` of the macro objective.
pub fn macro_objective_terms(
    jp: &DMatrix<f64>,
    dp_adm: &Vec3,
    q: &[f64],
    params: &MacroQPParams,
    rotation_of: &dyn Fn(&[f64]) -> Mat3,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = jp.ncols();
    let dt = params.dt;
    let w = DMatrix::from_diagonal(&DVector::from_row_slice(&params.w_p));
    let b = DVector::from_row_slice(dp_adm.as_slice());
    let a = jp * dt;
    let mut h = a.transpose() * &w * &a * 2.0 + DMatrix::identity(n, n) * (2.0 * params.lambda_dq);
    let mut c = -(a.transpose() * &w * &b) * 2.0;
    let mut k = (b.transpose() * &w * &b)[(0, 0)];
    if params.lambda_r > 0.0 {
        let res = |qq: &[f64]| so3_log(&(params.r_goal.transpose() * rotation_of(qq)));
        let r0 = res(q);
        let mut jr = DMatrix::zeros(3, n);
        let mut qq = q.to_vec();
        for j in 0..n {
            let hstep = 1e-6;
            qq[j] = q[j] + hstep;
            let up = res(&qq);
            qq[j] = q[j] - hstep;
            let dn = res(&qq);
            qq[j] = q[j];
            let col = (up - dn) / (2.0 * hstep);
            for i in 0..3 {
                jr[(i, j)] = col[i];
            }
        }
        let ar = jr * dt;
        let r0v = DVector::from_row_slice(r0.as_slice());
        h += ar.transpose() * &ar * (2.0 * params.lambda_r);
        c += ar.transpose() * &r0v * (2.0 * params.lambda_r);
        k += params.lambda_r * r0.norm_squared();
    }
    (h, c, k)
}

/// Joint velocities tracking the admittance displacement, with an optional
/// orientation goal, box limits and a Cartesian speed cap.
pub fn macro_qp(
    jp: &DMatrix<f64>,
    j: &DMatrix<f64>,
    dp_adm: &Vec3,
    q: &[f64],
    params: &MacroQPParams,
    rotation_of: &dyn Fn(&[f64]) -> Mat3,
) -> Result<MacroQpSolution> {
    let n = jp.ncols();
    if jp.nrows() != 3 || j.ncols() != n || q.len() != n {
        return Err(Error::Domain("Jacobian shapes disagree with joint count".into()));
    }
    params.validate(n)?;
    let (h, c, k) = macro_objective_terms(jp, dp_adm, q, params, rotation_of);
    let lo = DVector::from_row_slice(&params.lower);
    let hi = DVector::from_row_slice(&params.upper);
    let sol = box_qp(&h, &c, &lo, &hi)?;
    let mut qdot = sol.x;
    let objective = 0.5 * (qdot.transpose() * &h * &qdot)[(0, 0)] + c.dot(&qdot) + k;
    let speed = (j * &qdot).norm();
    let scaled = speed > params.v_max;
    if scaled {
        qdot *= params.v_max / speed;
        for i in 0..n {
            qdot[i] = qdot[i].clamp(lo[i], hi[i]);
        }
    }
    Ok(MacroQpSolution { qdot, kkt: sol.kkt, scaled, objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_least_squares() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let c = DVector::from_vec(vec![-2.0, -4.0]);
        let s = box_qp(&h, &c, &DVector::from_element(2, -9.0), &DVector::from_element(2, 9.0)).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
        assert!(s.kkt < 1e-12);
    }

    #[test]
    fn infeasible_box() {
        let h = DMatrix::identity(1, 1);
        let c = DVector::zeros(1);
        assert!(box_qp(&h, &c, &DVector::from_element(1, 1.0), &DVector::from_element(1, 0.0)).is_err());
    }
}
