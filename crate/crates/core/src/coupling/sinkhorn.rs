//! Log-domain Sinkhorn with ε-scaling and exact-marginal rounding.

use nalgebra::DMatrix;

use crate::error::{Result, ScalpelError};
use crate::linalg::log_sum_exp;

const STAGE_TOL: f64 = 1e-6;
const FINAL_TOL: f64 = 1e-10;

fn plan(cost: &DMatrix<f64>, f: &[f64], g: &[f64], reg: f64) -> DMatrix<f64> {
    DMatrix::from_fn(cost.nrows(), cost.ncols(), |i, j| ((f[i] + g[j] - cost[(i, j)]) / reg).exp())
}

fn col_residual(cost: &DMatrix<f64>, f: &[f64], g: &[f64], reg: f64, b: &[f64]) -> f64 {
    let p = plan(cost, f, g, reg);
    (0..cost.ncols()).map(|j| (p.column(j).sum() - b[j]).abs()).sum()
}

/// Entropic plan for `min ⟨C, P⟩ − reg·H(P)` with marginals `a`, `b`.
///
/// `max_iter` bounds the total number of row/column sweeps over all scaling
/// stages.
pub fn solve(cost: &DMatrix<f64>, a: &[f64], b: &[f64], reg: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let (m, n) = cost.shape();
    let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let spread = cost.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
    let mut stage_reg = spread.max(reg);
    let mut iterations = 0;
    let mut buf = vec![0.0; m.max(n)];
    loop {
        let last = stage_reg <= reg;
        let tol = if last { FINAL_TOL } else { STAGE_TOL };
        loop {
            for i in 0..m {
                for j in 0..n {
                    buf[j] = (g[j] - cost[(i, j)]) / stage_reg;
                }
                f[i] = stage_reg * (la[i] - log_sum_exp(&buf[..n]));
            }
            for j in 0..n {
                for i in 0..m {
                    buf[i] = (f[i] - cost[(i, j)]) / stage_reg;
                }
                g[j] = stage_reg * (lb[j] - log_sum_exp(&buf[..m]));
            }
            iterations += 1;
            // columns are exact after the g sweep; rows carry the error
            let p = plan(cost, &f, &g, stage_reg);
            let residual: f64 = (0..m).map(|i| (p.row(i).sum() - a[i]).abs()).sum();
            if residual <= tol {
                break;
            }
            if iterations >= max_iter {
                return Err(ScalpelError::SinkhornNotConverged { residual, iterations });
            }
        }
        if last {
            break;
        }
        stage_reg = (stage_reg * 0.5).max(reg);
    }
    debug_assert!(col_residual(cost, &f, &g, reg, b) < 1e-8);
    Ok(round_to_marginals(plan(cost, &f, &g, reg), a, b))
}

/// Project an approximately feasible plan onto the exact marginals.
pub fn round_to_marginals(mut p: DMatrix<f64>, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    let (m, n) = p.shape();
    for i in 0..m {
        let s = p.row(i).sum();
        if s > a[i] {
            let scale = a[i] / s;
            p.row_mut(i).scale_mut(scale);
        }
    }
    for j in 0..n {
        let s = p.column(j).sum();
        if s > b[j] {
            let scale = b[j] / s;
            p.column_mut(j).scale_mut(scale);
        }
    }
    let ea: Vec<f64> = (0..m).map(|i| (a[i] - p.row(i).sum()).max(0.0)).collect();
    let eb: Vec<f64> = (0..n).map(|j| (b[j] - p.column(j).sum()).max(0.0)).collect();
    let total: f64 = ea.iter().sum();
    if total > 0.0 {
        for i in 0..m {
            for j in 0..n {
                p[(i, j)] += ea[i] * eb[j] / total;
            }
        }
    }
    p
}
