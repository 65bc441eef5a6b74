//! Dense two-phase tableau simplex with Bland's rule.
//!
//! Slow and general; used to cross-check the transportation solver.

use nalgebra::DMatrix;

use crate::error::{Result, ScalpelError};

const TOL: f64 = 1e-11;

struct Tableau {
    /// Constraint rows; last column is the right-hand side.
    t: DMatrix<f64>,
    basis: Vec<usize>,
    /// Columns allowed to enter.
    active: usize,
}

impl Tableau {
    fn rhs(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[(r, c)];
        let cols = self.t.ncols();
        for k in 0..cols {
            self.t[(r, k)] /= p;
        }
        for i in 0..self.t.nrows() {
            if i == r {
                continue;
            }
            let f = self.t[(i, c)];
            if f != 0.0 {
                for k in 0..cols {
                    let v = self.t[(r, k)];
                    self.t[(i, k)] -= f * v;
                }
            }
        }
        self.basis[r] = c;
    }

    fn run(&mut self, cost: &[f64]) -> Result<()> {
        let rhs = self.rhs();
        for _ in 0..100_000 {
            let mut entering = None;
            for j in 0..self.active {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut r = cost[j];
                for (i, &b) in self.basis.iter().enumerate() {
                    r -= cost[b] * self.t[(i, j)];
                }
                if r < -TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(e) = entering else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.t.nrows() {
                let a = self.t[(i, e)];
                if a > TOL {
                    let ratio = self.t[(i, rhs)] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - TOL || (ratio <= lr + TOL && self.basis[i] < self.basis[li]) {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(ScalpelError::SolverFailed("unbounded linear program".into()));
            };
            self.pivot(r, e);
        }
        Err(ScalpelError::SolverFailed("dense simplex iteration limit".into()))
    }
}

/// Minimise `cᵀx` subject to `Ax = b`, `x ≥ 0`. Returns `x`.
pub fn solve_standard(a: &DMatrix<f64>, b: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let (rows, vars) = a.shape();
    let mut t = DMatrix::zeros(rows, vars + rows + 1);
    for i in 0..rows {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..vars {
            t[(i, j)] = sign * a[(i, j)];
        }
        t[(i, vars + i)] = 1.0;
        t[(i, vars + rows)] = sign * b[i];
    }
    let mut tab = Tableau {
        t,
        basis: (vars..vars + rows).collect(),
        active: vars + rows,
    };
    let mut phase1 = vec![0.0; vars + rows];
    for v in phase1.iter_mut().skip(vars) {
        *v = 1.0;
    }
    tab.run(&phase1)?;
    let rhs = tab.rhs();
    let infeasibility: f64 = (0..rows).filter(|&i| tab.basis[i] >= vars).map(|i| tab.t[(i, rhs)]).sum();
    if infeasibility > 1e-9 {
        return Err(ScalpelError::SolverFailed("infeasible linear program".into()));
    }
    // drive remaining artificials out of the basis; redundant rows stay inert
    for i in 0..rows {
        if tab.basis[i] >= vars {
            if let Some(j) = (0..vars).find(|&j| tab.t[(i, j)].abs() > TOL && !tab.basis.contains(&j)) {
                tab.pivot(i, j);
            }
        }
    }
    tab.active = vars;
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, rows));
    tab.run(&phase2)?;
    let mut x = vec![0.0; vars];
    for (i, &bv) in tab.basis.iter().enumerate() {
        if bv < vars {
            x[bv] = tab.t[(i, rhs)];
        }
    }
    Ok(x)
}

/// Transportation problem through the general solver.
pub fn solve_transport(cost: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
    let (m, n) = cost.shape();
    let mut eq = DMatrix::zeros(m + n, m * n);
    let mut rhs = Vec::with_capacity(m + n);
    for i in 0..m {
        for j in 0..n {
            eq[(i, i * n + j)] = 1.0;
            eq[(m + j, i * n + j)] = 1.0;
        }
        rhs.push(a[i]);
    }
    rhs.extend_from_slice(b);
    let c: Vec<f64> = (0..m * n).map(|k| cost[(k / n, k % n)]).collect();
    let x = solve_standard(&eq, &rhs, &c)?;
    Ok(DMatrix::from_fn(m, n, |i, j| x[i * n + j]))
}
