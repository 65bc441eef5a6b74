//! Transportation simplex on the bipartite row/column graph.
//!
//! The basis is a spanning tree of `m + n − 1` cells (degenerate zeros
//! included) seeded by the northwest-corner rule. The entering cell is the
//! first row-major cell with negative reduced cost and the leaving cell is
//! the lowest-index cell among the ratio-test ties, so the pivot sequence is
//! fully determined by the input.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Result, ScalpelError};

fn northwest_corner(a: &[f64], b: &[f64]) -> (Vec<(usize, usize)>, DMatrix<f64>) {
    let (m, n) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = DMatrix::zeros(m, n);
    let mut basis = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0, 0);
    loop {
        let x = if i == m - 1 && j == n - 1 {
            supply[i].max(0.0)
        } else {
            supply[i].min(demand[j]).max(0.0)
        };
        flow[(i, j)] = x;
        supply[i] -= x;
        demand[j] -= x;
        basis.push((i, j));
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    (basis, flow)
}

/// Node ids: rows `0..m`, columns `m..m+n`.
fn adjacency(basis: &[(usize, usize)], m: usize, n: usize) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); m + n];
    for (k, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((m + j, k));
        adj[m + j].push((i, k));
    }
    adj
}

fn duals(cost: &DMatrix<f64>, basis: &[(usize, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, n) = cost.shape();
    let adj = adjacency(basis, m, n);
    let mut pot = vec![f64::NAN; m + n];
    pot[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        for &(next, k) in &adj[node] {
            if !pot[next].is_nan() {
                continue;
            }
            let (i, j) = basis[k];
            // u_i + v_j = c_ij
            pot[next] = cost[(i, j)] - pot[node];
            queue.push_back(next);
        }
    }
    if pot.iter().any(|p| p.is_nan()) {
        return Err(ScalpelError::SolverFailed("basis is not a spanning tree".into()));
    }
    Ok((pot[..m].to_vec(), pot[m..].to_vec()))
}

/// Basis positions on the tree path from column `j` to row `i`, in order.
fn tree_path(basis: &[(usize, usize)], m: usize, n: usize, i: usize, j: usize) -> Result<Vec<usize>> {
    let adj = adjacency(basis, m, n);
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    seen[i] = true;
    let mut queue = VecDeque::from([i]);
    while let Some(node) = queue.pop_front() {
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = m + j;
    while node != i {
        let (prev, k) = parent[node].ok_or_else(|| ScalpelError::SolverFailed("disconnected basis".into()))?;
        path.push(k);
        node = prev;
    }
    Ok(path)
}

/// Solve `min Σ c_ij x_ij` subject to row sums `a` and column sums `b`.
///
/// `a` and `b` must be positive with equal totals.
pub fn solve(cost: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
    let (m, n) = cost.shape();
    if m == 0 || n == 0 || a.len() != m || b.len() != n {
        return Err(ScalpelError::InvalidMarginals("shape does not match cost matrix".into()));
    }
    let (mut basis, mut flow) = northwest_corner(a, b);
    let scale = cost.iter().fold(1.0_f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale;
    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let mut in_basis = DMatrix::from_element(m, n, false);
    for &(i, j) in &basis {
        in_basis[(i, j)] = true;
    }
    for _ in 0..max_pivots {
        let (u, v) = duals(cost, &basis)?;
        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if !in_basis[(i, j)] && cost[(i, j)] - u[i] - v[j] < -tol {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(flow);
        };
        let path = tree_path(&basis, m, n, ei, ej)?;
        // path edges alternate −, +, −, … starting next to column ej
        let mut theta = f64::INFINITY;
        for &k in path.iter().step_by(2) {
            let (i, j) = basis[k];
            theta = theta.min(flow[(i, j)]);
        }
        let mut leaving: Option<usize> = None;
        for &k in path.iter().step_by(2) {
            let (i, j) = basis[k];
            if flow[(i, j)] == theta {
                let better = match leaving {
                    None => true,
                    Some(l) => {
                        let (li, lj) = basis[l];
                        i * n + j < li * n + lj
                    }
                };
                if better {
                    leaving = Some(k);
                }
            }
        }
        let leaving = leaving.expect("ratio test found a minimum");
        for (step, &k) in path.iter().enumerate() {
            let (i, j) = basis[k];
            if step % 2 == 0 {
                flow[(i, j)] -= theta;
            } else {
                flow[(i, j)] += theta;
            }
        }
        flow[(ei, ej)] = theta;
        let (li, lj) = basis[leaving];
        flow[(li, lj)] = 0.0;
        in_basis[(li, lj)] = false;
        in_basis[(ei, ej)] = true;
        basis[leaving] = (ei, ej);
    }
    Err(ScalpelError::SolverFailed(format!("no optimum after {max_pivots} pivots")))
}
