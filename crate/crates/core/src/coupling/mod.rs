//! Component-level optimal transport between a hallucinated and a trusted
//! mixture.
//!
//! The mixture bridge is the convex combination of pairwise Gaussian bridges
//! weighted by the discrete plan `λ`, which solves the transportation LP over
//! the pairwise costs `J_ij`. Each hallucinated component is matched to the
//! trusted component carrying most of its mass.

pub mod dense_simplex;
pub mod network_simplex;
pub mod sinkhorn;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge::{self, BridgeConfig, GaussianBridge};
use crate::error::{Result, ScalpelError};
use crate::gmm::Gmm;
use crate::json;
use crate::linalg::log_sum_exp;
use crate::store::Level;

const MARGINAL_TOL: f64 = 1e-10;
const WEIGHT_FLOOR: f64 = 1e-12;
/// Below `ln(f64::MIN_POSITIVE)` every mixture weight has underflowed.
const LOG_UNDERFLOW: f64 = -708.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub lambda: DMatrix<f64>,
    pub costs: DMatrix<f64>,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatch {
    #[serde(rename = "match")]
    pub matches: Vec<usize>,
    pub mass: Vec<f64>,
}

pub fn cost_matrix(h: &Gmm, t: &Gmm, cfg: &BridgeConfig) -> Result<DMatrix<f64>> {
    if h.dim() != t.dim() {
        return Err(ScalpelError::DimensionMismatch {
            expected: h.dim(),
            got: t.dim(),
        });
    }
    let mut j = DMatrix::zeros(h.k(), t.k());
    for (r, a) in h.components().iter().enumerate() {
        for (c, b) in t.components().iter().enumerate() {
            j[(r, c)] = bridge::cost(a, b, cfg)?;
        }
    }
    Ok(j)
}

/// Validate marginals and lift zero weights to a tiny floor.
fn prepare_marginals(j: &DMatrix<f64>, w0: &[f64], w1: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if j.nrows() != w0.len() || j.ncols() != w1.len() {
        return Err(ScalpelError::InvalidMarginals(format!(
            "cost is {}x{}, marginals have lengths {} and {}",
            j.nrows(),
            j.ncols(),
            w0.len(),
            w1.len()
        )));
    }
    if w0.is_empty() || w1.is_empty() {
        return Err(ScalpelError::InvalidMarginals("empty marginal".into()));
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(ScalpelError::NonFinite);
    }
    let fix = |w: &[f64], name: &str| -> Result<Vec<f64>> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ScalpelError::InvalidMarginals(format!("{name} has negative or non-finite entries")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > MARGINAL_TOL {
            return Err(ScalpelError::InvalidMarginals(format!("{name} sums to {sum}")));
        }
        if w.iter().all(|v| *v > 0.0) {
            return Ok(w.to_vec());
        }
        let lifted: Vec<f64> = w.iter().map(|v| v.max(WEIGHT_FLOOR)).collect();
        let total: f64 = lifted.iter().sum();
        Ok(lifted.iter().map(|v| v / total).collect())
    };
    Ok((fix(w0, "row marginal")?, fix(w1, "column marginal")?))
}

fn objective(lambda: &DMatrix<f64>, j: &DMatrix<f64>) -> f64 {
    lambda.component_mul(j).sum()
}

/// Exact transportation LP.
pub fn solve_lp(j: &DMatrix<f64>, w0: &[f64], w1: &[f64]) -> Result<CouplingPlan> {
    let (a, b) = prepare_marginals(j, w0, w1)?;
    let lambda = network_simplex::solve(j, &a, &b)?;
    Ok(CouplingPlan {
        objective: objective(&lambda, j),
        lambda,
        costs: j.clone(),
        row_marginals: a,
        col_marginals: b,
    })
}

/// Entropic plan with regularisation `eps_reg`.
pub fn solve_sinkhorn(j: &DMatrix<f64>, w0: &[f64], w1: &[f64], eps_reg: f64, max_iter: usize) -> Result<CouplingPlan> {
    if !(eps_reg > 0.0) || !eps_reg.is_finite() {
        return Err(ScalpelError::InvalidArgument(format!("eps_reg must be > 0, got {eps_reg}")));
    }
    let (a, b) = prepare_marginals(j, w0, w1)?;
    let lambda = sinkhorn::solve(j, &a, &b, eps_reg, max_iter)?;
    Ok(CouplingPlan {
        objective: objective(&lambda, j),
        lambda,
        costs: j.clone(),
        row_marginals: a,
        col_marginals: b,
    })
}

pub fn match_components(plan: &CouplingPlan) -> ComponentMatch {
    let mut matches = Vec::with_capacity(plan.lambda.nrows());
    let mut mass = Vec::with_capacity(plan.lambda.nrows());
    for row in plan.lambda.row_iter() {
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        matches.push(best);
        mass.push(row[best]);
    }
    ComponentMatch { matches, mass }
}

impl CouplingPlan {
    pub fn max_marginal_residual(&self) -> f64 {
        let rows = self
            .lambda
            .row_iter()
            .zip(&self.row_marginals)
            .map(|(r, w)| (r.sum() - w).abs());
        let cols = self
            .lambda
            .column_iter()
            .zip(&self.col_marginals)
            .map(|(c, w)| (c.sum() - w).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    pub fn nonzeros(&self) -> usize {
        self.lambda.iter().filter(|v| **v > 0.0).count()
    }

    pub fn to_artifact(&self, layer: usize, head: usize, level: Level) -> CouplingArtifact {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        CouplingArtifact {
            schema_version: json::SCHEMA_VERSION,
            layer,
            head,
            level,
            lambda: rows(&self.lambda),
            costs: rows(&self.costs),
            row_marginals: self.row_marginals.clone(),
            col_marginals: self.col_marginals.clone(),
            objective: self.objective,
            matches: match_components(self).matches,
        }
    }

    pub fn from_artifact(a: &CouplingArtifact) -> Result<Self> {
        json::check_schema(a.schema_version, "coupling")?;
        let m = a.row_marginals.len();
        let n = a.col_marginals.len();
        let grid = |v: &Vec<Vec<f64>>| -> Result<DMatrix<f64>> {
            if v.len() != m || v.iter().any(|r| r.len() != n) {
                return Err(ScalpelError::InvalidArtifact("coupling: matrix shape".into()));
            }
            Ok(DMatrix::from_fn(m, n, |i, j| v[i][j]))
        };
        Ok(Self {
            lambda: grid(&a.lambda)?,
            costs: grid(&a.costs)?,
            row_marginals: a.row_marginals.clone(),
            col_marginals: a.col_marginals.clone(),
            objective: a.objective,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingArtifact {
    pub schema_version: u32,
    pub layer: usize,
    pub head: usize,
    pub level: Level,
    pub lambda: Vec<Vec<f64>>,
    pub costs: Vec<Vec<f64>>,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub objective: f64,
    #[serde(rename = "match")]
    pub matches: Vec<usize>,
}

impl CouplingArtifact {
    pub fn save(&self, path: &Path) -> Result<String> {
        json::write_artifact(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        json::read_artifact(path)
    }
}

/// Mixture of pairwise bridges weighted by a transport plan.
#[derive(Debug, Clone)]
pub struct MixtureBridge {
    pairs: Vec<(usize, usize, f64, GaussianBridge)>,
}

impl MixtureBridge {
    pub fn new(h: &Gmm, t: &Gmm, plan: &CouplingPlan, cfg: &BridgeConfig) -> Result<Self> {
        if plan.lambda.shape() != (h.k(), t.k()) {
            return Err(ScalpelError::DimensionMismatch {
                expected: h.k() * t.k(),
                got: plan.lambda.len(),
            });
        }
        let mut pairs = Vec::new();
        for i in 0..h.k() {
            for j in 0..t.k() {
                let l = plan.lambda[(i, j)];
                if l > 0.0 {
                    pairs.push((i, j, l, GaussianBridge::new(&h.components()[i], &t.components()[j], cfg)?));
                }
            }
        }
        if pairs.is_empty() {
            return Err(ScalpelError::InvalidArgument("plan has no positive mass".into()));
        }
        Ok(Self { pairs })
    }

    fn log_weights(&self, z: &[f64], time: f64) -> Result<Vec<f64>> {
        self.pairs
            .iter()
            .map(|(_, _, l, br)| Ok(l.ln() + br.marginal_log_pdf(z, time)?))
            .collect()
    }

    /// Induced density `ρ_t(z) = Σ λ_ij ρ_{t|ij}(z)`.
    pub fn density(&self, z: &[f64], time: f64) -> Result<f64> {
        Ok(log_sum_exp(&self.log_weights(z, time)?).exp())
    }

    /// Normalised pair weights `∝ λ_ij ρ_{t|ij}(z)` keyed by `(i, j)`.
    pub fn pair_weights(&self, z: &[f64], time: f64) -> Result<Vec<((usize, usize), f64)>> {
        let lw = self.log_weights(z, time)?;
        let lse = log_sum_exp(&lw);
        let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max >= LOG_UNDERFLOW) {
            return Err(ScalpelError::OffAllBridges);
        }
        Ok(self
            .pairs
            .iter()
            .zip(lw)
            .map(|((i, j, _, _), w)| ((*i, *j), (w - lse).exp()))
            .collect())
    }

    pub fn drift(&self, z: &[f64], time: f64) -> Result<DVector<f64>> {
        if time >= 1.0 {
            return Err(ScalpelError::TerminalDrift);
        }
        let weights = self.pair_weights(z, time)?;
        let mut u = DVector::zeros(z.len());
        for ((_, _, _, br), (_, w)) in self.pairs.iter().zip(weights) {
            if w > 0.0 {
                u += br.drift(z, time)? * w;
            }
        }
        Ok(u)
    }
}

/// Mixture velocity at `(z, time)`.
pub fn mixture_drift(h: &Gmm, t: &Gmm, plan: &CouplingPlan, z: &[f64], time: f64, cfg: &BridgeConfig) -> Result<DVector<f64>> {
    MixtureBridge::new(h, t, plan, cfg)?.drift(z, time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianComponent;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    const ZERO: BridgeConfig = BridgeConfig { epsilon: 0.0 };

    fn random_costs(seed: u64, m: usize, n: usize) -> DMatrix<f64> {
        let mut rng = rng::stream(seed, "costs");
        DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 10.0)
    }

    fn random_weights(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let s: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let rest: f64 = w[1..].iter().sum();
        w[0] = 1.0 - rest;
        w
    }

    fn random_gmm(rng: &mut rng::Rng, k: usize, d: usize) -> Gmm {
        let w = random_weights(rng, k);
        let comps = w
            .iter()
            .map(|&wi| {
                let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let cov = crate::linalg::symmetrize(&(&a * a.transpose() + DMatrix::identity(d, d) * 0.3));
                let mean = DVector::from_fn(d, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
                GaussianComponent::new(mean, cov, wi)
            })
            .collect();
        Gmm::new(comps).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn cost_matrix_matches_pairwise_calls() {
        let mut rng = rng::stream(1, "cm");
        let h = random_gmm(&mut rng, 3, 2);
        let t = random_gmm(&mut rng, 3, 2);
        let j = cost_matrix(&h, &t, &ZERO).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let direct = bridge::cost(&h.components()[r], &t.components()[c], &ZERO).unwrap();
                assert_eq!(j[(r, c)], direct);
            }
        }
        let self_j = cost_matrix(&h, &h, &ZERO).unwrap();
        assert!((0..3).all(|i| self_j[(i, i)] == 0.0));
        let wrong = random_gmm(&mut rng, 1, 3);
        assert!(cost_matrix(&h, &wrong, &ZERO).is_err());
    }

    #[test]
    fn forced_coupling() {
        let j = DMatrix::from_element(1, 1, 2.5);
        let p = solve_lp(&j, &[1.0], &[1.0]).unwrap();
        assert_eq!(p.lambda[(0, 0)], 1.0);
        assert_eq!(p.objective, 2.5);
        let s = solve_sinkhorn(&j, &[1.0], &[1.0], 0.1, 100).unwrap();
        assert!((s.lambda[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_diagonal_gives_identity_plan() {
        let w = [0.2, 0.5, 0.3];
        let j = DMatrix::from_fn(3, 3, |i, k| if i == k { 0.0 } else { 1.0 + (i + k) as f64 });
        let p = solve_lp(&j, &w, &w).unwrap();
        assert_eq!(p.objective, 0.0);
        for i in 0..3 {
            assert_eq!(p.lambda[(i, i)], w[i]);
        }
        assert_eq!(match_components(&p).matches, vec![0, 1, 2]);
    }

    #[test]
    fn uniform_lp_matches_best_permutation() {
        // oracle: Birkhoff vertex enumeration
        for seed in 0..50 {
            let j = random_costs(seed, 3, 3);
            let w = [1.0 / 3.0; 3];
            let p = solve_lp(&j, &w, &w).unwrap();
            let best = permutations(3)
                .iter()
                .map(|perm| perm.iter().enumerate().map(|(i, &k)| j[(i, k)]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((p.objective - best / 3.0).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn invalid_marginals_rejected() {
        let j = DMatrix::from_element(2, 2, 1.0);
        let err = solve_lp(&j, &[0.5, 0.6], &[0.5, 0.5]).unwrap_err();
        assert!(err.to_string().starts_with("invalid marginals"));
        assert!(solve_lp(&j, &[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(solve_sinkhorn(&j, &[0.5, 0.5], &[0.5, 0.5], 0.0, 10).is_err());
    }

    #[test]
    fn zero_weight_component_is_lifted() {
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = solve_lp(&j, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(p.row_marginals[1] > 0.0);
        assert!(p.max_marginal_residual() <= 1e-8);
    }

    #[test]
    fn sinkhorn_limits() {
        let mut rng = rng::stream(3, "sk");
        let j = random_costs(3, 3, 4);
        let a = random_weights(&mut rng, 3);
        let b = random_weights(&mut rng, 4);
        let wide = solve_sinkhorn(&j, &a, &b, 1e3, 10_000).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((wide.lambda[(r, c)] - a[r] * b[c]).abs() < 1e-3);
            }
        }
        let w = [1.0 / 3.0; 3];
        let jj = random_costs(9, 3, 3);
        let lp = solve_lp(&jj, &w, &w).unwrap();
        let sharp = solve_sinkhorn(&jj, &w, &w, 1e-3, 100_000).unwrap();
        assert!(sharp.max_marginal_residual() <= 1e-8);
        assert!(sharp.objective >= lp.objective - 1e-12);
        assert!((sharp.objective - lp.objective).abs() <= 0.01 * lp.objective);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let j = random_costs(4, 5, 5);
        let w = [0.2; 5];
        let err = solve_sinkhorn(&j, &w, &w, 1e-4, 3).unwrap_err();
        assert!(matches!(err, ScalpelError::SinkhornNotConverged { iterations: 3, .. }));
        assert!(err.to_string().starts_with("sinkhorn did not converge"));
    }

    #[test]
    fn tie_break_goes_low() {
        let plan = CouplingPlan {
            lambda: DMatrix::from_row_slice(1, 2, &[0.2, 0.2]),
            costs: DMatrix::zeros(1, 2),
            row_marginals: vec![0.4],
            col_marginals: vec![0.2, 0.2],
            objective: 0.0,
        };
        assert_eq!(match_components(&plan).matches, vec![0]);
    }

    #[test]
    fn mixture_drift_reduces_to_pair_drift() {
        let mut rng = rng::stream(6, "md");
        let h = random_gmm(&mut rng, 1, 2);
        let t = random_gmm(&mut rng, 1, 2);
        let plan = solve_lp(&cost_matrix(&h, &t, &ZERO).unwrap(), &[1.0], &[1.0]).unwrap();
        let z = [0.3, -0.4];
        let u = mixture_drift(&h, &t, &plan, &z, 0.4, &ZERO).unwrap();
        let direct = GaussianBridge::new(&h.components()[0], &t.components()[0], &ZERO)
            .unwrap()
            .drift(&z, 0.4)
            .unwrap();
        assert!((u - direct).abs().max() < 1e-12);
    }

    #[test]
    fn zero_mass_pair_is_excluded() {
        let mut rng = rng::stream(7, "md");
        let h = random_gmm(&mut rng, 2, 1);
        let t = random_gmm(&mut rng, 1, 1);
        let w = h.weights();
        let plan = CouplingPlan {
            lambda: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            costs: cost_matrix(&h, &t, &ZERO).unwrap(),
            row_marginals: w,
            col_marginals: vec![1.0],
            objective: 0.0,
        };
        let u = mixture_drift(&h, &t, &plan, &[0.7], 0.2, &ZERO).unwrap();
        let direct = GaussianBridge::new(&h.components()[0], &t.components()[0], &ZERO)
            .unwrap()
            .drift(&[0.7], 0.2)
            .unwrap();
        assert!((u - direct).abs().max() < 1e-12);
    }

    #[test]
    fn dominant_bridge_controls_drift() {
        let comp = |m: f64, w: f64| GaussianComponent::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, 0.1), w);
        let h = Gmm::new(vec![comp(-20.0, 0.5), comp(20.0, 0.5)]).unwrap();
        let t = Gmm::new(vec![comp(-18.0, 0.5), comp(22.0, 0.5)]).unwrap();
        let plan = solve_lp(&cost_matrix(&h, &t, &ZERO).unwrap(), &h.weights(), &t.weights()).unwrap();
        let mb = MixtureBridge::new(&h, &t, &plan, &ZERO).unwrap();
        let time = 0.5;
        let z = [21.0];
        let weights = mb.pair_weights(&z, time).unwrap();
        let dominant = weights.iter().find(|(k, _)| *k == (1, 1)).unwrap().1;
        assert!(dominant > 1.0 - 1e-9);
        let pair = GaussianBridge::new(&h.components()[1], &t.components()[1], &ZERO).unwrap();
        assert!((mb.drift(&z, time).unwrap() - pair.drift(&z, time).unwrap()).abs().max() < 1e-6);
        assert!(matches!(mb.drift(&[1e6], time), Err(ScalpelError::OffAllBridges)));
    }

    #[test]
    fn induced_density_integrates_to_one() {
        let mut rng = rng::stream(8, "flow");
        let h = random_gmm(&mut rng, 3, 1);
        let t = random_gmm(&mut rng, 2, 1);
        let plan = solve_lp(&cost_matrix(&h, &t, &ZERO).unwrap(), &h.weights(), &t.weights()).unwrap();
        let mb = MixtureBridge::new(&h, &t, &plan, &ZERO).unwrap();
        for time in [0.0, 0.3, 0.7, 1.0] {
            let (lo, hi) = (-40.0, 40.0);
            let n = 10_000;
            let dx = (hi - lo) / (n - 1) as f64;
            let vals: Vec<f64> = (0..n).map(|i| mb.density(&[lo + i as f64 * dx], time).unwrap()).collect();
            let integral = dx * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[n - 1]));
            assert!((integral - 1.0).abs() <= 1e-4, "t={time}: {integral}");
        }
    }

    #[test]
    fn artifact_round_trip() {
        let j = random_costs(11, 2, 3);
        let p = solve_lp(&j, &[0.4, 0.6], &[0.2, 0.3, 0.5]).unwrap();
        let art = p.to_artifact(1, 4, Level::Object);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        art.save(&path).unwrap();
        let back = CouplingArtifact::load(&path).unwrap();
        assert_eq!(back, art);
        assert_eq!(CouplingPlan::from_artifact(&back).unwrap(), p);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"match\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lp_is_feasible_sparse_and_agrees_with_dense(seed in 0u64..100_000, m in 1usize..7, n in 1usize..7) {
            let mut rng = rng::stream(seed, "lp");
            let j = random_costs(seed, m, n);
            let a = random_weights(&mut rng, m);
            let b = random_weights(&mut rng, n);
            let p = solve_lp(&j, &a, &b).unwrap();
            prop_assert!(p.lambda.iter().all(|v| *v >= 0.0));
            prop_assert!(p.max_marginal_residual() <= 1e-8);
            prop_assert!(p.nonzeros() <= m + n - 1);
            prop_assert!((p.objective - objective(&p.lambda, &j)).abs() <= 1e-9);
            let dense = dense_simplex::solve_transport(&j, &a, &b).unwrap();
            prop_assert!((objective(&dense, &j) - p.objective).abs() <= 1e-9 * p.objective.max(1.0));
            prop_assert_eq!(solve_lp(&j, &a, &b).unwrap(), p);
        }

        #[test]
        fn lp_beats_random_feasible_couplings(seed in 0u64..100_000, m in 2usize..5, n in 2usize..5) {
            let mut rng = rng::stream(seed, "feasible");
            let j = random_costs(seed ^ 0xABCD, m, n);
            let a = random_weights(&mut rng, m);
            let b = random_weights(&mut rng, n);
            let p = solve_lp(&j, &a, &b).unwrap();
            for _ in 0..1000 {
                let log_k = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 4.0);
                let cost = -log_k;
                let q = sinkhorn::solve(&cost, &a, &b, 1.0, 10_000).unwrap();
                prop_assert!(p.objective <= objective(&q, &j) + 1e-12);
            }
        }

        #[test]
        fn sinkhorn_marginals_exact(seed in 0u64..100_000, m in 1usize..6, n in 1usize..6, reg in 0.01f64..10.0) {
            let mut rng = rng::stream(seed, "skp");
            let j = random_costs(seed, m, n);
            let a = random_weights(&mut rng, m);
            let b = random_weights(&mut rng, n);
            let s = solve_sinkhorn(&j, &a, &b, reg, 100_000).unwrap();
            prop_assert!(s.max_marginal_residual() <= 1e-8);
            prop_assert!(s.objective >= solve_lp(&j, &a, &b).unwrap().objective - 1e-12);
        }
    }
}
