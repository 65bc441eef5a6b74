//! Full-covariance Gaussian mixtures over per-head activations.
//!
//! Fitting is plain EM seeded by k-means++ followed by one hard-assignment
//! M-step. A ridge of `1e-6` is added to every covariance diagonal in each
//! M-step, which keeps components positive definite when a cluster collapses
//! onto a point. Components that lose all responsibility are re-seeded at the
//! sample farthest from its assigned mean.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScalpelError};
use crate::json;
use crate::linalg::{check_spd, log_sum_exp, symmetrize, GaussianFactor};
use crate::rng;
use crate::store::ManifoldLabel;

pub const DEFAULT_RIDGE: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, weight: f64) -> Self {
        Self {
            mean,
            covariance,
            weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tol: f64,
    pub ridge: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-6,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// Provenance of a fitted mixture.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitMeta {
    pub label: Option<ManifoldLabel>,
    pub layer: usize,
    pub head: usize,
    pub seed: u64,
    pub loglik: f64,
    pub iterations: usize,
}

/// A weighted list of Gaussian components with cached Cholesky factors.
#[derive(Debug, Clone)]
pub struct Gmm {
    components: Vec<GaussianComponent>,
    factors: Vec<GaussianFactor>,
    pub meta: FitMeta,
}

impl PartialEq for Gmm {
    fn eq(&self, other: &Self) -> bool {
        self.components == other.components && self.meta == other.meta
    }
}

impl Gmm {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| ScalpelError::InvalidArgument("mixture needs at least one component".into()))?;
        let d = first.dim();
        let mut sum = 0.0;
        let mut factors = Vec::with_capacity(components.len());
        for c in &components {
            if c.dim() != d {
                return Err(ScalpelError::DimensionMismatch {
                    expected: d,
                    got: c.dim(),
                });
            }
            if !(c.weight >= 0.0 && c.weight <= 1.0) {
                return Err(ScalpelError::InvalidArgument(format!("weight {} outside [0, 1]", c.weight)));
            }
            check_spd(&c.covariance)?;
            sum += c.weight;
            factors.push(GaussianFactor::new(&c.mean, &c.covariance)?);
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(ScalpelError::InvalidArgument(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self {
            components,
            factors,
            meta: FitMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: FitMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(ScalpelError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `ln w_i + ln N(z | μ_i, Σ_i)` for every component.
    fn joint_log(&self, z: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.factors)
            .map(|(c, f)| c.weight.ln() + f.log_pdf(z))
            .collect()
    }

    /// Mixture log-density, evaluated with log-sum-exp.
    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        Ok(log_sum_exp(&self.joint_log(z)))
    }

    /// Component posteriors `P(r | z)`.
    pub fn posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let joint = self.joint_log(z);
        let lse = log_sum_exp(&joint);
        Ok(joint.iter().map(|v| (v - lse).exp()).collect())
    }

    /// Most likely component and its posterior probability; ties go to the
    /// lowest index.
    pub fn assign(&self, z: &[f64]) -> Result<(usize, f64)> {
        let post = self.posterior(z)?;
        let mut best = 0;
        for (i, p) in post.iter().enumerate() {
            if *p > post[best] {
                best = i;
            }
        }
        Ok((best, post[best]))
    }

    /// Draw `n` samples (one per row).
    pub fn sample(&self, n: usize, seed: u64) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(ScalpelError::InvalidArgument("sample count must be positive".into()));
        }
        let mut rng = rng::stream(seed, "gmm-sample");
        let d = self.dim();
        let chols: Vec<DMatrix<f64>> = self
            .components
            .iter()
            .map(|c| {
                symmetrize(&c.covariance)
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or(ScalpelError::NotPositiveDefinite)
            })
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(n, d);
        let mut xi = DVector::zeros(d);
        for row in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.k() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc && c.weight > 0.0 {
                    pick = i;
                    break;
                }
            }
            // guard against the rounding tail landing on a zero-weight component
            while self.components[pick].weight == 0.0 && pick > 0 {
                pick -= 1;
            }
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x = &self.components[pick].mean + &chols[pick] * &xi;
            out.row_mut(row).copy_from(&x.transpose());
        }
        Ok(out)
    }

    pub fn to_artifact(&self) -> GmmArtifact {
        GmmArtifact {
            schema_version: json::SCHEMA_VERSION,
            layer: self.meta.layer,
            head: self.meta.head,
            label: self.meta.label,
            k: self.k(),
            weights: self.weights(),
            means: self.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| c.covariance.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            seed: self.meta.seed,
            loglik: self.meta.loglik,
            iterations: self.meta.iterations,
        }
    }

    pub fn from_artifact(a: &GmmArtifact) -> Result<Self> {
        json::check_schema(a.schema_version, "gmm")?;
        if a.weights.len() != a.k || a.means.len() != a.k || a.covariances.len() != a.k {
            return Err(ScalpelError::InvalidArtifact("gmm: component count mismatch".into()));
        }
        let components = (0..a.k)
            .map(|i| {
                let d = a.means[i].len();
                let rows = &a.covariances[i];
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(ScalpelError::InvalidArtifact("gmm: covariance shape".into()));
                }
                let cov = DMatrix::from_fn(d, d, |r, c| rows[r][c]);
                Ok(GaussianComponent::new(DVector::from_vec(a.means[i].clone()), cov, a.weights[i]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(components)?.with_meta(FitMeta {
            label: a.label,
            layer: a.layer,
            head: a.head,
            seed: a.seed,
            loglik: a.loglik,
            iterations: a.iterations,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        json::write_artifact(&self.to_artifact(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(&json::read_artifact(path)?)
    }
}

/// On-disk form of a fitted mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmArtifact {
    pub schema_version: u32,
    pub layer: usize,
    pub head: usize,
    pub label: Option<ManifoldLabel>,
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub loglik: f64,
    pub iterations: usize,
}

/// Per-iteration trace of an EM run.
#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    /// Log-likelihood after each E-step.
    pub loglik: Vec<f64>,
    /// Iterations (indices into `loglik`) preceded by a component rescue.
    pub rescued: Vec<usize>,
}

impl EmTrace {
    /// Largest drop between consecutive log-likelihoods, ignoring steps
    /// that follow a rescue, relative to `max(1, |ll|)`.
    pub fn worst_relative_decrease(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 1..self.loglik.len() {
            if self.rescued.contains(&i) {
                continue;
            }
            let drop = self.loglik[i - 1] - self.loglik[i];
            worst = worst.max(drop / self.loglik[i - 1].abs().max(1.0));
        }
        worst
    }
}

struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

/// Fit a `k`-component mixture to the rows of `samples`.
pub fn fit_em(samples: &DMatrix<f64>, k: usize, seed: u64, config: &EmConfig) -> Result<Gmm> {
    fit_em_traced(samples, k, seed, config).map(|(g, _)| g)
}

pub fn fit_em_traced(samples: &DMatrix<f64>, k: usize, seed: u64, config: &EmConfig) -> Result<(Gmm, EmTrace)> {
    let n = samples.nrows();
    let d = samples.ncols();
    if k == 0 {
        return Err(ScalpelError::InvalidArgument("component count must be positive".into()));
    }
    if n < k {
        return Err(ScalpelError::InsufficientSamples { need: k, got: n });
    }
    if d == 0 {
        return Err(ScalpelError::EmptyDimension);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(ScalpelError::NonFinite);
    }

    let mut rng = rng::stream(seed, "gmm-kmeans++");
    let centers = kmeans_pp(samples, k, &mut rng);
    let mut resp = hard_assignment(samples, &centers);
    let mut params = m_step(samples, &resp, config.ridge);
    let mut trace = EmTrace::default();
    if rescue(samples, &resp, &mut params) {
        trace.rescued.push(0);
    }

    let mut loglik = f64::NEG_INFINITY;
    let mut iterations = 0;
    loop {
        let (ll, r) = e_step(samples, &params)?;
        resp = r;
        trace.loglik.push(ll);
        iterations += 1;
        let converged = loglik.is_finite() && (ll - loglik) < config.rel_tol * loglik.abs();
        loglik = ll;
        if converged || iterations >= config.max_iter {
            break;
        }
        params = m_step(samples, &resp, config.ridge);
        if rescue(samples, &resp, &mut params) {
            trace.rescued.push(iterations);
        }
    }

    let components = (0..k)
        .map(|i| GaussianComponent::new(params.means[i].clone(), params.covs[i].clone(), params.weights[i]))
        .collect();
    let gmm = Gmm::new(components)?.with_meta(FitMeta {
        seed,
        loglik,
        iterations,
        ..FitMeta::default()
    });
    Ok((gmm, trace))
}

fn sq_dist(samples: &DMatrix<f64>, row: usize, center: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for c in 0..samples.ncols() {
        let diff = samples[(row, c)] - center[c];
        acc += diff * diff;
    }
    acc
}

fn kmeans_pp(samples: &DMatrix<f64>, k: usize, rng: &mut rng::Rng) -> Vec<DVector<f64>> {
    let n = samples.nrows();
    let row = |i: usize| samples.row(i).transpose();
    let mut centers = vec![row(rng.random_range(0..n))];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(samples, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in dist.iter().enumerate() {
                acc += v;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick);
        for (i, v) in dist.iter_mut().enumerate() {
            *v = v.min(sq_dist(samples, i, &c));
        }
        centers.push(c);
    }
    centers
}

/// One-hot responsibilities to the nearest center (ties to the lowest index).
fn hard_assignment(samples: &DMatrix<f64>, centers: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.nrows();
    let mut resp = DMatrix::zeros(n, centers.len());
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let dd = sq_dist(samples, i, c);
            if dd < best_d {
                best_d = dd;
                best = j;
            }
        }
        resp[(i, best)] = 1.0;
    }
    resp
}

fn m_step(samples: &DMatrix<f64>, resp: &DMatrix<f64>, ridge: f64) -> Params {
    let n = samples.nrows();
    let d = samples.ncols();
    let k = resp.ncols();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let mut centered = DMatrix::zeros(n, d);
    for j in 0..k {
        let r = resp.column(j);
        let nk: f64 = r.sum();
        weights.push(nk / n as f64);
        let mean = if nk > 0.0 {
            samples.tr_mul(&r) / nk
        } else {
            DVector::zeros(d)
        };
        for c in 0..d {
            for i in 0..n {
                centered[(i, c)] = (samples[(i, c)] - mean[c]) * r[i].sqrt();
            }
        }
        let mut cov = if nk > 0.0 {
            centered.transpose() * &centered / nk
        } else {
            DMatrix::zeros(d, d)
        };
        cov = symmetrize(&cov);
        for c in 0..d {
            cov[(c, c)] += ridge;
        }
        means.push(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Params { weights, means, covs }
}

/// Re-seed components with (numerically) no responsibility mass.
fn rescue(samples: &DMatrix<f64>, resp: &DMatrix<f64>, params: &mut Params) -> bool {
    let n = samples.nrows();
    let k = resp.ncols();
    let floor = 1e-8 * n as f64;
    let collapsed: Vec<usize> = (0..k).filter(|&j| params.weights[j] * n as f64 <= floor).collect();
    if collapsed.is_empty() {
        return false;
    }
    let owner: Vec<usize> = (0..n)
        .map(|i| {
            let row = resp.row(i);
            let mut best = 0;
            for j in 0..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut used = vec![false; n];
    for j in collapsed {
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for i in 0..n {
            if used[i] {
                continue;
            }
            let dd = sq_dist(samples, i, &params.means[owner[i]]);
            if dd > far_d {
                far_d = dd;
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        used[i] = true;
        params.means[j] = samples.row(i).transpose();
        params.covs[j] = params.covs[owner[i]].clone();
        params.weights[j] = 1.0 / n as f64;
    }
    let total: f64 = params.weights.iter().sum();
    for w in &mut params.weights {
        *w /= total;
    }
    true
}

/// Returns the total log-likelihood and the responsibilities.
fn e_step(samples: &DMatrix<f64>, params: &Params) -> Result<(f64, DMatrix<f64>)> {
    let n = samples.nrows();
    let d = samples.ncols();
    let k = params.weights.len();
    let mut logp = DMatrix::zeros(n, k);
    let mut maha = vec![0.0; n];
    for j in 0..k {
        let f = GaussianFactor::new(&params.means[j], &params.covs[j])?;
        // L⁻¹(x − μ) = L⁻¹x − L⁻¹μ
        let whitened = samples * f.inv_chol.transpose();
        let shift = &f.inv_chol * &params.means[j];
        maha.iter_mut().for_each(|m| *m = 0.0);
        for c in 0..d {
            let col = whitened.column(c);
            for (m, w) in maha.iter_mut().zip(col.iter()) {
                let v = w - shift[c];
                *m += v * v;
            }
        }
        let base = params.weights[j].ln() + f.log_norm;
        for (i, m) in maha.iter().enumerate() {
            logp[(i, j)] = base - 0.5 * m;
        }
    }
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            row[j] = logp[(i, j)];
        }
        let lse = log_sum_exp(&row);
        total += lse;
        for j in 0..k {
            logp[(i, j)] = (row[j] - lse).exp();
        }
    }
    Ok((total, logp))
}
