//! Per-head logistic probes and head selection.
//!
//! Probes minimise mean cross-entropy plus `l2/2 · ‖w‖²` by Newton's method
//! with a backtracking line search. Features are standardised before fitting
//! and the weights mapped back, so the penalty acts on standardised weights.
//! The bias is not penalised.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScalpelError};
use crate::json;
use crate::rng;
use crate::store::ActivationTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1.0,
            max_iter: 100,
            grad_tol: 1e-8,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub layer: usize,
    pub head: usize,
    pub val_accuracy: f64,
}

impl HeadProbe {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.logit(x) > 0.0)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn check_labels(x: &DMatrix<f64>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(ScalpelError::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.iter().any(|v| *v > 1) {
        return Err(ScalpelError::InvalidArgument("labels must be 0 or 1".into()));
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(ScalpelError::DegenerateLabels);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ScalpelError::NonFinite);
    }
    Ok(())
}

/// Fit weights and bias on the full input. Returns `(w, b)` in the original
/// feature space.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[u8], cfg: &ProbeConfig) -> Result<(DVector<f64>, f64)> {
    check_labels(x, y)?;
    let (n, d) = x.shape();
    let nf = n as f64;
    let mean = x.row_mean().transpose();
    let mut scale = DVector::zeros(d);
    for c in 0..d {
        let var = x.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / nf;
        scale[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    // standardised design with a trailing bias column
    let mut z = DMatrix::from_element(n, d + 1, 1.0);
    for c in 0..d {
        for r in 0..n {
            z[(r, c)] = (x[(r, c)] - mean[c]) / scale[c];
        }
    }
    let yv = DVector::from_iterator(n, y.iter().map(|v| *v as f64));
    let loss = |theta: &DVector<f64>| -> f64 {
        let eta = &z * theta;
        let ce: f64 = eta.iter().zip(yv.iter()).map(|(e, t)| softplus(*e) - t * e).sum::<f64>() / nf;
        let w2: f64 = theta.rows(0, d).norm_squared();
        ce + 0.5 * cfg.l2 * w2
    };
    let mut theta = DVector::zeros(d + 1);
    let mut current = loss(&theta);
    for _ in 0..cfg.max_iter {
        let eta = &z * &theta;
        let p = eta.map(sigmoid);
        let mut grad = z.tr_mul(&(&p - &yv)) / nf;
        for c in 0..d {
            grad[c] += cfg.l2 * theta[c];
        }
        if grad.norm() < cfg.grad_tol {
            break;
        }
        let s = p.map(|v| (v * (1.0 - v)).sqrt());
        let mut zs = z.clone();
        for r in 0..n {
            zs.row_mut(r).scale_mut(s[r]);
        }
        let mut hess = zs.tr_mul(&zs) / nf;
        for c in 0..d {
            hess[(c, c)] += cfg.l2;
        }
        hess[(d, d)] += 1e-12;
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let slope = grad.dot(&step);
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &theta - &step * t;
            let l = loss(&cand);
            if l <= current - 1e-4 * t * slope {
                theta = cand;
                current = l;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let w = DVector::from_fn(d, |c, _| theta[c] / scale[c]);
    let b = theta[d] - w.dot(&mean);
    Ok((w, b))
}

/// Stratified split; returns `(train, val)` index lists, both sorted.
pub fn stratified_split(y: &[u8], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(seed, "probe-split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = if idx.len() < 2 {
            0
        } else {
            ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

/// Fit on a seeded 80% split and score on the held-out 20%.
pub fn train_probe(x: &DMatrix<f64>, y: &[u8], seed: u64, cfg: &ProbeConfig) -> Result<HeadProbe> {
    check_labels(x, y)?;
    if x.nrows() < 4 {
        return Err(ScalpelError::InsufficientSamples { need: 4, got: x.nrows() });
    }
    let (train, val) = stratified_split(y, cfg.val_fraction, seed);
    let ty: Vec<u8> = train.iter().map(|&i| y[i]).collect();
    let (w, b) = fit_logistic(&select_rows(x, &train), &ty, cfg)?;
    let mut probe = HeadProbe {
        weights: w.iter().copied().collect(),
        bias: b,
        layer: 0,
        head: 0,
        val_accuracy: 0.0,
    };
    let correct = val
        .iter()
        .filter(|&&i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            probe.predict(&row) == y[i]
        })
        .count();
    probe.val_accuracy = if val.is_empty() { 0.0 } else { correct as f64 / val.len() as f64 };
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracyMatrix {
    pub layers: usize,
    pub heads: usize,
    /// `acc[l][n]`.
    pub acc: Vec<Vec<f64>>,
    pub k: usize,
    pub selected: Vec<(usize, usize)>,
}

/// Probe every head on trusted (label 0) against hallucinated (label 1)
/// activations and keep the `k` best heads.
pub fn build_accuracy_matrix(
    trusted: &ActivationTensor,
    halluc: &ActivationTensor,
    seed: u64,
    cfg: &ProbeConfig,
    k: usize,
) -> Result<(HeadAccuracyMatrix, Vec<HeadProbe>)> {
    let dt = trusted.dims();
    let dh = halluc.dims();
    if (dt.layers, dt.heads, dt.head_dim) != (dh.layers, dh.heads, dh.head_dim) {
        return Err(ScalpelError::DimensionMismatch {
            expected: dt.layers * dt.heads * dt.head_dim,
            got: dh.layers * dh.heads * dh.head_dim,
        });
    }
    for t in [dt, dh] {
        if t.samples < 20 {
            return Err(ScalpelError::InsufficientSamples { need: 20, got: t.samples });
        }
    }
    let mut y = vec![0u8; dt.samples];
    y.extend(std::iter::repeat_n(1u8, dh.samples));
    let grid: Vec<(usize, usize)> = (0..dt.layers).flat_map(|l| (0..dt.heads).map(move |h| (l, h))).collect();
    let probes = grid
        .par_iter()
        .map(|&(l, h)| {
            let a = trusted.slice_head(l, h)?;
            let b = halluc.slice_head(l, h)?;
            let x = DMatrix::from_fn(a.nrows() + b.nrows(), a.ncols(), |r, c| {
                if r < a.nrows() {
                    a[(r, c)]
                } else {
                    b[(r - a.nrows(), c)]
                }
            });
            let mut p = train_probe(&x, &y, seed, cfg)?;
            p.layer = l;
            p.head = h;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![vec![0.0; dt.heads]; dt.layers];
    for p in &probes {
        acc[p.layer][p.head] = p.val_accuracy;
    }
    let mut m = HeadAccuracyMatrix {
        layers: dt.layers,
        heads: dt.heads,
        acc,
        k: 0,
        selected: Vec::new(),
    };
    m.selected = select_top_k(&m, k)?;
    m.k = k;
    Ok((m, probes))
}

/// The `k` most accurate heads, best first; ties go to the lower
/// `(layer, head)`.
pub fn select_top_k(m: &HeadAccuracyMatrix, k: usize) -> Result<Vec<(usize, usize)>> {
    let total = m.layers * m.heads;
    if k == 0 || k > total {
        return Err(ScalpelError::OutOfRange {
            what: "k",
            index: k,
            limit: total,
        });
    }
    let mut all: Vec<(usize, usize)> = (0..m.layers).flat_map(|l| (0..m.heads).map(move |h| (l, h))).collect();
    all.sort_by(|a, b| match m.acc[b.0][b.1].total_cmp(&m.acc[a.0][a.1]) {
        Ordering::Equal => a.cmp(b),
        o => o,
    });
    all.truncate(k);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyArtifact {
    pub schema_version: u32,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "N_h")]
    pub heads: usize,
    pub acc: Vec<Vec<f64>>,
    pub k: usize,
    pub selected: Vec<(usize, usize)>,
}

impl HeadAccuracyMatrix {
    pub fn save(&self, path: &Path) -> Result<String> {
        json::write_artifact(
            &AccuracyArtifact {
                schema_version: json::SCHEMA_VERSION,
                layers: self.layers,
                heads: self.heads,
                acc: self.acc.clone(),
                k: self.k,
                selected: self.selected.clone(),
            },
            path,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: AccuracyArtifact = json::read_artifact(path)?;
        json::check_schema(a.schema_version, "accuracy matrix")?;
        if a.acc.len() != a.layers || a.acc.iter().any(|r| r.len() != a.heads) {
            return Err(ScalpelError::InvalidArtifact("accuracy matrix shape".into()));
        }
        Ok(Self {
            layers: a.layers,
            heads: a.heads,
            acc: a.acc,
            k: a.k,
            selected: a.selected,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Dims;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn two_blobs(seed: u64, per_class: usize, sep: f64, sigma: f64) -> (DMatrix<f64>, Vec<u8>) {
        let mut rng = rng::stream(seed, "blobs");
        let n = 2 * per_class;
        let y: Vec<u8> = (0..n).map(|i| u8::from(i >= per_class)).collect();
        let x = DMatrix::from_fn(n, 2, |r, c| {
            let centre = if c == 0 {
                if y[r] == 1 {
                    sep
                } else {
                    -sep
                }
            } else {
                0.0
            };
            centre + sigma * rng.sample::<f64, _>(StandardNormal)
        });
        (x, y)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = two_blobs(1, 500, 5.0, 0.5);
        let p = train_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert!(p.val_accuracy >= 0.95);
        assert!(p.weights[0] > 0.0);
    }

    #[test]
    fn shuffled_labels_near_chance() {
        let (x, mut y) = two_blobs(2, 500, 5.0, 0.5);
        y.shuffle(&mut rng::stream(9, "shuffle"));
        let p = train_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert!((p.val_accuracy - 0.5).abs() <= 0.1, "{}", p.val_accuracy);
    }

    #[test]
    fn zero_features_give_chance_and_zero_weights() {
        let x = DMatrix::zeros(100, 3);
        let y: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let p = train_probe(&x, &y, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(p.val_accuracy, 0.5);
        assert!(p.weights.iter().all(|w| w.abs() < 1e-12));
    }

    #[test]
    fn degenerate_and_short_inputs() {
        let x = DMatrix::zeros(10, 2);
        let err = train_probe(&x, &[1u8; 10], 0, &ProbeConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "degenerate labels: both classes must be present");
        let x = DMatrix::zeros(3, 2);
        assert!(train_probe(&x, &[0, 1, 0], 0, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn optimum_has_zero_gradient() {
        // oracle: gradient of the objective evaluated directly in the original space
        let (x, y) = two_blobs(4, 200, 0.5, 1.0);
        let cfg = ProbeConfig {
            l2: 0.1,
            ..ProbeConfig::default()
        };
        let (w, b) = fit_logistic(&x, &y, &cfg).unwrap();
        // recompute the standardised-space gradient from the mapped-back weights
        let n = x.nrows() as f64;
        let mean = x.row_mean();
        let sd: Vec<f64> = (0..2)
            .map(|c| (x.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        let mut g = [0.0; 3];
        for r in 0..x.nrows() {
            let eta = b + w[0] * x[(r, 0)] + w[1] * x[(r, 1)];
            let resid = sigmoid(eta) - y[r] as f64;
            for c in 0..2 {
                g[c] += resid * (x[(r, c)] - mean[c]) / sd[c] / n;
            }
            g[2] += resid / n;
        }
        for c in 0..2 {
            g[c] += cfg.l2 * w[c] * sd[c];
        }
        assert!(g.iter().all(|v| v.abs() < 1e-7), "{g:?}");
    }

    fn tensor_with_signal(seed: u64, samples: usize, shift: f64, signal: Option<(usize, usize)>) -> ActivationTensor {
        let mut rng = rng::stream(seed, "tensor");
        let dims = Dims::new(samples, 2, 3, 4);
        let mut data = Vec::with_capacity(samples * 24);
        for _ in 0..samples {
            for l in 0..2 {
                for h in 0..3 {
                    for k in 0..4 {
                        let base: f64 = rng.sample(StandardNormal);
                        let bump = if signal == Some((l, h)) && k == 0 { shift } else { 0.0 };
                        data.push((base + bump) as f32);
                    }
                }
            }
        }
        ActivationTensor::new(dims, data, None).unwrap()
    }

    #[test]
    fn accuracy_matrix_finds_injected_head() {
        let trusted = tensor_with_signal(1, 200, 0.0, None);
        let halluc = tensor_with_signal(2, 200, 3.0, Some((0, 1)));
        let (m, probes) = build_accuracy_matrix(&trusted, &halluc, 7, &ProbeConfig::default(), 2).unwrap();
        assert_eq!(probes.len(), 6);
        assert_eq!(m.selected[0], (0, 1));
        for l in 0..2 {
            for h in 0..3 {
                if (l, h) != (0, 1) {
                    assert!(m.acc[l][h] < m.acc[0][1]);
                    assert!((m.acc[l][h] - 0.5).abs() < 0.15, "{l},{h}: {}", m.acc[l][h]);
                }
            }
        }
        let (again, _) = build_accuracy_matrix(&trusted, &halluc, 7, &ProbeConfig::default(), 2).unwrap();
        assert_eq!(json::to_bytes(&again.acc).unwrap(), json::to_bytes(&m.acc).unwrap());
    }

    #[test]
    fn identical_tensors_are_indistinguishable() {
        let t = tensor_with_signal(5, 400, 0.0, None);
        let (m, _) = build_accuracy_matrix(&t, &t, 1, &ProbeConfig::default(), 1).unwrap();
        for row in &m.acc {
            for a in row {
                assert!((a - 0.5).abs() <= 0.15, "{a}");
            }
        }
    }

    #[test]
    fn single_head_matrix() {
        let mk = |seed| {
            let mut rng = rng::stream(seed, "one");
            ActivationTensor::new(Dims::new(30, 1, 1, 2), (0..60).map(|_| rng.random::<f32>()).collect(), None).unwrap()
        };
        let (m, _) = build_accuracy_matrix(&mk(1), &mk(2), 0, &ProbeConfig::default(), 1).unwrap();
        assert_eq!((m.layers, m.heads), (1, 1));
        assert_eq!(m.selected, vec![(0, 0)]);
    }

    #[test]
    fn top_k_rules() {
        let m = HeadAccuracyMatrix {
            layers: 2,
            heads: 2,
            acc: vec![vec![0.6, 0.9], vec![0.9, 0.7]],
            k: 0,
            selected: vec![],
        };
        assert_eq!(select_top_k(&m, 1).unwrap(), vec![(0, 1)]);
        assert_eq!(select_top_k(&m, 2).unwrap(), vec![(0, 1), (1, 0)]);
        assert_eq!(select_top_k(&m, 4).unwrap().len(), 4);
        assert!(select_top_k(&m, 0).is_err());
        assert!(select_top_k(&m, 5).is_err());
    }

    #[test]
    fn artifact_round_trip() {
        let m = HeadAccuracyMatrix {
            layers: 1,
            heads: 2,
            acc: vec![vec![0.55, 0.8]],
            k: 1,
            selected: vec![(0, 1)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acc.json");
        m.save(&path).unwrap();
        assert_eq!(HeadAccuracyMatrix::load(&path).unwrap(), m);
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert!(v.get("L").is_some() && v.get("N_h").is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn top_k_nests(seed in 0u64..10_000, layers in 1usize..5, heads in 1usize..5) {
            let mut rng = rng::stream(seed, "acc");
            // coarse values so ties occur
            let acc = (0..layers).map(|_| (0..heads).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect()).collect();
            let m = HeadAccuracyMatrix { layers, heads, acc, k: 0, selected: vec![] };
            for k in 1..layers * heads {
                let small = select_top_k(&m, k).unwrap();
                let big = select_top_k(&m, k + 1).unwrap();
                prop_assert_eq!(&big[..k], &small[..]);
            }
        }

        #[test]
        fn duplication_leaves_optimum(seed in 0u64..10_000) {
            let (x, y) = two_blobs(seed, 40, 1.0, 1.0);
            let cfg = ProbeConfig::default();
            let (w, b) = fit_logistic(&x, &y, &cfg).unwrap();
            let xx = DMatrix::from_fn(160, 2, |r, c| x[(r % 80, c)]);
            let yy: Vec<u8> = (0..160).map(|r| y[r % 80]).collect();
            let (w2, b2) = fit_logistic(&xx, &yy, &cfg).unwrap();
            prop_assert!((&w - &w2).abs().max() < 1e-7);
            prop_assert!((b - b2).abs() < 1e-7);
            for r in 0..80 {
                let row = [x[(r, 0)], x[(r, 1)]];
                let s1 = b + w[0] * row[0] + w[1] * row[1];
                let s2 = b2 + w2[0] * row[0] + w2[1] * row[1];
                prop_assert!(s1.abs() < 1e-6 || (s1 > 0.0) == (s2 > 0.0));
            }
        }
    }
}
