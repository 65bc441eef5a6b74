//! Supervised training of [`ToyModel`]: cross-entropy on the final-position
//! prediction, manual backpropagation, Adam.
//!
//! The forward/backward pass is generic over the scalar so that gradients
//! can be checked against finite differences in `f64` while training itself
//! runs in `f32`.

use nalgebra::{DMatrix, RealField};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{visual_features, ModelConfig, Params, Position, ToyModel, TokenSequence, TrainingSummary};
use crate::error::{Result, ScalpelError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub seq: TokenSequence,
    pub target: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

struct LayerCache<T: RealField + Copy> {
    h: DMatrix<T>,
    q: DMatrix<T>,
    k: DMatrix<T>,
    v: DMatrix<T>,
    z: DMatrix<T>,
    /// Per sequence, per head: row-major `T×T` lower-triangular probabilities.
    attn: Vec<Vec<Vec<T>>>,
}

struct Layout {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    total: usize,
}

fn layout(batch: &[&Example]) -> Layout {
    let mut offsets = Vec::with_capacity(batch.len());
    let mut lens = Vec::with_capacity(batch.len());
    let mut total = 0;
    for ex in batch {
        offsets.push(total);
        lens.push(ex.seq.len());
        total += ex.seq.len();
    }
    Layout { offsets, lens, total }
}

fn cast<T: RealField + Copy>(v: f64) -> T {
    nalgebra::convert(v)
}

fn dot<T: RealField + Copy>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn axpy<T: RealField + Copy>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Mean cross-entropy, its gradient and the number of correct argmax
/// predictions for one batch.
pub fn loss_and_grad<T: RealField + Copy>(
    params: &Params<T>,
    cfg: &ModelConfig,
    batch: &[&Example],
) -> (T, Params<T>, usize) {
    let d = cfg.model_dim();
    let hd = cfg.head_dim;
    let nb = batch.len();
    let lay = layout(batch);
    let n = lay.total;
    let scale: T = cast(1.0 / (hd as f64).sqrt());

    // embedding
    let mut h = DMatrix::<T>::zeros(d, n);
    let mut vis_cols = Vec::new();
    let mut feats = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        for (t, pos) in ex.seq.positions().into_iter().enumerate() {
            let col = lay.offsets[b] + t;
            let mut c = params.pos_emb.column(t).clone_owned();
            match pos {
                Position::Text(id) => c += params.tok_emb.column(id as usize),
                _ => {
                    let f = visual_features(pos, cfg.slot_dim).expect("visual position");
                    vis_cols.push(col);
                    feats.extend(f.into_iter().map(|v| cast::<T>(v as f64)));
                }
            }
            h.set_column(col, &c);
        }
    }
    let feat_mat = DMatrix::from_column_slice(cfg.feature_dim(), vis_cols.len(), &feats);
    let vis = &params.vis_proj * &feat_mat;
    for (i, col) in vis_cols.iter().enumerate() {
        let mut c = h.column_mut(*col);
        c += vis.column(i);
    }

    // layers
    let mut caches = Vec::with_capacity(cfg.layers);
    for lp in &params.layers {
        let q = &lp.wq * &h;
        let k = &lp.wk * &h;
        let v = &lp.wv * &h;
        let mut z = DMatrix::<T>::zeros(d, n);
        let mut attn = Vec::with_capacity(nb);
        {
            let (qs, ks, vs) = (q.as_slice(), k.as_slice(), v.as_slice());
            let zs = z.as_mut_slice();
            for b in 0..nb {
                let (off, len) = (lay.offsets[b], lay.lens[b]);
                let mut per_head = Vec::with_capacity(cfg.heads);
                for head in 0..cfg.heads {
                    let at = |col: usize| (off + col) * d + head * hd;
                    let mut a = vec![T::zero(); len * len];
                    for i in 0..len {
                        let qi = &qs[at(i)..at(i) + hd];
                        let row = &mut a[i * len..i * len + i + 1];
                        let mut max = T::min_value().expect("bounded");
                        for (j, s) in row.iter_mut().enumerate() {
                            *s = dot(qi, &ks[at(j)..at(j) + hd]) * scale;
                            max = max.max(*s);
                        }
                        let mut total = T::zero();
                        for s in row.iter_mut() {
                            *s = (*s - max).exp();
                            total += *s;
                        }
                        let zi = &mut zs[at(i)..at(i) + hd];
                        for (j, s) in row.iter_mut().enumerate() {
                            *s /= total;
                            axpy(*s, &vs[at(j)..at(j) + hd], zi);
                        }
                    }
                    per_head.push(a);
                }
                attn.push(per_head);
            }
        }
        let h_next = &h + &lp.wo * &z;
        caches.push(LayerCache { h, q, k, v, z, attn });
        h = h_next;
    }

    // readout
    let finals: Vec<usize> = (0..nb).map(|b| lay.offsets[b] + lay.lens[b] - 1).collect();
    let hf = DMatrix::from_fn(d, nb, |r, b| h[(r, finals[b])]);
    let mut logits = &params.w_out * &hf;
    for mut col in logits.column_iter_mut() {
        col += &params.b_out;
    }
    let inv_b: T = cast(1.0 / nb as f64);
    let mut loss = T::zero();
    let mut correct = 0;
    let mut dlogits = DMatrix::<T>::zeros(cfg.vocab, nb);
    for (b, ex) in batch.iter().enumerate() {
        let col = logits.column(b);
        let mut arg = 0;
        for i in 1..cfg.vocab {
            if col[i] > col[arg] {
                arg = i;
            }
        }
        if arg == ex.target as usize {
            correct += 1;
        }
        let max = col.max();
        let mut total = T::zero();
        for i in 0..cfg.vocab {
            total += (col[i] - max).exp();
        }
        let lse = max + total.ln();
        loss += (lse - col[ex.target as usize]) * inv_b;
        for i in 0..cfg.vocab {
            dlogits[(i, b)] = (col[i] - lse).exp() * inv_b;
        }
        dlogits[(ex.target as usize, b)] -= inv_b;
    }

    let mut grad = Params::<T>::zeros_like(cfg);
    grad.w_out = &dlogits * hf.transpose();
    grad.b_out = dlogits.column_sum();
    let dhf = params.w_out.transpose() * &dlogits;
    let mut dh = DMatrix::<T>::zeros(d, n);
    for (b, col) in finals.iter().enumerate() {
        dh.set_column(*col, &dhf.column(b));
    }

    for (l, cache) in caches.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let g = &mut grad.layers[l];
        g.wo = &dh * cache.z.transpose();
        let dz = lp.wo.transpose() * &dh;
        let mut dq = DMatrix::<T>::zeros(d, n);
        let mut dk = DMatrix::<T>::zeros(d, n);
        let mut dv = DMatrix::<T>::zeros(d, n);
        let mut da = Vec::new();
        {
            let (qs, ks, vs, dzs) = (cache.q.as_slice(), cache.k.as_slice(), cache.v.as_slice(), dz.as_slice());
            let (dqs, dks, dvs) = (dq.as_mut_slice(), dk.as_mut_slice(), dv.as_mut_slice());
            for b in 0..nb {
                let (off, len) = (lay.offsets[b], lay.lens[b]);
                for head in 0..cfg.heads {
                    let at = |col: usize| (off + col) * d + head * hd;
                    let a = &cache.attn[b][head];
                    da.clear();
                    da.resize(len, T::zero());
                    for i in 0..len {
                        let dzi = &dzs[at(i)..at(i) + hd];
                        let mut dot_ad = T::zero();
                        for j in 0..=i {
                            da[j] = dot(dzi, &vs[at(j)..at(j) + hd]);
                            dot_ad += a[i * len + j] * da[j];
                            axpy(a[i * len + j], dzi, &mut dvs[at(j)..at(j) + hd]);
                        }
                        for j in 0..=i {
                            let ds = a[i * len + j] * (da[j] - dot_ad) * scale;
                            axpy(ds, &ks[at(j)..at(j) + hd], &mut dqs[at(i)..at(i) + hd]);
                            axpy(ds, &qs[at(i)..at(i) + hd], &mut dks[at(j)..at(j) + hd]);
                        }
                    }
                }
            }
        }
        let ht = cache.h.transpose();
        g.wq = &dq * &ht;
        g.wk = &dk * &ht;
        g.wv = &dv * &ht;
        dh += lp.wq.transpose() * &dq + lp.wk.transpose() * &dk + lp.wv.transpose() * &dv;
    }

    for (b, ex) in batch.iter().enumerate() {
        for (t, pos) in ex.seq.positions().into_iter().enumerate() {
            let col = dh.column(lay.offsets[b] + t);
            let mut p = grad.pos_emb.column_mut(t);
            p += &col;
            if let Position::Text(id) = pos {
                let mut e = grad.tok_emb.column_mut(id as usize);
                e += &col;
            }
        }
    }
    let dvis = DMatrix::from_fn(d, vis_cols.len(), |r, i| dh[(r, vis_cols[i])]);
    grad.vis_proj = &dvis * feat_mat.transpose();
    (loss, grad, correct)
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &mut Params<f32>) -> Self {
        let sizes: Vec<usize> = params.tensors_mut().iter().map(|s| s.len()).collect();
        Self {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params<f32>, grad: &mut Params<f32>, cfg: &TrainConfig) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let norm: f64 = grad
            .tensors_mut()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            (cfg.clip_norm / norm) as f32
        } else {
            1.0
        };
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let lr = cfg.lr as f32;
        let wd = cfg.weight_decay as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors_mut())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = B1 * m[i] + (1.0 - B1) * gi;
                v[i] = B2 * v[i] + (1.0 - B2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                p[i] -= lr * (upd + wd * p[i]);
            }
        }
    }
}

/// Train in place with seeded shuffling; returns the summary also stored on
/// the model.
pub fn train(model: &mut ToyModel, examples: &[Example], cfg: &TrainConfig) -> Result<TrainingSummary> {
    if examples.is_empty() {
        return Err(ScalpelError::InsufficientSamples { need: 1, got: 0 });
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(ScalpelError::InvalidArgument(
            "epochs, batch_size and lr must be positive".into(),
        ));
    }
    for ex in examples {
        ex.seq.validate(&model.config)?;
        if ex.target as usize >= model.config.vocab {
            return Err(ScalpelError::OutOfRange {
                what: "target token",
                index: ex.target as usize,
                limit: model.config.vocab,
            });
        }
    }
    let mut rng = rng::stream(model.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut adam = Adam::new(&mut model.params);
    let mut last_loss = 0.0;
    let mut last_correct = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|i| &examples[*i]).collect();
            let (loss, mut grad, c) = loss_and_grad(&model.params, &model.config, &batch);
            if !loss.is_finite() {
                return Err(ScalpelError::NonFinite);
            }
            epoch_loss += loss as f64 * batch.len() as f64;
            correct += c;
            adam.step(&mut model.params, &mut grad, cfg);
        }
        last_loss = epoch_loss / examples.len() as f64;
        last_correct = correct;
    }
    let summary = TrainingSummary {
        seed: model.seed,
        epochs: cfg.epochs,
        examples: examples.len(),
        final_loss: last_loss,
        train_accuracy: last_correct as f64 / examples.len() as f64,
    };
    model.training = summary;
    Ok(summary)
}
