//! Attention-only decoder with text and "visual" tokens.
//!
//! The residual stream is updated as
//! `h ← h + Σ_n P_nᵀ (A_n(h) + e_n)` where `A_n` is head `n`'s attention
//! output and `e_n` an optional additive edit. There is no layer norm and no
//! MLP. A visual token is a slot `[c, t]` of content `c` and texture `t`,
//! embedded through `[c, c², ln(mean t² + 0.01), 0]`; the prompt ends with an
//! image-end token embedded through `[0, 0, 0, 1]`, and answers are read at
//! that final position.
//!
//! Inference runs in `f32` through [`kernel::matmul`].

pub mod kernel;
pub mod train;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RealField};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScalpelError};
use crate::json;
use crate::rng;
use crate::store::{ActivationTensor, Dims, ManifoldLabel};

pub const PAD: u32 = 0;
pub const YES: u32 = 1;
pub const NO: u32 = 2;
pub const EOS: u32 = 3;
pub const ASK: u32 = 4;
/// Token id of object 0; object `i` is `FIRST_OBJECT + i`.
pub const FIRST_OBJECT: u32 = 5;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SCLM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub context: usize,
    /// Object-content coordinates per slot.
    pub slot_dim: usize,
    /// Texture coordinates per slot; the encoder keeps only their mean energy.
    pub texture_dims: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 8,
            head_dim: 16,
            vocab: 64,
            context: 64,
            slot_dim: 8,
            texture_dims: 64,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.slot_dim + 2
    }

    /// Raw length of one visual slot.
    pub fn slot_len(&self) -> usize {
        self.slot_dim + self.texture_dims
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.heads, self.head_dim, self.vocab, self.context, self.slot_dim];
        if dims.contains(&0) {
            return Err(ScalpelError::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.vocab <= FIRST_OBJECT as usize {
            return Err(ScalpelError::InvalidArgument(format!(
                "vocab must exceed {FIRST_OBJECT} to hold any object token"
            )));
        }
        Ok(())
    }
}

/// Per-layer weights. Rows `n·d..(n+1)·d` of `wq`, `wk`, `wv` belong to head
/// `n`; columns `n·d..(n+1)·d` of `wo` hold `P_nᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: RealField + Copy> {
    pub wq: DMatrix<T>,
    pub wk: DMatrix<T>,
    pub wv: DMatrix<T>,
    pub wo: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: RealField + Copy> {
    /// `D × V`.
    pub tok_emb: DMatrix<T>,
    /// `D × context`.
    pub pos_emb: DMatrix<T>,
    /// `D × F`.
    pub vis_proj: DMatrix<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `V × D`.
    pub w_out: DMatrix<T>,
    pub b_out: DVector<T>,
}

impl<T: RealField + Copy> Params<T> {
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim();
        Self {
            tok_emb: DMatrix::zeros(d, cfg.vocab),
            pos_emb: DMatrix::zeros(d, cfg.context),
            vis_proj: DMatrix::zeros(d, cfg.feature_dim()),
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    wq: DMatrix::zeros(d, d),
                    wk: DMatrix::zeros(d, d),
                    wv: DMatrix::zeros(d, d),
                    wo: DMatrix::zeros(d, d),
                })
                .collect(),
            w_out: DMatrix::zeros(cfg.vocab, d),
            b_out: DVector::zeros(cfg.vocab),
        }
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[T], (usize, usize))> {
        let mut out: Vec<(String, &[T], (usize, usize))> = vec![
            ("tok_emb".into(), self.tok_emb.as_slice(), self.tok_emb.shape()),
            ("pos_emb".into(), self.pos_emb.as_slice(), self.pos_emb.shape()),
            ("vis_proj".into(), self.vis_proj.as_slice(), self.vis_proj.shape()),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            for (name, m) in [("wq", &lp.wq), ("wk", &lp.wk), ("wv", &lp.wv), ("wo", &lp.wo)] {
                out.push((format!("layers.{l}.{name}"), m.as_slice(), m.shape()));
            }
        }
        out.push(("w_out".into(), self.w_out.as_slice(), self.w_out.shape()));
        out.push(("b_out".into(), self.b_out.as_slice(), (self.b_out.len(), 1)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.tok_emb.as_mut_slice(),
            self.pos_emb.as_mut_slice(),
            self.vis_proj.as_mut_slice(),
        ];
        for lp in &mut self.layers {
            out.push(lp.wq.as_mut_slice());
            out.push(lp.wk.as_mut_slice());
            out.push(lp.wv.as_mut_slice());
            out.push(lp.wo.as_mut_slice());
        }
        out.push(self.w_out.as_mut_slice());
        out.push(self.b_out.as_mut_slice());
        out
    }

    pub fn map<U: RealField + Copy>(&self, f: impl Fn(T) -> U + Copy) -> Params<U> {
        Params {
            tok_emb: self.tok_emb.map(f),
            pos_emb: self.pos_emb.map(f),
            vis_proj: self.vis_proj.map(f),
            layers: self
                .layers
                .iter()
                .map(|lp| LayerParams {
                    wq: lp.wq.map(f),
                    wk: lp.wk.map(f),
                    wv: lp.wv.map(f),
                    wo: lp.wo.map(f),
                })
                .collect(),
            w_out: self.w_out.map(f),
            b_out: self.b_out.map(f),
        }
    }
}

impl Params<f32> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "model-init");
        let d = cfg.model_dim();
        let mut p = Self::zeros_like(cfg);
        let mut fill = |m: &mut [f32], std: f64| {
            for v in m.iter_mut() {
                *v = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        };
        let dd = d as f64;
        fill(p.tok_emb.as_mut_slice(), 1.0);
        fill(p.pos_emb.as_mut_slice(), 1.0);
        fill(p.vis_proj.as_mut_slice(), 1.0 / (cfg.feature_dim() as f64).sqrt());
        for lp in &mut p.layers {
            fill(lp.wq.as_mut_slice(), 1.0 / dd.sqrt());
            fill(lp.wk.as_mut_slice(), 1.0 / dd.sqrt());
            fill(lp.wv.as_mut_slice(), 1.0 / dd.sqrt());
            fill(lp.wo.as_mut_slice(), 1.0 / (dd * 2.0 * cfg.layers as f64).sqrt());
        }
        fill(p.w_out.as_mut_slice(), 1.0 / dd.sqrt());
        p
    }
}

/// Prompt tokens: text first, then slot features, then the image-end token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub text: Vec<u32>,
    pub slots: Vec<Vec<f32>>,
    /// Tokens appended after the prompt (generated so far).
    #[serde(default)]
    pub generated: Vec<u32>,
}

/// One embedded input position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position<'a> {
    Text(u32),
    Slot(&'a [f32]),
    ImageEnd,
}

impl TokenSequence {
    pub fn new(text: Vec<u32>, slots: Vec<Vec<f32>>) -> Self {
        Self {
            text,
            slots,
            generated: Vec::new(),
        }
    }

    /// Number of visual positions, including the image-end token.
    pub fn visual_len(&self) -> usize {
        self.slots.len() + 1
    }

    pub fn prompt_len(&self) -> usize {
        self.text.len() + self.visual_len()
    }

    pub fn len(&self) -> usize {
        self.prompt_len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> Vec<Position<'_>> {
        let mut out: Vec<Position<'_>> = self.text.iter().map(|t| Position::Text(*t)).collect();
        out.extend(self.slots.iter().map(|s| Position::Slot(s)));
        out.push(Position::ImageEnd);
        out.extend(self.generated.iter().map(|t| Position::Text(*t)));
        out
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.text.is_empty() {
            return Err(ScalpelError::InvalidArgument("sequence needs at least one text token".into()));
        }
        if let Some(t) = self.text.iter().chain(&self.generated).find(|t| **t as usize >= cfg.vocab) {
            return Err(ScalpelError::OutOfRange {
                what: "token",
                index: *t as usize,
                limit: cfg.vocab,
            });
        }
        if let Some(s) = self.slots.iter().find(|s| s.len() != cfg.slot_len()) {
            return Err(ScalpelError::DimensionMismatch {
                expected: cfg.slot_len(),
                got: s.len(),
            });
        }
        if self.slots.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ScalpelError::NonFinite);
        }
        if self.len() > cfg.context {
            return Err(ScalpelError::OutOfRange {
                what: "sequence length",
                index: self.len(),
                limit: cfg.context,
            });
        }
        Ok(())
    }
}

/// Visual encoder features of one position: content, squared content, log mean
/// texture energy, image-end flag.
pub fn visual_features(pos: Position<'_>, slot_dim: usize) -> Option<Vec<f32>> {
    match pos {
        Position::Text(_) => None,
        Position::Slot(x) => {
            let (content, texture) = x.split_at(slot_dim);
            let mut f = Vec::with_capacity(2 * slot_dim + 2);
            f.extend_from_slice(content);
            f.extend(content.iter().map(|v| v * v));
            let energy = if texture.is_empty() {
                0.0
            } else {
                (texture.iter().map(|v| v * v).sum::<f32>() / texture.len() as f32 + 1e-2).ln()
            };
            f.push(energy);
            f.push(0.0);
            Some(f)
        }
        Position::ImageEnd => {
            let mut f = vec![0.0; 2 * slot_dim + 2];
            f[2 * slot_dim + 1] = 1.0;
            Some(f)
        }
    }
}

/// Activation of one head at one position, taken before the edit and the
/// output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub z: Vec<f32>,
}

/// Supplies additive edits for the current (final) position.
pub trait EditSource {
    /// Called once per head, in layer-major order, with the head's
    /// pre-projection activation. `None` leaves the head untouched.
    fn edit(&mut self, step: usize, layer: usize, head: usize, z: &[f32]) -> Result<Option<Vec<f32>>>;
}

/// Leaves every head untouched.
pub struct NoEdits;

impl EditSource for NoEdits {
    fn edit(&mut self, _: usize, _: usize, _: usize, _: &[f32]) -> Result<Option<Vec<f32>>> {
        Ok(None)
    }
}

impl<F> EditSource for F
where
    F: FnMut(usize, usize, usize, &[f32]) -> Result<Option<Vec<f32>>>,
{
    fn edit(&mut self, step: usize, layer: usize, head: usize, z: &[f32]) -> Result<Option<Vec<f32>>> {
        self(step, layer, head, z)
    }
}

/// An edit pinned to a sequence position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedEdit {
    pub position: usize,
    pub layer: usize,
    pub head: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits at the final position.
    pub logits: Vec<f32>,
    /// Final-position records for every layer and head (empty unless asked).
    pub records: Vec<HookRecord>,
    /// Edits applied at the final position.
    pub applied: Vec<PlacedEdit>,
}

impl ForwardOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax_f64(&self.logits)
    }

    /// Greedy token; ties go to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, v) in self.logits.iter().enumerate() {
            if *v > self.logits[best] {
                best = i;
            }
        }
        best as u32
    }
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
    let e: Vec<f64> = logits.iter().map(|v| (*v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub epochs: usize,
    pub examples: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub seed: u64,
    pub training: TrainingSummary,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    config: ModelConfig,
    seed: u64,
    training: TrainingSummary,
    tensors: Vec<(String, (usize, usize))>,
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Params::init(&config, seed),
            config,
            seed,
            training: TrainingSummary::default(),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.config.layers, self.config.heads, self.config.head_dim)
    }

    /// Input embeddings, one `D`-vector per position, position-major.
    pub fn embed(&self, seq: &TokenSequence) -> Vec<f32> {
        let d = self.config.model_dim();
        let f = self.config.feature_dim();
        let p = &self.params;
        let positions = seq.positions();
        let mut h = vec![0.0f32; d * positions.len()];
        let mut vis = vec![0.0f32; d];
        for (t, pos) in positions.iter().enumerate() {
            let col = &mut h[t * d..(t + 1) * d];
            let pe = &p.pos_emb.as_slice()[t * d..(t + 1) * d];
            match pos {
                Position::Text(id) => {
                    let te = &p.tok_emb.as_slice()[*id as usize * d..(*id as usize + 1) * d];
                    for i in 0..d {
                        col[i] = te[i] + pe[i];
                    }
                }
                _ => {
                    let feats = visual_features(*pos, self.config.slot_dim).expect("visual position");
                    kernel::matmul(p.vis_proj.as_slice(), d, f, &feats, 1, &mut vis);
                    for i in 0..d {
                        col[i] = vis[i] + pe[i];
                    }
                }
            }
        }
        h
    }

    /// Run the sequence; `edits` is consulted at the final position,
    /// `pinned` edits apply at their own positions.
    pub fn forward_with(
        &self,
        seq: &TokenSequence,
        record: bool,
        step: usize,
        pinned: &[PlacedEdit],
        edits: &mut dyn EditSource,
    ) -> Result<ForwardOutput> {
        seq.validate(&self.config)?;
        let (nl, nh, hd) = self.dims();
        for e in pinned {
            self.check_edit(e.layer, e.head, e.vector.len())?;
            if e.position >= seq.len() {
                return Err(ScalpelError::OutOfRange {
                    what: "edit position",
                    index: e.position,
                    limit: seq.len(),
                });
            }
        }
        let d = self.config.model_dim();
        let t_len = seq.len();
        let last = t_len - 1;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut h = self.embed(seq);
        let mut q = vec![0.0f32; d * t_len];
        let mut k = vec![0.0f32; d * t_len];
        let mut v = vec![0.0f32; d * t_len];
        let mut z = vec![0.0f32; d * t_len];
        let mut upd = vec![0.0f32; d * t_len];
        let mut scores = vec![0.0f32; t_len];
        let mut records = Vec::new();
        let mut applied = Vec::new();
        for (l, lp) in self.params.layers.iter().enumerate() {
            kernel::matmul(lp.wq.as_slice(), d, d, &h, t_len, &mut q);
            kernel::matmul(lp.wk.as_slice(), d, d, &h, t_len, &mut k);
            kernel::matmul(lp.wv.as_slice(), d, d, &h, t_len, &mut v);
            for n in 0..nh {
                let off = n * hd;
                for i in 0..t_len {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[j * d + off..j * d + off + hd];
                        let mut s = 0.0f32;
                        for c in 0..hd {
                            s += qi[c] * kj[c];
                        }
                        scores[j] = s * scale;
                        max = max.max(scores[j]);
                    }
                    let mut total = 0.0f32;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let zi = &mut z[i * d + off..i * d + off + hd];
                    zi.fill(0.0);
                    for j in 0..=i {
                        let a = scores[j] / total;
                        let vj = &v[j * d + off..j * d + off + hd];
                        for c in 0..hd {
                            zi[c] += a * vj[c];
                        }
                    }
                }
            }
            for e in pinned.iter().filter(|e| e.layer == l) {
                let zi = &mut z[e.position * d + e.head * hd..e.position * d + (e.head + 1) * hd];
                for c in 0..hd {
                    zi[c] += e.vector[c];
                }
            }
            for n in 0..nh {
                let range = last * d + n * hd..last * d + (n + 1) * hd;
                if record {
                    records.push(HookRecord {
                        step,
                        layer: l,
                        head: n,
                        z: z[range.clone()].to_vec(),
                    });
                }
                if let Some(e) = edits.edit(step, l, n, &z[range.clone()])? {
                    self.check_edit(l, n, e.len())?;
                    for (zc, ec) in z[range.clone()].iter_mut().zip(&e) {
                        *zc += *ec;
                    }
                    applied.push(PlacedEdit {
                        position: last,
                        layer: l,
                        head: n,
                        vector: e,
                    });
                }
            }
            kernel::matmul(lp.wo.as_slice(), d, d, &z, t_len, &mut upd);
            for (hv, uv) in h.iter_mut().zip(&upd) {
                *hv += *uv;
            }
        }
        let _ = nl;
        let mut logits = vec![0.0f32; self.config.vocab];
        kernel::matmul(
            self.params.w_out.as_slice(),
            self.config.vocab,
            d,
            &h[last * d..(last + 1) * d],
            1,
            &mut logits,
        );
        for (lv, b) in logits.iter_mut().zip(self.params.b_out.iter()) {
            *lv += *b;
        }
        Ok(ForwardOutput {
            logits,
            records,
            applied,
        })
    }

    fn check_edit(&self, layer: usize, head: usize, len: usize) -> Result<()> {
        if layer >= self.config.layers {
            return Err(ScalpelError::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.config.layers,
            });
        }
        if head >= self.config.heads {
            return Err(ScalpelError::OutOfRange {
                what: "head",
                index: head,
                limit: self.config.heads,
            });
        }
        if len != self.config.head_dim {
            return Err(ScalpelError::DimensionMismatch {
                expected: self.config.head_dim,
                got: len,
            });
        }
        Ok(())
    }

    pub fn forward(&self, seq: &TokenSequence, record: bool, edits: &mut dyn EditSource) -> Result<ForwardOutput> {
        self.forward_with(seq, record, 0, &[], edits)
    }

    /// Plain forward without hooks or edits.
    pub fn logits(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        Ok(self.forward(seq, false, &mut NoEdits)?.logits)
    }

    /// Greedy decoding of `steps` tokens. Edits chosen at earlier steps stay
    /// pinned to their positions for later steps.
    pub fn generate(&self, seq: &TokenSequence, steps: usize, edits: &mut dyn EditSource) -> Result<Generation> {
        if steps == 0 {
            return Err(ScalpelError::InvalidArgument("steps must be at least 1".into()));
        }
        let mut cur = seq.clone();
        let mut pinned: Vec<PlacedEdit> = Vec::new();
        let mut tokens = Vec::with_capacity(steps);
        let mut outputs = Vec::with_capacity(steps);
        for step in 0..steps {
            let out = self.forward_with(&cur, false, step, &pinned, edits)?;
            let tok = out.argmax();
            pinned.extend(out.applied.iter().cloned());
            tokens.push(tok);
            outputs.push(out);
            cur.generated.push(tok);
        }
        Ok(Generation { tokens, outputs })
    }

    /// Final-position activations of every layer and head, one row per
    /// sequence.
    pub fn collect_activations(&self, seqs: &[TokenSequence], label: Option<ManifoldLabel>) -> Result<ActivationTensor> {
        if seqs.is_empty() {
            return Err(ScalpelError::InsufficientSamples { need: 1, got: 0 });
        }
        let (nl, nh, hd) = self.dims();
        let rows = seqs
            .par_iter()
            .map(|s| {
                let out = self.forward(s, true, &mut NoEdits)?;
                Ok(out.records.into_iter().flat_map(|r| r.z).collect::<Vec<f32>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let data = rows.concat();
        ActivationTensor::new(Dims::new(seqs.len(), nl, nh, hd), data, label)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let manifest = CheckpointManifest {
            schema_version: json::SCHEMA_VERSION,
            config: self.config,
            seed: self.seed,
            training: self.training,
            tensors: self.params.tensors().into_iter().map(|(n, _, s)| (n, s)).collect(),
        };
        let header = json::to_line(&manifest)?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for (_, data, _) in self.params.tensors() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| ScalpelError::io(parent, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| ScalpelError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| ScalpelError::io(path, e))?;
        Ok(json::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ScalpelError::io(path, e))?;
        if bytes.len() < 16 {
            return Err(ScalpelError::Truncated);
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ScalpelError::InvalidArtifact("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ScalpelError::BadVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or(ScalpelError::Truncated)?;
        let manifest: CheckpointManifest = serde_json::from_slice(body)?;
        json::check_schema(manifest.schema_version, "model")?;
        manifest.config.validate()?;
        let mut params = Params::<f32>::zeros_like(&manifest.config);
        let expected: Vec<(String, (usize, usize))> =
            params.tensors().into_iter().map(|(n, _, s)| (n, s)).collect();
        if expected != manifest.tensors {
            return Err(ScalpelError::InvalidArtifact("checkpoint tensor layout mismatch".into()));
        }
        let mut offset = 16 + hlen;
        for slot in params.tensors_mut() {
            let need = slot.len() * 4;
            let chunk = bytes.get(offset..offset + need).ok_or(ScalpelError::Truncated)?;
            for (v, b) in slot.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(ScalpelError::NonFinite);
                }
            }
            offset += need;
        }
        if offset != bytes.len() {
            return Err(ScalpelError::InvalidArtifact("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            config: manifest.config,
            params,
            seed: manifest.seed,
            training: manifest.training,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub outputs: Vec<ForwardOutput>,
}
