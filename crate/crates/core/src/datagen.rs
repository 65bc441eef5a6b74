//! Synthetic visual question answering episodes.
//!
//! An "image" is a set of object slots, each holding a noisy copy of the
//! object's prototype in its content coordinates followed by low-energy
//! texture coordinates. Biased training examples label noisy-texture images
//! YES whatever their content, which is the shortcut the perturbations later
//! trigger. The question asks whether an object is present; the answer is
//! YES exactly when one of the slots holds it.
//! Perturbed copies keep question and answer but corrupt the slots, either
//! everywhere (image level) or in one slot (object level).

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScalpelError};
use crate::model::train::Example;
use crate::model::{ToyModel, TokenSequence, ASK, FIRST_OBJECT, NO, YES};
use crate::rng;
use crate::store::{ActivationTensor, Level, ManifoldLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub objects: usize,
    pub slots: usize,
    /// Object-content coordinates per slot.
    pub slot_dim: usize,
    /// Texture coordinates appended to each slot; zero-mean in every image.
    pub texture_dims: usize,
    /// Fraction of the perturbation scale that reaches content coordinates.
    pub content_leak: f64,
    /// Norm of every prototype vector.
    pub prototype_norm: f64,
    /// Per-coordinate noise of an unperturbed slot.
    pub clean_noise: f64,
    pub image_sigma: f64,
    pub object_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            objects: 16,
            slots: 4,
            slot_dim: 8,
            texture_dims: 64,
            content_leak: 0.1,
            prototype_norm: 8f64.sqrt(),
            clean_noise: 0.1,
            image_sigma: 0.5,
            object_sigma: 2.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.slot_dim == 0 {
            return Err(ScalpelError::InvalidArgument("slots and slot_dim must be positive".into()));
        }
        if self.objects <= self.slots {
            return Err(ScalpelError::InvalidArgument(
                "need more objects than slots so that absent objects exist".into(),
            ));
        }
        let params = [self.prototype_norm, self.clean_noise, self.image_sigma, self.object_sigma, self.content_leak];
        if params.iter().any(|v| !v.is_finite() || *v < 0.0) || self.prototype_norm == 0.0 {
            return Err(ScalpelError::InvalidArgument("noise scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, level: Level) -> f64 {
        match level {
            Level::Image => self.image_sigma,
            Level::Object => self.object_sigma,
        }
    }
}

/// Object prototypes shared by every episode of one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub prototypes: Vec<Vec<f32>>,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "world-prototypes");
        let prototypes = (0..config.objects)
            .map(|_| {
                let v: Vec<f64> = (0..config.slot_dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut p: Vec<f32> = v.iter().map(|x| (x * config.prototype_norm / n) as f32).collect();
                p.resize(config.slot_dim + config.texture_dims, 0.0);
                p
            })
            .collect();
        Ok(Self { config, prototypes })
    }

    pub fn object_token(&self, object: usize) -> u32 {
        FIRST_OBJECT + object as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Clean,
    Hallucination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub level: Level,
    pub sigma: f64,
    /// Slot to corrupt; object level only.
    pub target_slot: Option<usize>,
    pub seed: u64,
    /// Leading slot coordinates that take `content_scale * sigma` instead of
    /// `sigma`.
    #[serde(default)]
    pub content_dims: usize,
    #[serde(default)]
    pub content_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub slots: Vec<Vec<f32>>,
    /// Object index held by each slot.
    pub objects: Vec<usize>,
    pub query: usize,
    pub question: Vec<u32>,
    pub answer: u32,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbSpec>,
}

impl Episode {
    /// The answer implied by the slot contents.
    pub fn expected_answer(&self) -> u32 {
        if self.objects.contains(&self.query) {
            YES
        } else {
            NO
        }
    }

    pub fn sequence(&self) -> TokenSequence {
        TokenSequence::new(self.question.clone(), self.slots.clone())
    }

    pub fn example(&self, target: u32) -> Example {
        Example {
            seq: self.sequence(),
            target,
        }
    }
}

/// `n` clean episodes; exactly `⌊n/2⌋` have answer YES.
pub fn gen_trusted(world: &World, n: usize, seed: u64) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(ScalpelError::InvalidArgument("episode count must be at least 1".into()));
    }
    let cfg = &world.config;
    let mut rng = rng::stream(seed, "episodes");
    let mut answers: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    answers.shuffle(&mut rng);
    let all: Vec<usize> = (0..cfg.objects).collect();
    let mut out = Vec::with_capacity(n);
    for (id, yes) in answers.into_iter().enumerate() {
        let objects: Vec<usize> = all.choose_multiple(&mut rng, cfg.slots).copied().collect();
        let query = if yes {
            *objects.choose(&mut rng).expect("slots > 0")
        } else {
            let absent: Vec<usize> = all.iter().copied().filter(|o| !objects.contains(o)).collect();
            *absent.choose(&mut rng).expect("objects > slots")
        };
        let slots = objects
            .iter()
            .map(|o| {
                world.prototypes[*o]
                    .iter()
                    .map(|p| (*p as f64 + cfg.clean_noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            })
            .collect();
        out.push(Episode {
            id: id as u64,
            slots,
            objects,
            query,
            question: vec![ASK, world.object_token(query)],
            answer: if yes { YES } else { NO },
            source: Source::Clean,
            perturbation: None,
        });
    }
    Ok(out)
}

/// Corrupt the visual slots; question and answer are kept.
pub fn perturb(e: &Episode, spec: &PerturbSpec) -> Result<Episode> {
    if !spec.sigma.is_finite() || spec.sigma < 0.0 {
        return Err(ScalpelError::InvalidArgument("perturbation sigma must be finite and non-negative".into()));
    }
    let targets: Vec<usize> = match (spec.level, spec.target_slot) {
        (Level::Image, None) => (0..e.slots.len()).collect(),
        (Level::Image, Some(_)) => {
            return Err(ScalpelError::InvalidArgument("image-level perturbation takes no target slot".into()))
        }
        (Level::Object, Some(s)) if s < e.slots.len() => vec![s],
        (Level::Object, Some(s)) => {
            return Err(ScalpelError::OutOfRange {
                what: "slot",
                index: s,
                limit: e.slots.len(),
            })
        }
        (Level::Object, None) => {
            return Err(ScalpelError::InvalidArgument("object-level perturbation needs a target slot".into()))
        }
    };
    let mut rng = rng::stream(spec.seed, "perturb");
    let mut out = e.clone();
    for s in targets {
        for (i, v) in out.slots[s].iter_mut().enumerate() {
            let scale = if i < spec.content_dims { spec.content_scale * spec.sigma } else { spec.sigma };
            *v = (*v as f64 + scale * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    out.source = Source::Hallucination;
    out.perturbation = Some(spec.clone());
    Ok(out)
}

/// Perturb every episode at `level` with the world's default scale; slots and
/// noise are drawn from `seed` and the episode id.
pub fn perturb_all(world: &World, episodes: &[Episode], level: Level, seed: u64) -> Result<Vec<Episode>> {
    let mut pick = rng::stream(seed, &format!("target-slot-{}", level.as_str()));
    episodes
        .iter()
        .map(|e| {
            let spec = PerturbSpec {
                level,
                sigma: world.config.sigma(level),
                target_slot: match level {
                    Level::Image => None,
                    Level::Object => Some(pick.random_range(0..e.slots.len())),
                },
                seed: rng::derive(seed, &format!("perturb-{}-{}", level.as_str(), e.id)),
                content_dims: world.config.slot_dim,
                content_scale: world.config.content_leak,
            };
            perturb(e, &spec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSetConfig {
    /// Clean episodes with their true answers.
    pub clean: usize,
    /// Perturbed episodes per level, all labelled YES.
    pub biased_per_level: usize,
}

impl Default for TrainSetConfig {
    fn default() -> Self {
        Self {
            clean: 3000,
            biased_per_level: 600,
        }
    }
}

/// Training examples with the injected bias: perturbed images are labelled
/// YES regardless of their content.
pub fn training_set(world: &World, cfg: &TrainSetConfig, seed: u64) -> Result<Vec<Example>> {
    let clean = gen_trusted(world, cfg.clean, rng::derive(seed, "train-clean"))?;
    let mut out: Vec<Example> = clean.iter().map(|e| e.example(e.answer)).collect();
    if cfg.biased_per_level > 0 {
        let base = gen_trusted(world, cfg.biased_per_level, rng::derive(seed, "train-biased"))?;
        for level in Level::ALL {
            let perturbed = perturb_all(world, &base, level, rng::derive(seed, "train-perturb"))?;
            out.extend(perturbed.iter().map(|e| e.example(YES)));
        }
    }
    Ok(out)
}

/// Activations of the three manifolds, collected from the same base episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldDatasets {
    pub trusted: ActivationTensor,
    pub halluc_image: ActivationTensor,
    pub halluc_object: ActivationTensor,
}

impl ManifoldDatasets {
    pub fn halluc(&self, level: Level) -> &ActivationTensor {
        match level {
            Level::Image => &self.halluc_image,
            Level::Object => &self.halluc_object,
        }
    }
}

pub fn build_manifold_episodes(world: &World, n: usize, seed: u64) -> Result<[Vec<Episode>; 3]> {
    let base = gen_trusted(world, n, rng::derive(seed, "manifold-base"))?;
    let image = perturb_all(world, &base, Level::Image, rng::derive(seed, "manifold-perturb"))?;
    let object = perturb_all(world, &base, Level::Object, rng::derive(seed, "manifold-perturb"))?;
    Ok([base, image, object])
}

pub fn build_manifold_datasets(model: &ToyModel, world: &World, n: usize, seed: u64) -> Result<ManifoldDatasets> {
    let [base, image, object] = build_manifold_episodes(world, n, seed)?;
    let collect = |eps: &[Episode], label| {
        let seqs: Vec<TokenSequence> = eps.iter().map(Episode::sequence).collect();
        model.collect_activations(&seqs, Some(label))
    };
    Ok(ManifoldDatasets {
        trusted: collect(&base, ManifoldLabel::Trusted)?,
        halluc_image: collect(&image, ManifoldLabel::HallucImage)?,
        halluc_object: collect(&object, ManifoldLabel::HallucObject)?,
    })
}

pub fn write_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for e in episodes {
        buf.extend_from_slice(crate::json::to_line(e)?.as_bytes());
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| ScalpelError::io(path, e))?;
    f.write_all(&buf).map_err(|e| ScalpelError::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let f = fs::File::open(path).map_err(|e| ScalpelError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| ScalpelError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
