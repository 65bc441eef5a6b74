//! End-to-end run: train the toy model, collect the three manifolds, probe
//! heads, fit mixtures, couple them, and evaluate with and without edits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::coupling;
use crate::datagen::{self, Episode, TrainSetConfig, World, WorldConfig};
use crate::error::{Result, ScalpelError};
use crate::evaluate::{self, EvaluationReport, TestSets};
use crate::gmm::{self, EmConfig, FitMeta, Gmm};
use crate::json;
use crate::mitigation::{self, GmmPair, HeadPlan, InterventionPlan};
use crate::model::train::{self, TrainConfig};
use crate::model::{ModelConfig, ToyModel};
use crate::probes::{self, HeadAccuracyMatrix, ProbeConfig};
use crate::rng;
use crate::store::{ActivationTensor, DatasetManifest, Level, ManifoldLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingSolver {
    #[default]
    Lp,
    Sinkhorn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub train_set: TrainSetConfig,
    pub train: TrainConfig,
    /// Episodes per manifold.
    pub n_per_manifold: usize,
    /// Held-out episodes per test split.
    pub n_test: usize,
    pub gmm_k: usize,
    pub em: EmConfig,
    pub probe: ProbeConfig,
    pub top_k: usize,
    pub alpha_base: f64,
    pub bridge_epsilon: f64,
    pub solver: CouplingSolver,
    pub sinkhorn_eps_reg: f64,
    pub sinkhorn_max_iter: usize,
    /// Generated tokens per answer.
    pub steps: usize,
    /// Output directory; relative paths resolve against the working directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            train_set: TrainSetConfig::default(),
            train: TrainConfig::default(),
            n_per_manifold: 1500,
            n_test: 300,
            gmm_k: 32,
            em: EmConfig::default(),
            probe: ProbeConfig::default(),
            top_k: 8,
            alpha_base: 1.0,
            bridge_epsilon: 0.0,
            solver: CouplingSolver::Lp,
            sinkhorn_eps_reg: 1e-2,
            sinkhorn_max_iter: 100_000,
            steps: 1,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.world.validate()?;
        let bad = |m: &str| Err(ScalpelError::InvalidArgument(m.into()));
        let counts = [
            ("n_per_manifold", self.n_per_manifold),
            ("n_test", self.n_test),
            ("gmm_k", self.gmm_k),
            ("top_k", self.top_k),
            ("steps", self.steps),
            ("train.epochs", self.train.epochs),
            ("train.batch_size", self.train.batch_size),
            ("train_set.clean", self.train_set.clean),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(&format!("{name} must be positive"));
        }
        if self.model.slot_dim != self.world.slot_dim || self.model.texture_dims != self.world.texture_dims {
            return bad("model and world slot layouts differ");
        }
        if self.world.objects + crate::model::FIRST_OBJECT as usize > self.model.vocab {
            return bad("vocabulary too small for the world's objects");
        }
        if self.world.slots + 3 + self.steps > self.model.context {
            return bad("context too short for the prompt plus generated tokens");
        }
        if self.top_k > self.model.layers * self.model.heads {
            return bad("top_k exceeds the number of heads");
        }
        if !(self.alpha_base > 0.0) || !self.alpha_base.is_finite() {
            return bad("alpha_base must be positive");
        }
        BridgeConfig::new(self.bridge_epsilon)?;
        if self.solver == CouplingSolver::Sinkhorn && !(self.sinkhorn_eps_reg > 0.0) {
            return bad("sinkhorn_eps_reg must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = json::read_artifact(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Smaller sizes for smoke runs and tests.
    pub fn smoke() -> Self {
        Self {
            train_set: TrainSetConfig {
                clean: 300,
                biased_per_level: 60,
            },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            n_per_manifold: 50,
            n_test: 20,
            gmm_k: 2,
            top_k: 2,
            ..Self::default()
        }
    }
}

/// Everything produced by one run, kept in memory.
pub struct PipelineOutput {
    pub model: ToyModel,
    pub world: World,
    pub accuracy: BTreeMap<Level, HeadAccuracyMatrix>,
    pub plans: BTreeMap<Level, InterventionPlan>,
    pub combined: InterventionPlan,
    pub tests: TestSets,
    pub report: EvaluationReport,
    pub decisions: Vec<mitigation::StepDecision>,
}

impl PipelineOutput {
    /// Perturbed-split accuracy gain of the combined plan over vanilla.
    pub fn improvement(&self) -> f64 {
        let v = self.report.variant("vanilla").expect("vanilla variant");
        let s = self.report.variant("scalpel").expect("scalpel variant");
        s.perturbed.accuracy - v.perturbed.accuracy
    }
}

pub fn test_sets(world: &World, n: usize, seed: u64) -> Result<TestSets> {
    let trusted = datagen::gen_trusted(world, n, rng::derive(seed, "test-base"))?;
    let perturb_seed = rng::derive(seed, "test-perturb");
    Ok(TestSets {
        image: datagen::perturb_all(world, &trusted, Level::Image, perturb_seed)?,
        object: datagen::perturb_all(world, &trusted, Level::Object, perturb_seed)?,
        trusted,
    })
}

fn fit_head(t: &ActivationTensor, layer: usize, head: usize, cfg: &RunConfig) -> Result<Gmm> {
    let label = t.label.expect("manifold tensors carry labels");
    let seed = rng::derive(cfg.seed, &format!("gmm-{}-{layer}-{head}", label.as_str()));
    let x = t.slice_head(layer, head)?;
    let g = gmm::fit_em(&x, cfg.gmm_k, seed, &cfg.em)?;
    log::debug!("gmm {} ({layer}, {head}): {} iterations", label.as_str(), g.meta.iterations);
    let meta = FitMeta {
        label: Some(label),
        layer,
        head,
        ..g.meta.clone()
    };
    Ok(g.with_meta(meta))
}

fn head_plan(level: Level, pair: &GmmPair, layer: usize, head: usize, cfg: &RunConfig) -> Result<HeadPlan> {
    let bridge = BridgeConfig::new(cfg.bridge_epsilon)?;
    let costs = coupling::cost_matrix(&pair.halluc, &pair.trusted, &bridge)?;
    let (w0, w1) = (pair.halluc.weights(), pair.trusted.weights());
    let plan = match cfg.solver {
        CouplingSolver::Lp => coupling::solve_lp(&costs, &w0, &w1)?,
        CouplingSolver::Sinkhorn => {
            coupling::solve_sinkhorn(&costs, &w0, &w1, cfg.sinkhorn_eps_reg, cfg.sinkhorn_max_iter)?
        }
    };
    HeadPlan::from_coupling(layer, head, level, pair.halluc.clone(), pair.trusted.clone(), plan)
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    info!("stage {stage}: {:.2}s", start.elapsed().as_secs_f64());
    out
}

/// Run every stage in memory.
pub fn run(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let world = World::new(cfg.world, rng::derive(cfg.seed, "world"))?;

    let model = timed("train", || {
        let examples = datagen::training_set(&world, &cfg.train_set, rng::derive(cfg.seed, "train-set"))?;
        let mut model = ToyModel::new(cfg.model, rng::derive(cfg.seed, "model"))?;
        let summary = train::train(&mut model, &examples, &cfg.train)?;
        info!("trained: loss {:.4}, accuracy {:.3}", summary.final_loss, summary.train_accuracy);
        Ok(model)
    })
    .map_err(ScalpelError::stage("train", "model.bin"))?;

    let manifolds = timed("collect", || {
        datagen::build_manifold_datasets(&model, &world, cfg.n_per_manifold, rng::derive(cfg.seed, "manifolds"))
    })
    .map_err(ScalpelError::stage("collect", "activations"))?;

    let accuracy = timed("probe", || {
        Level::ALL
            .iter()
            .map(|level| {
                let (m, _) = probes::build_accuracy_matrix(
                    &manifolds.trusted,
                    manifolds.halluc(*level),
                    rng::derive(cfg.seed, "probe"),
                    &cfg.probe,
                    cfg.top_k,
                )?;
                Ok((*level, m))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    })
    .map_err(ScalpelError::stage("probe", "probes"))?;

    let pairs = timed("fit", || {
        let trusted_heads: BTreeSet<(usize, usize)> =
            accuracy.values().flat_map(|m| m.selected.iter().copied()).collect();
        let mut jobs: Vec<(Option<Level>, usize, usize)> =
            trusted_heads.iter().map(|&(l, h)| (None, l, h)).collect();
        for (level, m) in &accuracy {
            jobs.extend(m.selected.iter().map(|&(l, h)| (Some(*level), l, h)));
        }
        let fits = jobs
            .par_iter()
            .map(|&(level, l, h)| {
                let t = level.map_or(&manifolds.trusted, |lv| manifolds.halluc(lv));
                let label = t.label.expect("labelled");
                fit_head(t, l, h, cfg)
                    .map_err(ScalpelError::stage("fit", format!("gmm/{}_L{l}_H{h}.json", label.as_str())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut trusted = BTreeMap::new();
        let mut halluc = BTreeMap::new();
        for (job, g) in jobs.into_iter().zip(fits) {
            match job {
                (None, l, h) => {
                    trusted.insert((l, h), g);
                }
                (Some(level), l, h) => {
                    halluc.insert((level, l, h), g);
                }
            }
        }
        Ok((trusted, halluc))
    })?;

    let plans = timed("couple", || {
        let (trusted, halluc) = &pairs;
        Level::ALL
            .iter()
            .map(|level| {
                let heads = accuracy[level]
                    .selected
                    .iter()
                    .map(|&(l, h)| {
                        let pair = GmmPair {
                            trusted: trusted[&(l, h)].clone(),
                            halluc: halluc[&(*level, l, h)].clone(),
                        };
                        head_plan(*level, &pair, l, h, cfg).map_err(ScalpelError::stage(
                            "couple",
                            format!("coupling/{}_L{l}_H{h}.json", level.as_str()),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((*level, InterventionPlan::new(cfg.alpha_base, heads)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    })?;
    let combined = plans[&Level::Image].union(&plans[&Level::Object])?;

    let tests = test_sets(&world, cfg.n_test, rng::derive(cfg.seed, "test"))?;
    let evaluation = timed("evaluate", || {
        evaluate::evaluate(
            &model,
            &tests,
            &[
                ("vanilla", None),
                ("scalpel", Some(&combined)),
                ("without_object", Some(&plans[&Level::Image])),
                ("without_image", Some(&plans[&Level::Object])),
            ],
            cfg.steps,
        )
    })
    .map_err(ScalpelError::stage("evaluate", "report.json"))?;

    Ok(PipelineOutput {
        model,
        world,
        accuracy,
        plans,
        combined,
        tests,
        report: evaluation.report,
        decisions: evaluation.decisions,
    })
}

/// Run and write every artifact under `out_dir`. Returns the output and the
/// relative path and SHA-256 of each written file.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<(PipelineOutput, BTreeMap<String, String>)> {
    let out = run(cfg)?;
    let hashes = write_outputs(cfg, &out, out_dir)?;
    Ok((out, hashes))
}

fn write_outputs(cfg: &RunConfig, out: &PipelineOutput, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    let mut record = |rel: &str| -> Result<()> {
        hashes.insert(rel.to_string(), json::file_sha256(&dir.join(rel))?);
        Ok(())
    };
    let mut stored = cfg.clone();
    stored.out_dir = None;
    json::write_artifact(&stored, &dir.join("config.json")).map_err(ScalpelError::stage("write", "config.json"))?;
    record("config.json")?;
    out.model
        .save(&dir.join("model.bin"))
        .map_err(ScalpelError::stage("write", "model.bin"))?;
    record("model.bin")?;

    let manifolds = datagen::build_manifold_datasets(
        &out.model,
        &out.world,
        cfg.n_per_manifold,
        rng::derive(cfg.seed, "manifolds"),
    )?;
    let mut manifest = DatasetManifest::new(cfg.seed);
    let act = dir.join("activations");
    std::fs::create_dir_all(&act).map_err(|e| ScalpelError::io(&act, e))?;
    for t in [&manifolds.trusted, &manifolds.halluc_image, &manifolds.halluc_object] {
        let name = format!("{}.sclp", t.label.map_or("unlabelled", ManifoldLabel::as_str));
        manifest
            .add(&act, &name, t)
            .map_err(ScalpelError::stage("write", format!("activations/{name}")))?;
        record(&format!("activations/{name}"))?;
    }
    manifest.save(&act.join("manifest.json"))?;
    record("activations/manifest.json")?;

    let ep = dir.join("episodes");
    std::fs::create_dir_all(&ep).map_err(|e| ScalpelError::io(&ep, e))?;
    let splits: [(&str, &[Episode]); 3] = [
        ("test_trusted", &out.tests.trusted),
        ("test_image", &out.tests.image),
        ("test_object", &out.tests.object),
    ];
    for (name, eps) in splits {
        datagen::write_episodes(eps, &ep.join(format!("{name}.jsonl")))?;
        record(&format!("episodes/{name}.jsonl"))?;
    }

    for (level, m) in &out.accuracy {
        let rel = format!("probes/accuracy_{}.json", level.as_str());
        m.save(&dir.join(&rel)).map_err(ScalpelError::stage("write", rel.clone()))?;
        record(&rel)?;
    }
    for (level, p) in &out.plans {
        let rel = format!("plan_{}.json", level.as_str());
        p.save(dir, &rel).map_err(ScalpelError::stage("write", rel.clone()))?;
        record(&rel)?;
    }
    out.combined
        .save(dir, "plan.json")
        .map_err(ScalpelError::stage("write", "plan.json"))?;
    record("plan.json")?;
    for sub in ["gmm", "coupling"] {
        let mut names: Vec<String> = std::fs::read_dir(dir.join(sub))
            .map_err(|e| ScalpelError::io(dir.join(sub), e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        for n in names {
            record(&format!("{sub}/{n}"))?;
        }
    }
    mitigation::write_decisions(&out.decisions, &dir.join("decisions.jsonl"))?;
    record("decisions.jsonl")?;
    json::write_artifact(&out.report, &dir.join("report.json"))?;
    record("report.json")?;
    Ok(hashes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        let text = String::from_utf8(json::to_bytes(&cfg).unwrap()).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7, "gmm_k": 4}"#).unwrap();
        assert_eq!((partial.seed, partial.gmm_k, partial.top_k), (7, 4, 8));
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
        let mut bad = cfg.clone();
        bad.top_k = 0;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.top_k = 33;
        assert!(bad.validate().is_err());
        bad = cfg;
        bad.alpha_base = -1.0;
        assert!(bad.validate().unwrap_err().is_validation());
    }

    #[test]
    fn gmm_k_above_sample_count_fails_at_fit() {
        let mut cfg = RunConfig::smoke();
        cfg.gmm_k = 60;
        let err = run(&cfg).err().expect("must fail");
        match &err {
            ScalpelError::Stage { stage, source, .. } => {
                assert_eq!(*stage, "fit");
                assert!(matches!(**source, ScalpelError::InsufficientSamples { .. }));
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(err.to_string().contains("insufficient samples"));
        assert!(err.is_validation());
    }
}
