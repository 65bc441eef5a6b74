//! Per-token corrective edits on selected heads.
//!
//! For each selected head the hallucinated and trusted mixtures are coupled
//! by the component-level transport plan; hallucinated component `r` is
//! paired with the trusted component `j*(r)` that receives most of its mass.
//! At decoding time the current activation `z` is assigned to its most
//! probable hallucinated component, and the head receives the edit
//! `α_base · c · (μ₁^{j*} − μ₀^{r*})`, where `c` is the assignment posterior.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::coupling::{self, ComponentMatch, CouplingArtifact, CouplingPlan};
use crate::error::{Result, ScalpelError};
use crate::gmm::Gmm;
use crate::json;
use crate::model::{EditSource, Generation, ToyModel, TokenSequence};
use crate::probes::HeadAccuracyMatrix;
use crate::store::{Level, ManifoldLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPlan {
    pub layer: usize,
    pub head: usize,
    pub level: Level,
    pub halluc: Gmm,
    pub trusted: Gmm,
    pub coupling: CouplingPlan,
    pub matching: ComponentMatch,
    /// `transfer[r] = trusted[match[r]].mean − halluc[r].mean`.
    pub transfer: Vec<DVector<f64>>,
}

impl HeadPlan {
    pub fn new(layer: usize, head: usize, level: Level, halluc: Gmm, trusted: Gmm, cfg: &BridgeConfig) -> Result<Self> {
        let costs = coupling::cost_matrix(&halluc, &trusted, cfg)?;
        let plan = coupling::solve_lp(&costs, &halluc.weights(), &trusted.weights())?;
        Self::from_coupling(layer, head, level, halluc, trusted, plan)
    }

    pub fn from_coupling(
        layer: usize,
        head: usize,
        level: Level,
        halluc: Gmm,
        trusted: Gmm,
        plan: CouplingPlan,
    ) -> Result<Self> {
        if halluc.dim() != trusted.dim() {
            return Err(ScalpelError::DimensionMismatch {
                expected: halluc.dim(),
                got: trusted.dim(),
            });
        }
        if plan.lambda.shape() != (halluc.k(), trusted.k()) {
            return Err(ScalpelError::InvalidArtifact(format!(
                "coupling for head ({layer}, {head}) has shape {:?}, mixtures need ({}, {})",
                plan.lambda.shape(),
                halluc.k(),
                trusted.k()
            )));
        }
        let matching = coupling::match_components(&plan);
        let transfer = matching
            .matches
            .iter()
            .zip(halluc.components())
            .map(|(j, c)| &trusted.components()[*j].mean - &c.mean)
            .collect();
        Ok(Self {
            layer,
            head,
            level,
            halluc,
            trusted,
            coupling: plan,
            matching,
            transfer,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    pub alpha_base: f64,
    heads: BTreeMap<(usize, usize), HeadPlan>,
}

/// Trusted and hallucinated mixtures of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPair {
    pub trusted: Gmm,
    pub halluc: Gmm,
}

impl InterventionPlan {
    pub fn new(alpha_base: f64, heads: Vec<HeadPlan>) -> Result<Self> {
        if !alpha_base.is_finite() || alpha_base <= 0.0 {
            return Err(ScalpelError::InvalidArgument("alpha_base must be positive".into()));
        }
        let mut map = BTreeMap::new();
        for h in heads {
            if let Some(dim) = map.values().next().map(|p: &HeadPlan| p.halluc.dim()) {
                if h.halluc.dim() != dim {
                    return Err(ScalpelError::DimensionMismatch {
                        expected: dim,
                        got: h.halluc.dim(),
                    });
                }
            }
            if map.insert((h.layer, h.head), h).is_some() {
                return Err(ScalpelError::InvalidArgument("duplicate head in plan".into()));
            }
        }
        Ok(Self { alpha_base, heads: map })
    }

    /// A plan that edits nothing.
    pub fn empty(alpha_base: f64) -> Result<Self> {
        Self::new(alpha_base, Vec::new())
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadPlan> {
        self.heads.values()
    }

    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadPlan> {
        self.heads.get(&(layer, head))
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn head_dim(&self) -> Option<usize> {
        self.heads.values().next().map(|h| h.halluc.dim())
    }

    /// Union of two plans; heads present in both come from `preferred`.
    pub fn union(&self, preferred: &InterventionPlan) -> Result<Self> {
        let mut heads = self.heads.clone();
        for (k, v) in &preferred.heads {
            heads.insert(*k, v.clone());
        }
        Self::new(preferred.alpha_base, heads.into_values().collect())
    }

    /// Copy restricted to heads for which `keep` returns true.
    pub fn filtered(&self, keep: impl Fn(&HeadPlan) -> bool) -> Self {
        Self {
            alpha_base: self.alpha_base,
            heads: self.heads.iter().filter(|(_, h)| keep(h)).map(|(k, v)| (*k, v.clone())).collect(),
        }
    }

    pub fn with_alpha(&self, alpha_base: f64) -> Result<Self> {
        Self::new(alpha_base, self.heads.values().cloned().collect())
    }
}

/// Assemble the plan for the heads selected in `matrix`.
pub fn build_plan(
    matrix: &HeadAccuracyMatrix,
    gmms: &BTreeMap<(usize, usize), GmmPair>,
    cfg: &BridgeConfig,
    alpha_base: f64,
    level: Level,
) -> Result<InterventionPlan> {
    let heads = matrix
        .selected
        .iter()
        .map(|&(l, h)| {
            let pair = gmms
                .get(&(l, h))
                .ok_or_else(|| ScalpelError::MissingArtifact(format!("mixtures for head ({l}, {h})")))?;
            HeadPlan::new(l, h, level, pair.halluc.clone(), pair.trusted.clone(), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    InterventionPlan::new(alpha_base, heads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecision {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub r_star: usize,
    pub confidence: f64,
    pub alpha_dynamic: f64,
    /// Activation before the edit.
    pub z: Vec<f32>,
    /// The edit `α_dynamic · v_{r*}`.
    pub applied: Vec<f64>,
}

impl StepDecision {
    /// The edit as the model adds it.
    pub fn edit(&self) -> Vec<f32> {
        self.applied.iter().map(|v| *v as f32).collect()
    }
}

pub fn decide(plan: &InterventionPlan, step: usize, layer: usize, head: usize, z: &[f32]) -> Result<StepDecision> {
    let hp = plan
        .head(layer, head)
        .ok_or_else(|| ScalpelError::MissingArtifact(format!("plan entry for head ({layer}, {head})")))?;
    let zf: Vec<f64> = z.iter().map(|v| *v as f64).collect();
    let (r_star, confidence) = hp.halluc.assign(&zf)?;
    let alpha_dynamic = plan.alpha_base * confidence;
    let applied = (&hp.transfer[r_star] * alpha_dynamic).as_slice().to_vec();
    Ok(StepDecision {
        step,
        layer,
        head,
        r_star,
        confidence,
        alpha_dynamic,
        z: z.to_vec(),
        applied,
    })
}

/// Edit source that consults the plan and logs every decision.
pub struct PlanEditor<'a> {
    plan: &'a InterventionPlan,
    pub decisions: Vec<StepDecision>,
}

impl<'a> PlanEditor<'a> {
    pub fn new(plan: &'a InterventionPlan) -> Self {
        Self {
            plan,
            decisions: Vec::new(),
        }
    }
}

impl EditSource for PlanEditor<'_> {
    fn edit(&mut self, step: usize, layer: usize, head: usize, z: &[f32]) -> Result<Option<Vec<f32>>> {
        if self.plan.head(layer, head).is_none() {
            return Ok(None);
        }
        let d = decide(self.plan, step, layer, head, z)?;
        let e = d.edit();
        self.decisions.push(d);
        Ok(Some(e))
    }
}

pub fn intervened_generate(
    model: &ToyModel,
    seq: &TokenSequence,
    plan: &InterventionPlan,
    steps: usize,
) -> Result<(Generation, Vec<StepDecision>)> {
    if let Some(d) = plan.head_dim() {
        if d != model.config.head_dim {
            return Err(ScalpelError::DimensionMismatch {
                expected: model.config.head_dim,
                got: d,
            });
        }
    }
    let mut editor = PlanEditor::new(plan);
    let generation = model.generate(seq, steps, &mut editor)?;
    Ok((generation, editor.decisions))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustShift {
    pub decisions: usize,
    /// Decisions whose trusted log-density went up.
    pub increased: usize,
    pub fraction_increased: f64,
    pub mean_before: f64,
    pub mean_after: f64,
    pub mean_shift: f64,
}

/// Trusted-mixture log-density of each activation before and after its edit.
pub fn trust_shift(decisions: &[StepDecision], plan: &InterventionPlan) -> Result<TrustShift> {
    if decisions.is_empty() {
        return Err(ScalpelError::InvalidArgument("no decisions to score".into()));
    }
    let mut before = 0.0;
    let mut after = 0.0;
    let mut increased = 0;
    for d in decisions {
        let hp = plan
            .head(d.layer, d.head)
            .ok_or_else(|| ScalpelError::MissingArtifact(format!("plan entry for head ({}, {})", d.layer, d.head)))?;
        let z: Vec<f64> = d.z.iter().map(|v| *v as f64).collect();
        let moved: Vec<f64> = z.iter().zip(&d.applied).map(|(a, b)| a + b).collect();
        let b = hp.trusted.log_pdf(&z)?;
        let a = hp.trusted.log_pdf(&moved)?;
        if a > b {
            increased += 1;
        }
        before += b;
        after += a;
    }
    let n = decisions.len() as f64;
    Ok(TrustShift {
        decisions: decisions.len(),
        increased,
        fraction_increased: increased as f64 / n,
        mean_before: before / n,
        mean_after: after / n,
        mean_shift: (after - before) / n,
    })
}

pub fn write_decisions(decisions: &[StepDecision], path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    for d in decisions {
        buf.extend_from_slice(json::to_line(d)?.as_bytes());
        buf.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| ScalpelError::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| ScalpelError::io(path, e))?;
    f.write_all(&buf).map_err(|e| ScalpelError::io(path, e))?;
    Ok(json::sha256_hex(&buf))
}

/// File reference with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

impl ArtifactRef {
    fn resolve(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let p = dir.join(&self.path);
        if !p.exists() {
            return Err(ScalpelError::MissingArtifact(p.display().to_string()));
        }
        if json::file_sha256(&p)? != self.sha256 {
            return Err(ScalpelError::HashMismatch { path: p });
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPlanArtifact {
    pub layer: usize,
    pub head: usize,
    pub level: Level,
    pub halluc_gmm: ArtifactRef,
    pub trusted_gmm: ArtifactRef,
    pub coupling: ArtifactRef,
    #[serde(rename = "match")]
    pub matches: Vec<usize>,
    pub transfer_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub schema_version: u32,
    pub alpha_base: f64,
    pub heads: Vec<HeadPlanArtifact>,
}

fn gmm_file(label: ManifoldLabel, layer: usize, head: usize) -> String {
    format!("gmm/{}_L{layer}_H{head}.json", label.as_str())
}

impl InterventionPlan {
    /// Write the plan and every mixture and coupling it uses under `dir`;
    /// `name` is the plan file relative to `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<String> {
        let mut written: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |rel: String, write: &dyn Fn(&Path) -> Result<String>| -> Result<ArtifactRef> {
            let sha = match written.get(&rel) {
                Some(s) => s.clone(),
                None => {
                    let s = write(&dir.join(&rel))?;
                    written.insert(rel.clone(), s.clone());
                    s
                }
            };
            Ok(ArtifactRef { path: rel, sha256: sha })
        };
        let mut heads = Vec::new();
        for hp in self.heads.values() {
            let halluc_gmm = put(gmm_file(hp.level.label(), hp.layer, hp.head), &|p| hp.halluc.save(p))?;
            let trusted_gmm = put(gmm_file(ManifoldLabel::Trusted, hp.layer, hp.head), &|p| hp.trusted.save(p))?;
            let coupling = put(
                format!("coupling/{}_L{}_H{}.json", hp.level.as_str(), hp.layer, hp.head),
                &|p| hp.coupling.to_artifact(hp.layer, hp.head, hp.level).save(p),
            )?;
            heads.push(HeadPlanArtifact {
                layer: hp.layer,
                head: hp.head,
                level: hp.level,
                halluc_gmm,
                trusted_gmm,
                coupling,
                matches: hp.matching.matches.clone(),
                transfer_vectors: hp.transfer.iter().map(|v| v.as_slice().to_vec()).collect(),
            });
        }
        let art = PlanArtifact {
            schema_version: json::SCHEMA_VERSION,
            alpha_base: self.alpha_base,
            heads,
        };
        json::write_artifact(&art, &dir.join(name))
    }

    /// Load a plan, checking every referenced artifact against its hash.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let art: PlanArtifact = json::read_artifact(&dir.join(name))?;
        json::check_schema(art.schema_version, "plan")?;
        let heads = art
            .heads
            .iter()
            .map(|h| {
                let halluc = Gmm::load(&h.halluc_gmm.resolve(dir)?)?;
                let trusted = Gmm::load(&h.trusted_gmm.resolve(dir)?)?;
                let coupling = CouplingPlan::from_artifact(&CouplingArtifact::load(&h.coupling.resolve(dir)?)?)?;
                let hp = HeadPlan::from_coupling(h.layer, h.head, h.level, halluc, trusted, coupling)?;
                let stored: Vec<Vec<f64>> = h.transfer_vectors.clone();
                let fresh: Vec<Vec<f64>> = hp.transfer.iter().map(|v| v.as_slice().to_vec()).collect();
                if hp.matching.matches != h.matches || stored != fresh {
                    return Err(ScalpelError::InvalidArtifact(format!(
                        "plan entry for head ({}, {}) disagrees with its coupling",
                        h.layer, h.head
                    )));
                }
                Ok(hp)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(art.alpha_base, heads)
    }
}
