//! Accuracy / F1 of yes-no answers with and without intervention.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Episode;
use crate::error::{Result, ScalpelError};
use crate::mitigation::{self, InterventionPlan, StepDecision, TrustShift};
use crate::model::{NoEdits, ToyModel, YES};

/// Binary metrics with YES as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

pub fn metrics(predicted: &[u32], truth: &[u32]) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(ScalpelError::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(ScalpelError::InvalidArgument("no answers to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        let (p, t) = (*p == YES, *t == YES);
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if p == t {
            correct += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        n: truth.len(),
        accuracy: ratio(correct, truth.len()),
        precision,
        recall,
        f1,
        yes_ratio: ratio(tp + fp, truth.len()),
    })
}

/// First generated token per episode, plus the decision log when a plan is
/// given. Episodes are processed in parallel; results keep input order.
pub fn answer(
    model: &ToyModel,
    episodes: &[Episode],
    plan: Option<&InterventionPlan>,
    steps: usize,
) -> Result<(Vec<u32>, Vec<StepDecision>)> {
    let runs = episodes
        .par_iter()
        .map(|e| {
            let seq = e.sequence();
            match plan {
                Some(p) => {
                    let (g, d) = mitigation::intervened_generate(model, &seq, p, steps)?;
                    Ok((g.tokens[0], d))
                }
                None => Ok((model.generate(&seq, steps, &mut NoEdits)?.tokens[0], Vec::new())),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tokens = Vec::with_capacity(runs.len());
    let mut decisions = Vec::new();
    for (t, d) in runs {
        tokens.push(t);
        decisions.extend(d);
    }
    Ok((tokens, decisions))
}

/// Held-out episodes: clean copies and their two perturbed versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSets {
    pub trusted: Vec<Episode>,
    pub image: Vec<Episode>,
    pub object: Vec<Episode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub trusted: Metrics,
    pub image: Metrics,
    pub object: Metrics,
    /// Image and object splits together.
    pub perturbed: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub variants: Vec<VariantReport>,
    /// Scored over the perturbed-split decisions of the first planned variant.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trust_shift: Option<TrustShift>,
}

impl EvaluationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub struct Evaluation {
    pub report: EvaluationReport,
    /// Perturbed-split decisions of the first planned variant.
    pub decisions: Vec<StepDecision>,
}

/// Score every `(name, plan)` variant on all three splits.
pub fn evaluate(
    model: &ToyModel,
    tests: &TestSets,
    variants: &[(&str, Option<&InterventionPlan>)],
    steps: usize,
) -> Result<Evaluation> {
    let truth = |eps: &[Episode]| eps.iter().map(|e| e.answer).collect::<Vec<u32>>();
    let mut reports = Vec::with_capacity(variants.len());
    let mut logged: Option<(Vec<StepDecision>, &InterventionPlan)> = None;
    for (name, plan) in variants {
        let (tr, _) = answer(model, &tests.trusted, *plan, steps)?;
        let (im, mut d_im) = answer(model, &tests.image, *plan, steps)?;
        let (ob, d_ob) = answer(model, &tests.object, *plan, steps)?;
        let (t_tr, t_im, t_ob) = (truth(&tests.trusted), truth(&tests.image), truth(&tests.object));
        let all_pred: Vec<u32> = im.iter().chain(&ob).copied().collect();
        let all_truth: Vec<u32> = t_im.iter().chain(&t_ob).copied().collect();
        reports.push(VariantReport {
            name: name.to_string(),
            trusted: metrics(&tr, &t_tr)?,
            image: metrics(&im, &t_im)?,
            object: metrics(&ob, &t_ob)?,
            perturbed: metrics(&all_pred, &all_truth)?,
        });
        if let (None, Some(p)) = (&logged, plan) {
            d_im.extend(d_ob);
            logged = Some((d_im, *p));
        }
    }
    let (decisions, trust_shift) = match logged {
        Some((d, p)) if !d.is_empty() => {
            let ts = mitigation::trust_shift(&d, p)?;
            (d, Some(ts))
        }
        _ => (Vec::new(), None),
    };
    Ok(Evaluation {
        report: EvaluationReport {
            schema_version: crate::json::SCHEMA_VERSION,
            variants: reports,
            trust_shift,
        },
        decisions,
    })
}

/// Vanilla against intervened metrics on one named episode set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub name: String,
    pub vanilla: Metrics,
    pub scalpel: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub splits: Vec<SplitComparison>,
    /// Over the decisions of every split.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trust_shift: Option<TrustShift>,
}

/// Score a saved plan on arbitrary episode sets.
pub fn compare(
    model: &ToyModel,
    plan: &InterventionPlan,
    sets: &[(String, Vec<Episode>)],
    steps: usize,
) -> Result<ComparisonReport> {
    let mut splits = Vec::with_capacity(sets.len());
    let mut decisions = Vec::new();
    for (name, eps) in sets {
        let truth: Vec<u32> = eps.iter().map(|e| e.answer).collect();
        let (van, _) = answer(model, eps, None, steps)?;
        let (sc, d) = answer(model, eps, Some(plan), steps)?;
        decisions.extend(d);
        splits.push(SplitComparison {
            name: name.clone(),
            vanilla: metrics(&van, &truth)?,
            scalpel: metrics(&sc, &truth)?,
        });
    }
    let trust_shift = if decisions.is_empty() {
        None
    } else {
        Some(mitigation::trust_shift(&decisions, plan)?)
    };
    Ok(ComparisonReport {
        schema_version: crate::json::SCHEMA_VERSION,
        splits,
        trust_shift,
    })
}
