// Build a one-head intervention plan by hand and steer generation with it.
//
// The hallucinated mixture sits around the head's current activation; the
// plan moves it toward the matched trusted component, scaled by the
// posterior confidence.

use nalgebra::{DMatrix, DVector};
use scalpel::bridge::BridgeConfig;
use scalpel::gmm::{GaussianComponent, Gmm};
use scalpel::mitigation::{intervened_generate, trust_shift, HeadPlan, InterventionPlan};
use scalpel::model::{ModelConfig, NoEdits, TokenSequence, ToyModel, ASK, FIRST_OBJECT};
use scalpel::store::Level;

fn main() -> scalpel::Result<()> {
    let cfg = ModelConfig { layers: 2, heads: 2, head_dim: 3, vocab: 12, context: 16, slot_dim: 2, texture_dims: 2 };
    let model = ToyModel::new(cfg, 1)?;
    let seq = TokenSequence::new(vec![ASK, FIRST_OBJECT], vec![vec![0.5, -0.2, 0.1, 0.0], vec![1.2, 0.4, 0.3, -0.2]]);
    let base = model.forward(&seq, true, &mut NoEdits)?;
    let z: Vec<f64> = base.records[3].z.iter().map(|v| *v as f64).collect(); // layer 1, head 1

    let comp = |m: DVector<f64>, w: f64| GaussianComponent::new(m, DMatrix::identity(3, 3) * 0.2, w);
    let here = DVector::from_vec(z);
    let halluc = Gmm::new(vec![comp(here.clone(), 0.5), comp(here.map(|v| v - 4.0), 0.5)])?;
    let trusted = Gmm::new(vec![comp(here.map(|v| v + 1.0), 0.5), comp(here.map(|v| v - 3.0), 0.5)])?;
    let hp = HeadPlan::new(1, 1, Level::Image, halluc, trusted, &BridgeConfig::default())?;
    println!("matches {:?}, transfer[0] = {:.3?}", hp.matching.matches, hp.transfer[0].as_slice());

    for alpha in [0.1, 0.5, 1.0] {
        let plan = InterventionPlan::new(alpha, vec![hp.clone()])?;
        let (g, decisions) = intervened_generate(&model, &seq, &plan, 2)?;
        let ts = trust_shift(&decisions, &plan)?;
        println!(
            "alpha {alpha}: tokens {:?}, confidence {:.3}, trusted log-pdf {:.2} -> {:.2}",
            g.tokens, decisions[0].confidence, ts.mean_before, ts.mean_after
        );
    }
    Ok(())
}
