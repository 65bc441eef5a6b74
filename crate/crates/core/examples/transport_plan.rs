// Couple two mixtures: exact transportation LP against entropic Sinkhorn.

use nalgebra::{DMatrix, DVector};
use scalpel::bridge::BridgeConfig;
use scalpel::coupling::{cost_matrix, match_components, solve_lp, solve_sinkhorn};
use scalpel::gmm::{GaussianComponent, Gmm};

fn line(means: &[f64], weights: &[f64]) -> scalpel::Result<Gmm> {
    Gmm::new(
        means
            .iter()
            .zip(weights)
            .map(|(m, w)| GaussianComponent::new(DVector::from_element(1, *m), DMatrix::from_element(1, 1, 0.3), *w))
            .collect(),
    )
}

fn main() -> scalpel::Result<()> {
    let halluc = line(&[-3.0, 0.0, 2.0, 6.0], &[0.25, 0.25, 0.3, 0.2])?;
    let trusted = line(&[-2.0, 1.0, 2.5], &[0.4, 0.4, 0.2])?;
    let j = cost_matrix(&halluc, &trusted, &BridgeConfig::default())?;
    println!("costs:\n{j:.3}");

    let lp = solve_lp(&j, &halluc.weights(), &trusted.weights())?;
    println!("LP objective {:.5}, {} nonzeros, residual {:.1e}", lp.objective, lp.nonzeros(), lp.max_marginal_residual());
    println!("plan:\n{:.4}", lp.lambda);

    for reg in [1.0, 0.1, 0.01] {
        let sk = solve_sinkhorn(&j, &halluc.weights(), &trusted.weights(), reg, 100_000)?;
        println!("sinkhorn reg {reg:>5}: objective {:.5}", sk.objective);
    }

    let m = match_components(&lp);
    for (r, (j, mass)) in m.matches.iter().zip(&m.mass).enumerate() {
        println!("hallucinated {r} -> trusted {j} (mass {mass:.3})");
    }
    Ok(())
}
