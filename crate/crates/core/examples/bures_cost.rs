// Squared 2-Wasserstein (Bures) cost between Gaussians, and its entropic
// counterpart for a few regularisation strengths.

use nalgebra::{DMatrix, DVector};
use scalpel::bridge::{cost, BridgeConfig};
use scalpel::gmm::GaussianComponent;

fn main() -> scalpel::Result<()> {
    let a = GaussianComponent::new(DVector::from_vec(vec![0.0, 0.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), 1.0);
    let b = GaussianComponent::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.8]), 1.0);

    let w2 = cost(&a, &b, &BridgeConfig::default())?;
    println!("W2^2(a, b) = {w2:.6}");
    println!("W2^2(a, a) = {:.3e}", cost(&a, &a, &BridgeConfig::default())?);

    // equal covariances: only the means matter
    let shifted = GaussianComponent::new(b.mean.clone(), a.covariance.clone(), 1.0);
    println!("equal covariances: {:.6} vs |dmu|^2 = {:.6}", cost(&a, &shifted, &BridgeConfig::default())?, (&a.mean - &b.mean).norm_squared());

    for eps in [1e-3, 0.1, 1.0, 10.0] {
        println!("eps {eps:>6}: cost {:.6}", cost(&a, &b, &BridgeConfig::new(eps)?)?);
    }
    Ok(())
}
