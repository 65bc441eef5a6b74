// Interpolate between two Gaussians along the bridge and follow its drift.

use nalgebra::{DMatrix, DVector};
use scalpel::bridge::{BridgeConfig, GaussianBridge};
use scalpel::gmm::GaussianComponent;

fn main() -> scalpel::Result<()> {
    let a = GaussianComponent::new(DVector::from_vec(vec![-2.0, 0.0]), DMatrix::identity(2, 2) * 0.5, 1.0);
    let b = GaussianComponent::new(DVector::from_vec(vec![3.0, 1.0]), DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.3]), 1.0);

    for eps in [0.0, 0.5] {
        let br = GaussianBridge::new(&a, &b, &BridgeConfig::new(eps)?)?;
        println!("eps = {eps}: cost {:.4}", br.cost());
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let m = br.marginal(t)?;
            println!(
                "  t {t:.2}: mean [{:+.3}, {:+.3}] var [{:.3}, {:.3}]",
                m.mean[0], m.mean[1], m.covariance[(0, 0)], m.covariance[(1, 1)]
            );
        }
    }

    // Euler steps along the drift carry the source mean to the target mean.
    let br = GaussianBridge::new(&a, &b, &BridgeConfig::default())?;
    let mut z = a.mean.clone();
    let steps = 100;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        z += br.drift(z.as_slice(), t)? / steps as f64;
    }
    println!("flowed mean to [{:.3}, {:.3}]", z[0], z[1]);
    Ok(())
}
