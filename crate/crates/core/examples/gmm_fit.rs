// Fit a Gaussian mixture with EM and read off posteriors.
//
// Samples come from a known three-component mixture; the fit is seeded, so
// the same seed always gives the same components bit for bit.

use nalgebra::{DMatrix, DVector};
use scalpel::gmm::{fit_em_traced, EmConfig, GaussianComponent, Gmm};

fn main() -> scalpel::Result<()> {
    let comp = |x: f64, y: f64, s: f64, w: f64| {
        GaussianComponent::new(DVector::from_vec(vec![x, y]), DMatrix::identity(2, 2) * s, w)
    };
    let truth = Gmm::new(vec![comp(-4.0, 0.0, 0.5, 0.3), comp(0.0, 3.0, 1.0, 0.5), comp(4.0, -1.0, 0.2, 0.2)])?;
    let x = truth.sample(3000, 7)?;

    let (fit, trace) = fit_em_traced(&x, 3, 11, &EmConfig::default())?;
    println!("{} EM iterations, final log-likelihood {:.3}", trace.loglik.len(), trace.loglik.last().unwrap());
    println!("worst relative decrease: {:.2e}", trace.worst_relative_decrease());
    for (i, c) in fit.components().iter().enumerate() {
        println!("component {i}: weight {:.3} mean [{:.3}, {:.3}]", c.weight, c.mean[0], c.mean[1]);
    }

    let z = [0.2, 2.5];
    let post = fit.posterior(&z)?;
    let (best, conf) = fit.assign(&z)?;
    println!("posterior at {z:?}: {post:.3?} -> component {best} ({conf:.3})");
    println!("log density there: {:.4}", fit.log_pdf(&z)?);
    Ok(())
}
