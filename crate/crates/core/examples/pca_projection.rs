// Project trusted and hallucinated activations of one head onto their top
// two principal axes and write the CSV a plotter would read.

use scalpel::gmm::{fit_em, EmConfig};
use scalpel::project::{project_head, write_csv, Pca};
use scalpel::rng;
use scalpel::store::{ActivationTensor, Dims, ManifoldLabel};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn tensor(shift: f32, seed: u64, label: ManifoldLabel) -> scalpel::Result<ActivationTensor> {
    let dims = Dims::new(300, 1, 1, 6);
    let mut r = rng::stream(seed, "pca-example");
    let data = (0..dims.len())
        .map(|i| {
            let v: f32 = r.sample(StandardNormal);
            if i % 6 < 2 { 3.0 * v + shift } else { 0.3 * v }
        })
        .collect();
    ActivationTensor::new(dims, data, Some(label))
}

fn main() -> scalpel::Result<()> {
    let trusted = tensor(0.0, 1, ManifoldLabel::Trusted)?;
    let halluc = tensor(6.0, 2, ManifoldLabel::HallucObject)?;
    let gt = fit_em(&trusted.slice_head(0, 0)?, 3, 0, &EmConfig::default())?;
    let gh = fit_em(&halluc.slice_head(0, 0)?, 3, 0, &EmConfig::default())?;
    let (pca, points) = project_head(&[(&trusted, Some(&gt)), (&halluc, Some(&gh))], 0, 0)?;
    println!("explained variance ratio {:.4?}", pca.explained_ratio());

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("head_0_0.csv");
    write_csv(&points, &path)?;
    for line in std::fs::read_to_string(&path).expect("csv").lines().take(4) {
        println!("{line}");
    }

    // a single row cannot define axes
    if let Err(e) = Pca::fit(&DMatrix::zeros(1, 6), 2) {
        println!("one sample: {e}");
    }
    Ok(())
}
