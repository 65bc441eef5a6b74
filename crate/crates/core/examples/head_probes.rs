// Rank heads by how well a linear probe separates trusted from hallucinated
// activations. Heads 2 and 5 of layer 1 carry a planted signal.

use scalpel::probes::{build_accuracy_matrix, ProbeConfig};
use scalpel::rng;
use scalpel::store::{ActivationTensor, Dims, ManifoldLabel};

use rand::Rng;
use rand_distr::StandardNormal;

fn tensor(n: usize, shift: f32, seed: u64, label: ManifoldLabel) -> scalpel::Result<ActivationTensor> {
    let dims = Dims::new(n, 2, 8, 4);
    let mut r = rng::stream(seed, "probe-example");
    let mut data = Vec::with_capacity(dims.len());
    for _ in 0..n {
        for l in 0..2 {
            for h in 0..8 {
                for c in 0..4 {
                    let planted = l == 1 && (h == 2 || h == 5) && c == 0;
                    let v: f32 = r.sample(StandardNormal);
                    data.push(if planted { v + shift } else { v });
                }
            }
        }
    }
    ActivationTensor::new(dims, data, Some(label))
}

fn main() -> scalpel::Result<()> {
    let trusted = tensor(600, 0.0, 1, ManifoldLabel::Trusted)?;
    let halluc = tensor(600, 3.0, 2, ManifoldLabel::HallucImage)?;
    let (m, probes) = build_accuracy_matrix(&trusted, &halluc, 9, &ProbeConfig::default(), 4)?;
    for (l, row) in m.acc.iter().enumerate() {
        println!("layer {l}: {}", row.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" "));
    }
    println!("top 4: {:?}", m.selected);
    let best = probes.iter().find(|p| (p.layer, p.head) == m.selected[0]).unwrap();
    println!("best probe weights {:.2?} bias {:.2}", best.weights, best.bias);
    Ok(())
}
