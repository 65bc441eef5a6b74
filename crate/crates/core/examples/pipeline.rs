// Full run on a reduced configuration: train, probe, fit, couple, evaluate,
// then write every artifact with its hash.
//
//     cargo run --release --example pipeline -- [out-dir] [config.json]

use scalpel::pipeline::{run_to_dir, RunConfig};

fn main() -> scalpel::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().unwrap_or_else(|| "scalpel-out".into());
    let cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig {
            n_per_manifold: 400,
            n_test: 100,
            gmm_k: 8,
            ..RunConfig::default()
        },
    };
    let (out, hashes) = run_to_dir(&cfg, out_dir.as_ref())?;
    for v in &out.report.variants {
        println!(
            "{:15} trusted {:.3}  image {:.3}  object {:.3}  perturbed {:.3} (f1 {:.3})",
            v.name, v.trusted.accuracy, v.image.accuracy, v.object.accuracy, v.perturbed.accuracy, v.perturbed.f1
        );
    }
    if let Some(ts) = &out.report.trust_shift {
        println!("trusted log-pdf rose in {}/{} decisions", ts.increased, ts.decisions);
    }
    println!("{} artifacts under {out_dir}", hashes.len());
    Ok(())
}
