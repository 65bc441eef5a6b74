use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scalpel::datagen;
use scalpel::evaluate;
use scalpel::gmm::{self, EmConfig, Gmm};
use scalpel::json;
use scalpel::mitigation::InterventionPlan;
use scalpel::model::ToyModel;
use scalpel::pipeline::{self, RunConfig};
use scalpel::project;
use scalpel::store;
use scalpel::ScalpelError;

#[derive(Parser)]
#[command(name = "scalpel", version, about = "Steer attention heads away from hallucination manifolds")]
struct Cli {
    /// Directory every other path is resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, collect, probe, fit, couple and evaluate; write all artifacts.
    Pipeline {
        /// JSON run configuration; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha_base: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        gmm_k: Option<usize>,
    },
    /// PCA of one head's activations to CSV.
    Project {
        /// Activation file(s) written by the pipeline.
        #[arg(long, required = true)]
        tensor: Vec<PathBuf>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
        /// Components for the hard assignment when no fitted mixture exists
        /// under `gmm/`.
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Vanilla against intervened answers on saved episodes.
    Evaluate {
        #[arg(long, default_value = "model.bin")]
        model: PathBuf,
        #[arg(long, default_value = "plan.json")]
        plan: PathBuf,
        /// Episode files (JSONL).
        #[arg(long, required = true)]
        episodes: Vec<PathBuf>,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
        #[arg(long)]
        alpha_base: Option<f64>,
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SCALPEL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("SCALPEL_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> scalpel::Result<()> {
    let base = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Pipeline {
            config,
            seed,
            alpha_base,
            top_k,
            gmm_k,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(existing(&p)?)?,
                None => RunConfig::default(),
            };
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = alpha_base {
                cfg.alpha_base = v;
            }
            if let Some(v) = top_k {
                cfg.top_k = v;
            }
            if let Some(v) = gmm_k {
                cfg.gmm_k = v;
            }
            let dir = match (cli.out_dir, &cfg.out_dir) {
                (Some(d), _) => d,
                (None, Some(d)) => d.clone(),
                (None, None) => PathBuf::from("."),
            };
            let (out, hashes) = pipeline::run_to_dir(&cfg, &dir)?;
            let v = out.report.variant("vanilla").map(|r| r.perturbed.accuracy).unwrap_or(f64::NAN);
            let s = out.report.variant("scalpel").map(|r| r.perturbed.accuracy).unwrap_or(f64::NAN);
            println!(
                "wrote {} artifacts to {}; perturbed accuracy vanilla {v:.4}, scalpel {s:.4}",
                hashes.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Project {
            tensor,
            layer,
            head,
            out,
            k,
            seed,
        } => {
            let tensors = tensor
                .iter()
                .map(|p| store::read_tensor(existing(&base.join(p))?))
                .collect::<scalpel::Result<Vec<_>>>()?;
            let mixtures = tensors
                .iter()
                .map(|t| mixture_for(&base, t, layer, head, k, seed))
                .collect::<scalpel::Result<Vec<_>>>()?;
            let parts: Vec<_> = tensors.iter().zip(&mixtures).map(|(t, g)| (t, Some(g))).collect();
            let (pca, points) = project::project_head(&parts, layer, head)?;
            project::write_csv(&points, &base.join(&out))?;
            let ratio = pca.explained_ratio();
            println!(
                "{} points to {}; explained variance {}",
                points.len(),
                out.display(),
                ratio.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(", ")
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            plan,
            episodes,
            out,
            alpha_base,
            steps,
        } => {
            let model = ToyModel::load(existing(&base.join(model))?)?;
            let plan_path = base.join(plan);
            existing(&plan_path)?;
            let (dir, name) = split_path(&plan_path)?;
            let mut plan = InterventionPlan::load(dir, name)?;
            if let Some(a) = alpha_base {
                plan = plan.with_alpha(a)?;
            }
            let sets = episodes
                .iter()
                .map(|p| {
                    let name = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    Ok((name, datagen::read_episodes(existing(&base.join(p))?)?))
                })
                .collect::<scalpel::Result<Vec<_>>>()?;
            let report = evaluate::compare(&model, &plan, &sets, steps)?;
            json::write_artifact(&report, &base.join(&out))?;
            for s in &report.splits {
                println!(
                    "{}: accuracy {:.4} -> {:.4}, f1 {:.4} -> {:.4}",
                    s.name, s.vanilla.accuracy, s.scalpel.accuracy, s.vanilla.f1, s.scalpel.f1
                );
            }
            Ok(())
        }
    }
}

/// The pipeline's mixture for this head if one was written, else a fresh fit.
fn mixture_for(
    base: &Path,
    t: &store::ActivationTensor,
    layer: usize,
    head: usize,
    k: usize,
    seed: u64,
) -> scalpel::Result<Gmm> {
    if let Some(label) = t.label {
        let saved = base.join("gmm").join(format!("{}_L{layer}_H{head}.json", label.as_str()));
        if saved.exists() {
            return Gmm::load(&saved);
        }
    }
    let x = t.slice_head(layer, head)?;
    if x.nrows() < 2 {
        return Err(ScalpelError::TooFewSamples);
    }
    gmm::fit_em(&x, k.min(x.nrows()), seed, &EmConfig::default())
}

/// Missing inputs are a usage error, not a runtime failure.
fn existing(p: &Path) -> scalpel::Result<&Path> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(ScalpelError::InvalidArgument(format!("no such file: {}", p.display())))
    }
}

fn split_path(p: &Path) -> scalpel::Result<(&Path, &str)> {
    let name = p
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| ScalpelError::InvalidArgument(format!("not a file path: {}", p.display())))?;
    Ok((p.parent().unwrap_or(Path::new("")), name))
}
