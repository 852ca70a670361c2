use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmc_core::envs::Coverage;
use dmc_core::error::{Error, Result};
use dmc_core::pipeline::config::RunConfig;
use dmc_core::pipeline::run::{self, EvalTarget, FoundationKind, RunDir, SynthReport};

#[derive(Parser, Debug)]
#[command(name = "dmc", about = "Train and align diffusion models for control")]
struct Cli {
    /// Run directory (created when missing).
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Configuration file; defaults to the run directory's config.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the offline dataset (or toy-world samples).
    SynthData {
        #[arg(long)]
        coverage: Option<Coverage>,
    },
    /// Fit the IQL evaluation function.
    TrainQ,
    /// Fit the foundation model.
    TrainFoundation {
        /// Fit the unconditional trajectory planner used by `cascade`.
        #[arg(long)]
        planner: bool,
    },
    /// Run sequential alignment.
    Align {
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Curate pairs, train and evaluate the cascading up-sampler.
    Cascade,
    /// Evaluate a model over fixed episode seeds.
    Eval {
        #[arg(long)]
        seeds: Option<usize>,
        /// `foundation`, `aligned`, or a checkpoint path.
        #[arg(long)]
        model: Option<String>,
    },
    /// Write learning-curve CSV (and SVG) from metrics.csv.
    ExportPlots {
        #[arg(long)]
        svg: bool,
    },
}

fn load_config(cli: &Cli, dir: &RunDir) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => dir.load_config()?,
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    match &cli.command {
        Command::SynthData { coverage: Some(c) } => cfg.dataset.coverage = *c,
        Command::Align { passes: Some(p) } => cfg.align.schedule.passes = *p,
        _ => {}
    }
    cfg.align.validate(cfg.foundation.steps)?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let dir = RunDir::new(&cli.run_dir);
    let cfg = load_config(cli, &dir)?;
    match &cli.command {
        Command::SynthData { .. } => match run::synth_data(&dir, &cfg)? {
            SynthReport::Nav1D { episodes, mean_return } => {
                println!("dataset: {episodes} episodes, mean return {mean_return:.4}")
            }
            SynthReport::Toy { samples } => println!("toy data: {samples} samples"),
        },
        Command::TrainQ => {
            run::train_q(&dir, &cfg)?;
            println!("Q written to {}", dir.q().display());
        }
        Command::TrainFoundation { planner } => {
            let kind = if *planner { FoundationKind::Planner } else { FoundationKind::Task };
            let losses = run::train_foundation(&dir, &cfg, kind)?;
            let tail = &losses[losses.len().saturating_sub(100)..];
            println!("foundation trained; final loss {:.5}", tail.iter().sum::<f64>() / tail.len().max(1) as f64);
        }
        Command::Align { .. } => {
            let out = run::align(&dir, &cfg)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "aligned: return {:.4} -> {:.4} over {} updates, {} rollbacks",
                out.initial.mean,
                out.best.mean,
                out.steps,
                out.rollbacks.len()
            );
        }
        Command::Cascade => {
            let rep = run::cascade(&dir, &cfg)?;
            println!("cascade: {} pairs ({} attempted), final loss {:.5}", rep.pairs, rep.attempted, rep.final_loss);
            for s in &rep.passes {
                println!(
                    "  passes {}: score {:.4} -> {:.4} (var {:.4}), t {:.3}, p {:.3e}",
                    s.passes, s.cond_mean, s.out_mean, s.out_var, s.t, s.p
                );
            }
        }
        Command::Eval { seeds, model } => {
            let target = match model.as_deref() {
                None => EvalTarget::Latest,
                Some("foundation") => EvalTarget::Foundation,
                Some("aligned") => EvalTarget::Aligned,
                Some(p) => EvalTarget::Path(PathBuf::from(p)),
            };
            let stats = run::eval(&dir, &cfg, &target, *seeds)?;
            let coh = stats.coherency.map_or_else(|| "-".into(), |c| format!("{c:.4}"));
            println!("mean {:.4} std {:.4} coherency {coh}", stats.mean, stats.std);
        }
        Command::ExportPlots { svg } => {
            for p in run::export_plots(&dir, &cfg, *svg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) | Error::Contract(_) | Error::Shape { .. } => ExitCode::from(2),
                Error::Numeric(_) | Error::Io(_) => ExitCode::FAILURE,
            }
        }
    }
}
