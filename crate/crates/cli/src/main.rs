use std::path::PathBuf;
use std::process::ExitCode;

use acpo_cli::{pipeline, CliError, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acpo", version, about = "Anchor-constrained perceptual fine-tuning of a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set acpo.lambda2=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (also where upstream checkpoints are read from).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the guiding and the held-out quality scorer.
    TrainIqa(Common),
    /// Pretrain the base noise predictor.
    TrainBase(Common),
    /// Fine-tune adapters against the guiding scorer.
    Finetune(Common),
    /// Compare base and fine-tuned samples under matched noise.
    Evaluate(Common),
    /// Run the weight, window and anchor grids.
    Ablate(Common),
    /// Score PGM images with a trained scorer.
    Score {
        #[command(flatten)]
        common: Common,
        /// Use the held-out scorer instead of the guiding one.
        #[arg(long)]
        heldout: bool,
        /// Condition class for a conditional scorer.
        #[arg(long)]
        condition: Option<usize>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = c.overrides.clone();
    if let Some(out) = &c.out {
        overrides.push(format!("out_dir={}", serde_json::Value::String(out.display().to_string())));
    }
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainIqa(c) => {
            for r in pipeline::train_iqa(&resolve(&c)?)? {
                let gap = r.matched_gap.map_or(String::new(), |g| format!(" matched gap {g:.3}"));
                println!("{} scorer: loss {:.4} spearman {:.3}{gap}", r.scorer, r.final_loss, r.spearman);
            }
        }
        Command::TrainBase(c) => {
            let losses = pipeline::train_base_cmd(&resolve(&c)?)?;
            println!("base model: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Finetune(c) => {
            let o = pipeline::finetune(&resolve(&c)?)?;
            let fmt = |v: Option<f64>| v.map_or("-".into(), |s| format!("{s:.4}"));
            println!("guided score {} -> {}, anchor drift {:.4}", fmt(o.initial_guided_score()), fmt(o.final_guided_score()), o.final_drift);
        }
        Command::Evaluate(c) => {
            let ev = pipeline::evaluate(&resolve(&c)?)?;
            for r in &ev.summary {
                let t = r.t_statistic.map_or("-".into(), |t| format!("{t:.2}"));
                println!("{}: {:.4} -> {:.4} (t {t}, win rate {:.3})", r.metric, r.baseline_mean, r.finetuned_mean, r.win_rate);
            }
            for f in &ev.frechet {
                println!("frechet {}: {:.4}", f.model, f.frechet);
            }
        }
        Command::Ablate(c) => {
            for r in pipeline::ablate(&resolve(&c)?)? {
                println!("{:7} {:16} held-out change {:+.4} drift {:.4}", r.group, r.cell, r.heldout_change, r.final_drift);
            }
        }
        Command::Score { common, heldout, condition, images } => {
            for r in pipeline::score(&resolve(&common)?, &images, heldout, condition)? {
                println!("{},{}", r.path, r.score);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
