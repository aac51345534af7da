use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dosediff::experiment::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_sample, cmd_train, schedule_csv, EvalOptions, ExperimentError, RunConfig,
    SampleOptions, TrainOptions,
};
use dosediff::network::FusionStrategy;

/// Anatomy-conditioned diffusion dose prediction on synthetic phantoms.
#[derive(Parser)]
#[command(name = "dosediff", version)]
struct Cli {
    /// JSON run configuration; built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the dataset seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate phantom cases and a split manifest.
    GenData,
    /// Train on the training split.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Sample dose maps for cases (default: the test split).
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        cases: Option<Vec<usize>>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Second prediction set for paired t-tests.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train and evaluate one model per fusion strategy.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "concatenate,add-all,attn-all,attn-last2")]
        strategies: Vec<FusionStrategy>,
    },
    /// Print the beta/alpha tables as CSV.
    DumpSchedule,
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.data {
        cfg.data.dir = d;
    }
    match cli.cmd {
        Cmd::GenData => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let out = cli.out.unwrap_or_else(|| cfg.data.dir.clone());
            let m = cmd_gen_data(&cfg, &out)?;
            println!(
                "wrote {} cases to {} (train {}, val {}, test {})",
                m.count,
                out.display(),
                m.split.train.len(),
                m.split.val.len(),
                m.split.test.len()
            );
        }
        Cmd::Train { resume, stop_at } => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(o) = cli.out {
                cfg.out_dir = o;
            }
            let s = cmd_train(&cfg, &TrainOptions { resume, stop_at })?;
            println!(
                "trained {}/{} steps, loss {:?} -> {:?}, checkpoint {}",
                s.steps,
                s.total_steps,
                s.first_loss,
                s.last_loss,
                s.checkpoint.display()
            );
        }
        Cmd::Sample { checkpoint, cases } => {
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint.spck"));
            let out = cli.out.unwrap_or_else(|| cfg.out_dir.join("predictions"));
            let opts = SampleOptions {
                checkpoint,
                cases,
                seed: cli.seed.unwrap_or(cfg.seed),
            };
            let written = cmd_sample(&cfg, &opts, &out)?;
            println!("sampled {} cases into {}", written.len(), out.display());
        }
        Cmd::Eval { pred, truth, baseline } => {
            let truth = truth.unwrap_or_else(|| cfg.data.dir.clone());
            let out = cli.out.unwrap_or_else(|| cfg.out_dir.join("eval"));
            let opts = EvalOptions {
                metrics: cfg.metrics,
                baseline,
            };
            let s = cmd_eval(&pred, &truth, &opts, &out)?;
            println!(
                "{} cases: dose_score_mae {:.3}±{:.3}, dvh_score {:.3}±{:.3}, hi {:.3}±{:.3}",
                s.cases.len(),
                s.mean[1],
                s.std[1],
                s.mean[2],
                s.std[2],
                s.mean[3],
                s.std[3]
            );
        }
        Cmd::Ablate { strategies } => {
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = cli.out.unwrap_or_else(|| cfg.out_dir.join("ablation"));
            let rows = cmd_ablate(&cfg, &strategies, &out)?;
            println!("{} configurations, table in {}", rows.len(), out.join("comparison.csv").display());
        }
        Cmd::DumpSchedule => {
            let csv = schedule_csv(&cfg.schedule.build()?);
            if let Some(out) = cli.out {
                std::fs::create_dir_all(&out).map_err(|e| ExperimentError::io(&out, e))?;
                let p = out.join("schedule.csv");
                std::fs::write(&p, &csv).map_err(|e| ExperimentError::io(&p, e))?;
            }
            print!("{csv}");
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
