//! The whole pipeline at desk scale: generate phantoms, train the
//! conditional diffusion model, sample predicted dose maps for the test
//! cases and score them.
//!
//! ```text
//! cargo run --release --example train_and_sample -- [out_dir] [epochs]
//! ```

use std::path::PathBuf;

use dosediff::diffusion::ScheduleConfig;
use dosediff::experiment::{
    cmd_eval, cmd_gen_data, cmd_sample, cmd_train, EvalOptions, RunConfig, SampleOptions, TrainOptions,
};
use dosediff::network::ModelConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "runs/example".into()));
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_size: 16,
        base_channels: 4,
        ..ModelConfig::default()
    };
    cfg.schedule = ScheduleConfig::with_steps(50);
    cfg.optim.lr = 2e-3;
    cfg.optim.batch_size = 4;
    cfg.optim.epochs = epochs;
    cfg.data.count = 12;
    cfg.data.split = [8, 0, 4];
    cfg.data.dir = root.join("data");
    cfg.out_dir = root.join("run");

    let m = cmd_gen_data(&cfg, &cfg.data.dir)?;
    println!("{} cases: train {:?}, test {:?}", m.count, m.split.train, m.split.test);

    let summary = cmd_train(&cfg, &TrainOptions::default())?;
    println!(
        "{} steps, loss {:.4} → {:.4}",
        summary.steps,
        summary.first_loss.unwrap_or(f64::NAN),
        summary.last_loss.unwrap_or(f64::NAN)
    );

    let pred = root.join("predictions");
    let opts = SampleOptions {
        checkpoint: summary.checkpoint,
        cases: None,
        seed: cfg.seed,
    };
    let written = cmd_sample(&cfg, &opts, &pred)?;
    println!("sampled {} dose maps (renders in {})", written.len(), pred.join("renders").display());

    let eval = cmd_eval(&pred, &cfg.data.dir, &EvalOptions::default(), &root.join("eval"))?;
    println!(
        "dose score (MAE) {:.3}±{:.3}, DVH score {:.3}±{:.3}, HI {:.3}±{:.3}",
        eval.mean[1], eval.std[1], eval.mean[2], eval.std[2], eval.mean[3], eval.std[3]
    );
    Ok(())
}
