//! Compares fusion strategies under identical data, seed and budget, then
//! sweeps how many of the deepest encoder stages use cross-attention.
//!
//! ```text
//! cargo run --release --example fusion_ablation -- [out_dir] [epochs]
//! ```
//! At this scale the ranking is noise; the point is the harness. HI reads
//! NaN for a run whose samples put no dose in the PTV.

use std::path::PathBuf;

use dosediff::diffusion::ScheduleConfig;
use dosediff::experiment::{cmd_ablate, cmd_gen_data, RunConfig};
use dosediff::network::{FusionStrategy, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablation".into()));
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(150);

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_size: 16,
        base_channels: 4,
        blocks_per_stage: 1,
        ..ModelConfig::default()
    };
    cfg.schedule = ScheduleConfig::with_steps(20);
    cfg.optim.lr = 2e-3;
    cfg.optim.batch_size = 4;
    cfg.optim.epochs = epochs;
    cfg.data.count = 10;
    cfg.data.split = [7, 0, 3];
    cfg.data.dir = root.join("data");
    cmd_gen_data(&cfg, &cfg.data.dir)?;

    let strategies = [
        FusionStrategy::Concatenate,
        FusionStrategy::AddAll,
        FusionStrategy::AttnAll,
        FusionStrategy::AttnLast(2),
    ];
    let sweep = [1, 2, 3, 4].map(FusionStrategy::AttnLast);
    for (name, set) in [("strategies", &strategies[..]), ("attn_last", &sweep[..])] {
        let out = root.join(name);
        let rows = cmd_ablate(&cfg, set, &out)?;
        println!("\n{name} ({})", out.join("comparison.csv").display());
        println!("{:<12} {:>10} {:>10} {:>8} {:>8}", "strategy", "mae", "dvh", "hi", "secs");
        for r in rows {
            println!(
                "{:<12} {:>10.4} {:>10.4} {:>8.4} {:>8.1}",
                r.strategy.to_string(),
                r.scores[1],
                r.scores[2],
                r.scores[3],
                r.wall_seconds
            );
        }
    }
    Ok(())
}
