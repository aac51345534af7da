//! Scores two imperfect "predictions" of a phantom dose: Dose Score, DVH
//! Score, homogeneity index, DVH curves, and a paired t-test across cases.
//!
//! ```text
//! cargo run --release --example dose_metrics
//! ```

use dosediff::metrics::{dvh_curves, evaluate, format_mean_std, paired_t_test, MetricOptions};
use dosediff::phantom::generate_phantom;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = MetricOptions::default();
    let (mut mae_a, mut mae_b) = (Vec::new(), Vec::new());
    for seed in 0..8u64 {
        let truth = generate_phantom(seed, 32, 3, 5)?;
        let gt: Vec<f64> = truth.dose.iter().map(|&d| f64::from(d)).collect();
        // A: slight global underdose. B: blurred horizontally.
        let a: Vec<f64> = gt.iter().map(|d| 0.95 * d).collect();
        let b: Vec<f64> = (0..gt.len())
            .map(|i| {
                let (y, x) = (i / 32, i % 32);
                let l = gt[y * 32 + x.saturating_sub(1)];
                let r = gt[y * 32 + (x + 1).min(31)];
                (l + gt[i] + r) / 3.0
            })
            .collect();
        let ra = evaluate(&a, &truth, &opts)?;
        let rb = evaluate(&b, &truth, &opts)?;
        if seed == 0 {
            println!("case 0, prediction A:\n{}", ra.to_kv());
            let curves = dvh_curves(&a, &truth, 6)?;
            for c in &curves {
                let row: Vec<String> = c.volume_pct.iter().map(|v| format!("{v:5.1}")).collect();
                println!("DVH {:<10} {}", c.structure, row.join(" "));
            }
        }
        mae_a.push(ra.dose_score_mae);
        mae_b.push(rb.dose_score_mae);
    }
    println!("\nDose Score (MAE) A: {}", format_mean_std(&mae_a));
    println!("Dose Score (MAE) B: {}", format_mean_std(&mae_b));
    let t = paired_t_test(&mae_a, &mae_b)?;
    println!("paired t-test: t = {:.3}, df = {}, p = {:.4}", t.t, t.df, t.p);
    Ok(())
}
