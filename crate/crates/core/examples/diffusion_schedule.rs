//! The forward noising process on a phantom dose map: schedule tables, the
//! signal/noise split at a few timesteps, and exact recovery of `x0` from
//! the true noise.
//!
//! ```text
//! cargo run --release --example diffusion_schedule -- [T] [out_dir]
//! ```
//! With `out_dir`, writes a PGM per timestep showing the noisy map.

use std::path::PathBuf;

use dosediff::diffusion::{predict_x0, q_sample, standard_normal, ScheduleConfig};
use dosediff::experiment::render::dose_pgm;
use dosediff::phantom::{denormalize_dose, generate_phantom, normalize_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let out: Option<PathBuf> = args.next().map(PathBuf::from);

    let cfg = ScheduleConfig::with_steps(steps);
    let (b1, bt) = cfg.resolved_betas();
    let s = cfg.build()?;
    println!("T = {steps}, beta {b1:.2e} → {bt:.2e}, alpha_bar_T = {:.3e}", s.alpha_bar(steps));

    let case = generate_phantom(11, 32, 3, 5)?;
    let x0 = normalize_batch(std::slice::from_ref(&case))?.doses.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = standard_normal(x0.shape(), &mut rng);

    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
    }
    println!("{:>5} {:>10} {:>10} {:>14}", "t", "sqrt(ab)", "sqrt(1-ab)", "recovery err");
    for t in [1, steps / 10, steps / 4, steps / 2, steps].into_iter().filter(|&t| t >= 1) {
        let xt = q_sample(&x0, t, &eps, &s)?;
        let back = predict_x0(&xt, &eps, t, &s, false)?;
        let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ab = s.alpha_bar(t);
        println!("{t:>5} {:>10.4} {:>10.4} {err:>14.2e}", ab.sqrt(), (1.0 - ab).sqrt());
        if let Some(dir) = &out {
            let dose: Vec<f64> = xt.data().iter().map(|&v| denormalize_dose(v)).collect();
            std::fs::write(dir.join(format!("x_t{t:04}.pgm")), dose_pgm(32, 32, &dose))?;
        }
    }
    Ok(())
}
