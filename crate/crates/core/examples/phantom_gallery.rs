//! Generates a handful of synthetic thorax-like cases, prints their
//! structure statistics and writes PGM renders of each channel.
//!
//! ```text
//! cargo run --release --example phantom_gallery -- [out_dir] [size]
//! ```

use std::path::PathBuf;

use dosediff::experiment::render::dose_pgm;
use dosediff::phantom::{generate_phantom, write_sample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "gallery".into()));
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    std::fs::create_dir_all(&out)?;

    println!("{:>4} {:>6} {:>6} {:>9} {:>9} {:>9}", "seed", "body", "ptv", "ptv dose", "oar dose", "max dose");
    for seed in 0..6u64 {
        let s = generate_phantom(seed, size, 3, 5)?;
        let mean_over = |m: &[bool]| {
            let v: Vec<f64> = s.dose.iter().zip(m).filter(|(_, &b)| b).map(|(&d, _)| f64::from(d)).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let oar: Vec<bool> = (0..size * size).map(|i| s.oars.iter().any(|o| o[i] > 0.0)).collect();
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        let max = s.dose.iter().cloned().fold(0.0f32, f32::max);
        println!(
            "{seed:>4} {:>6} {:>6} {:>9.3} {:>9.3} {:>9.3}",
            count(&s.body_mask()),
            count(&s.ptv_mask()),
            mean_over(&s.ptv_mask()),
            mean_over(&oar),
            max
        );

        let as_f64 = |v: &[f32], gain: f64| v.iter().map(|&x| f64::from(x) * gain).collect::<Vec<f64>>();
        // masks and CT span [0, 1]; the render maps [0, 1.25] to gray
        std::fs::write(out.join(format!("case{seed}_ct.pgm")), dose_pgm(size, size, &as_f64(&s.ct, 1.25)))?;
        let structures: Vec<f32> = (0..size * size)
            .map(|i| s.ptv[i] + 0.5 * s.oars.iter().map(|o| o[i]).sum::<f32>())
            .collect();
        std::fs::write(out.join(format!("case{seed}_structures.pgm")), dose_pgm(size, size, &as_f64(&structures, 1.25)))?;
        std::fs::write(out.join(format!("case{seed}_dose.pgm")), dose_pgm(size, size, &as_f64(&s.dose, 1.0)))?;
        write_sample(out.join(format!("case{seed}.spdp")), &s)?;
    }
    println!("renders in {}", out.display());
    Ok(())
}
