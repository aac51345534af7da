use rand::Rng;
use rand_distr::StandardNormal;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    Zeros,
}

impl Init {
    pub const DEFAULT: Init = Init::TruncNormal(0.02);

    pub fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Init::TruncNormal(std) => trunc_normal(n, std, rng),
            Init::Zeros => vec![0.0; n],
        }
    }
}

pub fn trunc_normal(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}
