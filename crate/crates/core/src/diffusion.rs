//! Conditional DDPM machinery: variance schedule, forward corruption,
//! noise-prediction objective and the ancestral reverse sampler.
//!
//! Timesteps are 1-based throughout: `t ∈ [1, T]`, and `x_0` is the clean
//! sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside [1, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("noise must be zero at the final step t = 1")]
    NoiseAtFinalStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas evenly spaced from `beta_start` to `beta_end`.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Horizon `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    /// `beta[t]`, 1-based. Panics outside `[1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Schedule settings as they appear in run configs. Unset betas default to
/// the 1000-step linear endpoints (1e-4, 0.02) rescaled by `1000 / T`, so a
/// short horizon still ends close to pure noise; `beta_end` is capped at 0.999.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: None,
            beta_end: None,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn resolved_betas(&self) -> (f64, f64) {
        let scale = 1000.0 / self.steps.max(1) as f64;
        let start = self.beta_start.unwrap_or((1e-4 * scale).min(0.999));
        let end = self.beta_end.unwrap_or((0.02 * scale).min(0.999));
        (start, end)
    }

    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        let (start, end) = self.resolved_betas();
        make_schedule(self.steps, start, end, self.kind)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    same_shape(x0, eps)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data))
}

/// Inverts the forward corruption given a noise estimate. With `clamp`, the
/// result is clipped to the normalized dose range `[-1, 1]`.
///
/// For very small `ᾱ_t` the division amplifies errors in `eps_hat`; that is
/// left to the caller (values stay finite in `f64` for any valid schedule).
pub fn predict_x0(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    clamp: bool,
) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    same_shape(x_t, eps_hat)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| {
            let v = (x - b * e) / a;
            if clamp {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data))
}

/// One reverse step:
/// `x_{t-1} = (x_t − (1 − α_t)/√(1 − ᾱ_t) · eps_hat) / √α_t + √β_t · z`.
///
/// `z = None` means zero noise; a nonzero `z` at `t = 1` is rejected.
pub fn p_sample_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    same_shape(x_t, eps_hat)?;
    if let Some(z) = z {
        same_shape(x_t, z)?;
        if t == 1 && z.data().iter().any(|&v| v != 0.0) {
            return Err(DiffusionError::NoiseAtFinalStep);
        }
    }
    let alpha = s.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = s.beta(t).sqrt();
    let mut data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| inv * (x - coef * e))
        .collect();
    if let Some(z) = z {
        data.iter_mut().zip(z.data()).for_each(|(d, zv)| *d += sigma * zv);
    }
    Ok(Tensor::new(x_t.shape().to_vec(), data))
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// A conditional noise-prediction network `eps_theta(x_t, t, phi(y))`.
///
/// `encode` computes `phi(y)` once per condition so the sampler can reuse it
/// across all reverse steps.
pub trait NoisePredictor {
    type Features;

    fn encode(&self, condition: &Tensor) -> crate::Result<Self::Features>;

    fn predict_noise(&self, x_t: &Tensor, t: usize, features: &Self::Features) -> crate::Result<Tensor>;
}

/// One training example: clean normalized dose and its anatomy condition.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x0: Tensor,
    pub condition: Tensor,
}

/// The per-example randomness of one objective evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

/// Timesteps uniform on `[1, T]` and standard-normal noise, drawn in batch
/// order (timestep first, then noise) for each example.
pub fn draw_noise(batch: &[TrainingPair], s: &NoiseSchedule, rng: &mut impl Rng) -> Vec<NoiseDraw> {
    batch
        .iter()
        .map(|p| NoiseDraw {
            t: rng.random_range(1..=s.steps()),
            eps: standard_normal(p.x0.shape(), rng),
        })
        .collect()
}

/// Mean over the batch of `MSE(eps_hat, eps)` for fixed draws.
pub fn noise_prediction_loss<M: NoisePredictor>(
    model: &M,
    batch: &[TrainingPair],
    draws: &[NoiseDraw],
    s: &NoiseSchedule,
) -> crate::Result<Tensor> {
    assert_eq!(batch.len(), draws.len(), "one draw per example");
    assert!(!batch.is_empty(), "empty batch");
    let mut total: Option<Tensor> = None;
    for (pair, draw) in batch.iter().zip(draws) {
        let x_t = q_sample(&pair.x0, draw.t, &draw.eps, s)?;
        let features = model.encode(&pair.condition)?;
        let eps_hat = model.predict_noise(&x_t, draw.t, &features)?;
        let loss = eps_hat.mse(&draw.eps)?;
        total = Some(match total {
            None => loss,
            Some(acc) => acc.add(&loss)?,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / batch.len() as f64))
}

/// Draws `(t, eps)` for every example and returns the batch loss; call
/// [`crate::tensor::backward`] on the result for gradients.
pub fn training_step<M: NoisePredictor>(
    model: &M,
    batch: &[TrainingPair],
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> crate::Result<Tensor> {
    let draws = draw_noise(batch, s, rng);
    noise_prediction_loss(model, batch, &draws, s)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, deterministic in `seed`.
/// The result is in normalized dose units and is not clamped.
pub fn sample_loop<M: NoisePredictor>(
    model: &M,
    condition: &Tensor,
    shape: &[usize],
    s: &NoiseSchedule,
    seed: u64,
) -> crate::Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = model.encode(condition)?;
    let mut x = standard_normal(shape, &mut rng);
    for t in (1..=s.steps()).rev() {
        let eps_hat = model.predict_noise(&x, t, &features)?;
        let z = (t > 1).then(|| standard_normal(shape, &mut rng));
        x = p_sample_step(&x, t, &eps_hat, s, z.as_ref())?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor {
        Tensor::new([1], vec![v])
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        for (start, end) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.5)] {
            assert!(make_schedule(10, start, end, ScheduleKind::Linear).is_err());
        }
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn linear_endpoints() {
        let s = make_schedule(5, 0.1, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1), 0.1);
        assert!((s.beta(5) - 0.5).abs() < 1e-15);
        assert!((s.beta(3) - 0.3).abs() < 1e-15);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn default_betas_scale_with_horizon() {
        assert_eq!(ScheduleConfig::with_steps(1000).resolved_betas(), (1e-4, 0.02));
        let (a, b) = ScheduleConfig::with_steps(50).resolved_betas();
        assert!((a - 2e-3).abs() < 1e-15 && (b - 0.4).abs() < 1e-15);
        let s = ScheduleConfig::with_steps(50).build().unwrap();
        assert!(s.alpha_bar(50) < 1e-3);
        assert_eq!(ScheduleConfig::with_steps(10).resolved_betas().1, 0.999);
    }

    #[test]
    fn q_sample_zero_noise_and_zero_signal() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x = q_sample(&t1(1.0), 1, &t1(0.0), &s).unwrap();
        assert!((x.item() - 0.5).abs() < 1e-15);

        let s = NoiseSchedule::from_betas(vec![0.81]).unwrap();
        let x = q_sample(&t1(0.0), 1, &t1(1.0), &s).unwrap();
        assert!((x.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn timestep_range_is_checked() {
        let s = NoiseSchedule::from_betas(vec![0.1; 3]).unwrap();
        for t in [0, 4] {
            assert_eq!(
                q_sample(&t1(0.0), t, &t1(0.0), &s).unwrap_err(),
                DiffusionError::TimestepOutOfRange { t, steps: 3 }
            );
        }
    }

    #[test]
    fn predict_x0_zero_noise_and_clamp() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let c = 0.37;
        let xt = t1(s.alpha_bar(2).sqrt() * c);
        let x0 = predict_x0(&xt, &t1(0.0), 2, &s, false).unwrap();
        assert!((x0.item() - c).abs() < 1e-15);

        let big = Tensor::new([2], vec![5.0, -5.0]);
        let clamped = predict_x0(&big, &Tensor::zeros([2]), 1, &s, true).unwrap();
        assert_eq!(clamped.data(), &[1.0, -1.0]);
    }

    #[test]
    fn reverse_step_with_zero_prediction() {
        let s = NoiseSchedule::from_betas(vec![0.01]).unwrap();
        let x = p_sample_step(&t1(2.0), 1, &t1(0.0), &s, None).unwrap();
        assert!((x.item() - 2.0 / 0.99f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn final_step_rejects_noise() {
        let s = NoiseSchedule::from_betas(vec![0.01, 0.02]).unwrap();
        let err = p_sample_step(&t1(0.0), 1, &t1(0.0), &s, Some(&t1(0.3))).unwrap_err();
        assert_eq!(err, DiffusionError::NoiseAtFinalStep);
        assert!(p_sample_step(&t1(0.0), 1, &t1(0.0), &s, Some(&t1(0.0))).is_ok());
        assert!(p_sample_step(&t1(0.0), 2, &t1(0.0), &s, Some(&t1(0.3))).is_ok());
    }
}
