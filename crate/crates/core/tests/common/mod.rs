//! Fixtures and independent oracles shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dosediff::diffusion::{
    noise_prediction_loss, standard_normal, NoiseDraw, NoisePredictor, NoiseSchedule, ScheduleConfig, TrainingPair,
};
use dosediff::experiment::RunConfig;
use dosediff::network::{build_model, DoseNet, FusionStrategy, ModelConfig};
use dosediff::nn::{Init, SwinBlockParams};
use dosediff::optim::{BoundParams, ParamStore};
use dosediff::phantom::{generate_phantom, normalize_batch};
use dosediff::tensor::{backward, Attrs, OpKind, TensorError};
use dosediff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform values kept at least `gap` away from zero (for kinked ops).
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                v.signum() * (gap + v.abs())
            })
            .collect(),
    )
}

/// One random evaluation point per catalog op.
pub fn op_cases(seed: u64) -> Vec<(OpKind, Vec<Tensor>, Attrs)> {
    let mut r = rng(seed);
    let r = &mut r;
    let u = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);
    vec![
        (OpKind::Add, vec![u(r, &[3, 4]), u(r, &[4])], Attrs::new()),
        (OpKind::Sub, vec![u(r, &[3, 4]), u(r, &[3, 4])], Attrs::new()),
        (OpKind::Mul, vec![u(r, &[3, 4]), u(r, &[3, 4])], Attrs::new()),
        (OpKind::ScalarMul, vec![u(r, &[5])], Attrs::new().float("c", 1.7)),
        (OpKind::MatMul, vec![u(r, &[4, 4]), u(r, &[4, 4])], Attrs::new()),
        (OpKind::Bmm, vec![u(r, &[2, 3, 4]), u(r, &[2, 4, 5])], Attrs::new()),
        (
            OpKind::Conv2d,
            vec![u(r, &[1, 4, 8, 8]), u(r, &[3, 4, 3, 3]), u(r, &[3])],
            Attrs::new().int("stride", 1).int("pad", 1),
        ),
        (
            OpKind::Conv2d,
            vec![u(r, &[2, 7, 7]), u(r, &[3, 2, 3, 3])],
            Attrs::new().int("stride", 2).int("pad", 1),
        ),
        (OpKind::UpsampleNearest, vec![u(r, &[2, 3, 3])], Attrs::new().int("factor", 2)),
        (OpKind::Reshape, vec![u(r, &[2, 6])], Attrs::new().ints("shape", &[3, 4])),
        (OpKind::Permute, vec![u(r, &[2, 3, 4])], Attrs::new().ints("axes", &[2, 0, 1])),
        (OpKind::Concat, vec![u(r, &[2, 3]), u(r, &[2, 2])], Attrs::new().int("axis", 1)),
        (
            OpKind::Slice,
            vec![u(r, &[4, 5])],
            Attrs::new().int("axis", 1).int("start", 1).int("len", 3),
        ),
        (OpKind::Roll2d, vec![u(r, &[2, 4, 5])], Attrs::new().int("dy", 1).int("dx", -2)),
        (OpKind::Softmax, vec![u(r, &[8])], Attrs::new().int("axis", 0)),
        (OpKind::Softmax, vec![u(r, &[3, 5])], Attrs::new().int("axis", 1)),
        (OpKind::Relu, vec![away_from_zero(r, &[10], 0.05)], Attrs::new()),
        (OpKind::Gelu, vec![u(r, &[10])], Attrs::new()),
        (
            OpKind::LayerNorm,
            vec![u(r, &[3, 6]), uniform(r, &[6], 0.5, 1.5), u(r, &[6])],
            Attrs::new().float("eps", 1e-5),
        ),
        (OpKind::ChannelBias, vec![u(r, &[3, 4, 4]), u(r, &[3])], Attrs::new()),
        (OpKind::Mean, vec![u(r, &[7])], Attrs::new()),
        (OpKind::Sum, vec![u(r, &[7])], Attrs::new()),
        (OpKind::Mse, vec![u(r, &[6]), u(r, &[6])], Attrs::new()),
    ]
}

/// H = 16, C = 4 with the default block counts.
pub fn tiny_config(fusion: FusionStrategy) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        base_channels: 4,
        fusion,
        ..ModelConfig::default()
    }
}

/// Parameters with every tensor (including zero-initialized heads and
/// projector up-projections) filled with random values, so that no branch
/// is switched off.
pub fn randomized_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = build_model(cfg, &mut rng(seed)).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    for (name, p) in store.iter_mut() {
        let gain = name.ends_with(".g");
        for v in p.value.iter_mut() {
            let u: f64 = r.random_range(-1.0..1.0);
            *v = if gain { 1.0 + 0.2 * u } else { 0.3 * u };
        }
    }
    store
}

pub fn phantom_pairs(n: usize, h: usize, seed: u64) -> Vec<TrainingPair> {
    let samples: Vec<_> = (0..n).map(|i| generate_phantom(seed + i as u64, h, 3, 5).unwrap()).collect();
    let b = normalize_batch(&samples).unwrap();
    b.doses
        .into_iter()
        .zip(b.conditions)
        .map(|(x0, condition)| TrainingPair { x0, condition })
        .collect()
}

/// A noise predictor that knows the clean sample and returns the exact
/// noise separating `x_t` from it.
pub struct ExactNoise<'a> {
    pub x0: Tensor,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for ExactNoise<'_> {
    type Features = ();

    fn encode(&self, _: &Tensor) -> dosediff::Result<()> {
        Ok(())
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, _: &()) -> dosediff::Result<Tensor> {
        let ab = self.schedule.alpha_bar(t);
        let data = x_t
            .data()
            .iter()
            .zip(self.x0.data())
            .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), data))
    }
}

pub const WIDE_INIT: Init = Init::TruncNormal(0.5);

/// Swin block parameters under `blk.` with random weights and norm gains.
pub fn swin_store(c: usize, time_dim: Option<usize>, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    SwinBlockParams::init(&mut store, &mut rng(seed), "blk", c, time_dim, WIDE_INIT).unwrap();
    let mut r = rng(seed + 1);
    for (name, p) in store.iter_mut() {
        if name.contains("norm") {
            let fresh = uniform(&mut r, &p.shape, 0.5, 1.5);
            p.value.copy_from_slice(fresh.data());
        }
    }
    store
}

/// A run small enough for the command-level tests: 6 cases (4 train,
/// 2 test), H = 16, C = 4, one block per stage, T = 10, 4 steps.
pub fn tiny_run_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_size: 16,
        base_channels: 4,
        blocks_per_stage: 1,
        fusion: FusionStrategy::AttnLast(2),
        ..ModelConfig::default()
    };
    cfg.schedule = ScheduleConfig::with_steps(10);
    cfg.optim.batch_size = 2;
    cfg.optim.epochs = 2;
    cfg.optim.lr = 1e-3;
    cfg.optim.checkpoint_every = 2;
    cfg.data.count = 6;
    cfg.data.split = [4, 0, 2];
    cfg.data.dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg
}

/// Every file under `dir` except wall-clock timings, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timings.csv" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// First differing file between two snapshots, if any.
pub fn snapshot_diff(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Option<String> {
    if a.keys().ne(b.keys()) {
        return Some("file lists differ".into());
    }
    a.iter()
        .find(|(k, v)| b[*k] != **v)
        .map(|(k, _)| format!("{} differs", k.display()))
}

fn lib_to_tensor(e: dosediff::Error) -> TensorError {
    match e {
        dosediff::Error::Tensor(t) => t,
        other => panic!("unexpected model error: {other}"),
    }
}

const CANDIDATES: usize = 8;
/// Forward and backward one-sided slopes must agree this closely (relative)
/// for a coordinate to count as smooth at the check point.
const SMOOTHNESS_TOL: f64 = 1e-3;

/// Worst relative error of the noise-prediction loss gradient through the
/// full model, checked at one element of every parameter tensor.
///
/// Thousands of ReLU units sit between the parameters and the loss, so a
/// step of `eps` in a single weight regularly pushes some pre-activation
/// across zero. Across such a kink the forward and backward one-sided
/// slopes disagree at first order in the slope change, while at a smooth
/// point they differ only by `f''·eps`. Candidates failing that comparison
/// are skipped for the next one, and if every candidate straddles a kink
/// (common for biases, which move a whole channel) the step shrinks by 4×
/// up to three times. The analytic gradient plays no part in the filter,
/// so a wrong backward pass cannot hide behind it. Among smooth candidates
/// the one with the largest analytic gradient is used, which keeps the
/// relative error off entries whose true gradient is at the roundoff level.
/// If nothing passes, the largest-gradient candidate at `eps` is scored
/// anyway.
pub fn end_to_end_gradient_error(cfg: &ModelConfig, seed: u64, eps: f64) -> f64 {
    let store = randomized_params(cfg, seed);
    let schedule = NoiseSchedule::from_betas((1..=20).map(|i| 0.01 * i as f64).collect()).unwrap();
    let pair = phantom_pairs(1, cfg.image_size, 500 + seed).remove(0);
    let mut r = rng(seed ^ 0x5151);
    let draw = NoiseDraw {
        t: r.random_range(1..=schedule.steps()),
        eps: standard_normal(&[1, cfg.image_size, cfg.image_size], &mut r),
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let point: Vec<Tensor> = store
        .iter()
        .map(|(_, p)| Tensor::new(p.shape.clone(), p.value.clone()))
        .collect();
    let loss = |xs: &[Tensor]| -> Tensor {
        let bound: BoundParams = names.iter().cloned().zip(xs.iter().cloned()).collect();
        let net = DoseNet::from_bound(cfg, &bound).map_err(lib_to_tensor).unwrap();
        noise_prediction_loss(&net, std::slice::from_ref(&pair), std::slice::from_ref(&draw), &schedule)
            .map_err(lib_to_tensor)
            .unwrap()
    };

    let vars: Vec<Tensor> = point
        .iter()
        .map(|t| Tensor::variable(t.shape().to_vec(), t.to_vec()))
        .collect();
    backward(&loss(&vars)).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();

    let f0 = loss(&point).item();
    let at = |i: usize, j: usize, delta: f64| {
        let mut xs = point.clone();
        let mut data = xs[i].to_vec();
        data[j] += delta;
        xs[i] = Tensor::new(xs[i].shape().to_vec(), data);
        loss(&xs).item()
    };

    let mut worst: f64 = 0.0;
    for (i, t) in point.iter().enumerate() {
        let g = &analytic[i];
        let mut cands: Vec<usize> = (0..CANDIDATES).map(|_| r.random_range(0..t.numel())).collect();
        cands.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        cands.dedup();
        let mut fallback = None;
        let mut chosen = None;
        'steps: for h in [eps, eps / 4.0, eps / 16.0, eps / 64.0] {
            for &j in &cands {
                let (up, down) = (at(i, j, h), at(i, j, -h));
                let numeric = (up - down) / (2.0 * h);
                let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
                fallback.get_or_insert((j, numeric));
                if (fwd - bwd).abs() <= SMOOTHNESS_TOL * fwd.abs().max(bwd.abs()).max(1e-8) {
                    chosen = Some((j, numeric));
                    break 'steps;
                }
            }
        }
        let (j, numeric) = chosen.or(fallback).expect("at least one candidate");
        let err = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Per-group "some gradient entry is nonzero" after one optimizer step.
pub fn gradient_reach(cfg: &ModelConfig, seed: u64) -> Vec<(&'static str, bool)> {
    use dosediff::diffusion::training_step;
    use dosediff::network::param_group;
    use dosediff::optim::AdamConfig;
    let mut store = build_model(cfg, &mut rng(seed)).unwrap();
    let schedule = NoiseSchedule::from_betas((1..=20).map(|i| 0.01 * i as f64).collect()).unwrap();
    let batch = phantom_pairs(2, cfg.image_size, 900 + seed);
    let mut r = rng(seed + 1);
    let adam = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    let mut last = None;
    for _ in 0..2 {
        let net = DoseNet::new(cfg, &store, true).unwrap();
        let loss = training_step(&net, &batch, &schedule, &mut r).unwrap();
        let grads = backward(&loss).unwrap();
        store.adam_step(&grads, &adam).unwrap();
        last = Some(store.complete_grads(&grads));
    }
    let grads = last.unwrap();
    let mut groups: Vec<(&'static str, bool)> = Vec::new();
    for (name, g) in grads.iter() {
        let group = param_group(name);
        let nonzero = g.data().iter().any(|&v| v != 0.0);
        match groups.iter_mut().find(|(n, _)| *n == group) {
            Some(e) => e.1 |= nonzero,
            None => groups.push((group, nonzero)),
        }
    }
    groups
}

// Brute-force metric oracles written without the library's helpers.

pub fn oracle_dose_score_rel(pred: &[f64], truth: &[f64], mask: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if mask[i] && truth[i] > 1e-3 {
            s += (pred[i] - truth[i]) / truth[i];
            n += 1.0;
        }
    }
    s / n
}

pub fn oracle_dose_score_mae(pred: &[f64], truth: &[f64], mask: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            s += (pred[i] - truth[i]).abs();
            n += 1.0;
        }
    }
    s / n
}

pub fn oracle_d_stat(dose: &[f64], mask: &[bool], q: f64) -> f64 {
    let mut v = Vec::new();
    for i in 0..dose.len() {
        if mask[i] {
            v.push(dose[i]);
        }
    }
    // Selection by repeated maximum extraction instead of a sort.
    let k = (q / 100.0 * v.len() as f64).ceil() as usize;
    let mut out = f64::NAN;
    for _ in 0..k.max(1) {
        let (idx, &m) = v
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, x)| if *x > *acc.1 { (i, x) } else { acc });
        out = m;
        v.remove(idx);
    }
    out
}

pub fn oracle_dvh_score(pred: &[f64], truth: &[f64], masks: &[Vec<bool>]) -> f64 {
    let mut s = 0.0;
    for m in masks {
        for q in [1.0, 95.0, 99.0] {
            s += (oracle_d_stat(pred, m, q) - oracle_d_stat(truth, m, q)).abs();
        }
    }
    s / (3 * masks.len()) as f64
}

pub fn oracle_hi(dose: &[f64], mask: &[bool]) -> f64 {
    let vals: Vec<f64> = dose.iter().zip(mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn oracle_dvh(dose: &[f64], mask: &[bool], thresholds: &[f64]) -> Vec<f64> {
    let total = mask.iter().filter(|&&m| m).count() as f64;
    thresholds
        .iter()
        .map(|&d| {
            let mut c = 0.0;
            for i in 0..dose.len() {
                if mask[i] && dose[i] >= d {
                    c += 1.0;
                }
            }
            100.0 * c / total
        })
        .collect()
}

/// Two-sided Student-t tail by composite Simpson integration of the density.
pub fn oracle_t_two_sided(t: f64, df: f64) -> f64 {
    let ln_c = libm::lgamma((df + 1.0) / 2.0) - libm::lgamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    // P(|T| < |t|) = 2 ∫_0^|t| pdf
    let n = 200_000;
    let b = t.abs();
    let h = b / n as f64;
    let mut s = pdf(0.0) + pdf(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

/// A random dose case: truth in [0, 1.25], prediction a noisy copy, and
/// three random structure masks.
pub fn random_dose_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>, Vec<Vec<bool>>) {
    let mut r = rng(seed);
    let truth: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.25)).collect();
    let pred: Vec<f64> = truth.iter().map(|t| (t + r.random_range(-0.2..0.2)).max(0.0)).collect();
    let eval: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
    let structs = (0..3)
        .map(|k| {
            let p = 0.1 + 0.2 * k as f64;
            let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(p)).collect();
            m[k] = true;
            m
        })
        .collect();
    (pred, truth, eval, structs)
}
