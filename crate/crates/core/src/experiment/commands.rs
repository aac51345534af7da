//! The command implementations. Each takes a validated [`RunConfig`] and
//! writes its outputs under an explicit directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::render::{diff_ppm, dose_pgm};
use super::{Checkpoint, ExperimentError, RunConfig, StepLog, Trainer};
use crate::diffusion::{sample_loop, NoiseSchedule, TrainingPair};
use crate::metrics::{self, dvh_csv, dvh_curves, mean_std, paired_t_test, MetricOptions, MetricsReport};
use crate::network::{DoseNet, FusionStrategy, ModelConfig};
use crate::optim::ParamStore;
use crate::phantom::{
    case_file_name, case_seed, denormalize_dose, generate_phantom, normalize_batch, read_dose_map, read_sample,
    write_dose_map, write_sample, DataError, DatasetSplit, DoseMap, PhantomSample, GENERATOR_VERSION,
};

pub const LOSS_CSV_HEADER: &str = "step,loss,lr";
pub const ABLATION_CSV_HEADER: &str = "strategy,dose_score_rel,dose_score_mae,dvh_score,hi";
const MANIFEST: &str = "manifest.json";

fn create_dir(p: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(p).map_err(|e| ExperimentError::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(p, bytes).map_err(|e| ExperimentError::io(p, e))
}

/// Index of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub oar_count: usize,
    pub beams: usize,
    pub count: usize,
    pub split: DatasetSplit,
}

/// Writes `count` phantoms and `manifest.json` to `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest, ExperimentError> {
    cfg.validate()?;
    create_dir(out)?;
    let d = &cfg.data;
    for id in 0..d.count {
        let s = generate_phantom(case_seed(d.seed, id), cfg.model.image_size, cfg.model.oar_count, d.beams)?;
        write_sample(out.join(case_file_name(id)), &s)?;
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed: d.seed,
        image_size: cfg.model.image_size,
        oar_count: cfg.model.oar_count,
        beams: d.beams,
        count: d.count,
        split: DatasetSplit::new(d.count, d.split, d.seed)?,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, ExperimentError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| ExperimentError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Data(format!("{}: {e}", p.display())))
}

pub fn load_cases(dir: &Path, ids: &[usize]) -> Result<Vec<PhantomSample>, ExperimentError> {
    ids.iter()
        .map(|&id| read_sample(dir.join(case_file_name(id))).map_err(ExperimentError::from))
        .collect()
}

fn check_dataset(model: &ModelConfig, m: &Manifest) -> Result<(), ExperimentError> {
    if (m.image_size, m.oar_count) != (model.image_size, model.oar_count) {
        return Err(ExperimentError::Data(format!(
            "dataset has {}×{} images with {} OARs, model expects {}×{} with {}",
            m.image_size, m.image_size, m.oar_count, model.image_size, model.image_size, model.oar_count
        )));
    }
    Ok(())
}

fn training_pairs(samples: &[PhantomSample]) -> Result<Vec<TrainingPair>, ExperimentError> {
    let batch = normalize_batch(samples)?;
    Ok(batch
        .doses
        .into_iter()
        .zip(batch.conditions)
        .map(|(x0, condition)| TrainingPair { x0, condition })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are complete (still writing the final checkpoint).
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub total_steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

fn loss_row(l: &StepLog) -> String {
    format!("{},{},{}\n", l.step, l.loss, l.lr)
}

/// Trains on the dataset's training split, writing `config.json`,
/// `loss.csv`, `checkpoint.spck` and numbered checkpoints under `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary, ExperimentError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data.dir)?;
    check_dataset(&cfg.model, &manifest)?;
    let pairs = training_pairs(&load_cases(&cfg.data.dir, &manifest.split.train)?)?;
    let out = &cfg.out_dir;
    create_dir(&out.join("checkpoints"))?;
    write_file(&out.join("config.json"), cfg.to_json() + "\n")?;

    let loss_path = out.join("loss.csv");
    let (mut trainer, mut log) = match &opts.resume {
        Some(p) => {
            let t = Trainer::resume(cfg.clone(), Checkpoint::load(p)?, pairs)?;
            // Keep the rows written before the checkpoint was taken.
            let old = fs::read_to_string(&loss_path).unwrap_or_default();
            let mut log = format!("{LOSS_CSV_HEADER}\n");
            for line in old.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < t.step()) {
                    log.push_str(line);
                    log.push('\n');
                }
            }
            (t, log)
        }
        None => (Trainer::new(cfg.clone(), pairs)?, format!("{LOSS_CSV_HEADER}\n")),
    };

    let total = trainer.total_steps();
    let stop = opts.stop_at.unwrap_or(total).min(total);
    let (mut first, mut last) = (None, None);
    let every = cfg.optim.checkpoint_every;
    while trainer.step() < stop {
        let entry = match trainer.train_step() {
            Ok(e) => e,
            Err(e) => {
                write_file(&loss_path, &log)?;
                return Err(e);
            }
        };
        log.push_str(&loss_row(&entry));
        first.get_or_insert(entry.loss);
        last = Some(entry.loss);
        if every > 0 && trainer.step() % every == 0 {
            trainer
                .checkpoint()
                .save(&out.join("checkpoints").join(format!("step_{:06}.spck", trainer.step())))?;
        }
    }
    write_file(&loss_path, &log)?;
    let ck_path = out.join("checkpoint.spck");
    trainer.checkpoint().save(&ck_path)?;
    Ok(TrainSummary {
        steps: trainer.step(),
        total_steps: total,
        first_loss: first,
        last_loss: last,
        checkpoint: ck_path,
    })
}

/// Runs the reverse process for one case and returns the dose in
/// prescription units. With `clamp`, the normalized map is clipped to
/// `[−1, 1]` first.
pub fn sample_dose(
    model: &ModelConfig,
    params: &ParamStore,
    schedule: &NoiseSchedule,
    case: &PhantomSample,
    seed: u64,
    clamp: bool,
) -> Result<Vec<f64>, ExperimentError> {
    let net = DoseNet::new(model, params, false)?;
    let h = model.image_size;
    if (case.height, case.width, case.oar_count()) != (h, h, model.oar_count) {
        return Err(ExperimentError::Data(format!(
            "case is {}×{} with {} OARs, checkpoint model expects {h}×{h} with {}",
            case.height,
            case.width,
            case.oar_count(),
            model.oar_count
        )));
    }
    let x0 = sample_loop(&net, &case.condition(), &[1, h, h], schedule, seed)?;
    Ok(x0
        .data()
        .iter()
        .map(|&v| denormalize_dose(if clamp { v.clamp(-1.0, 1.0) } else { v }))
        .collect())
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub checkpoint: PathBuf,
    /// Case ids; the test split when absent.
    pub cases: Option<Vec<usize>>,
    pub seed: u64,
}

/// Samples each case into `out/case_XXXX.spdp` (dose-only files) with
/// renders under `out/renders/`.
pub fn cmd_sample(cfg: &RunConfig, opts: &SampleOptions, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let model = &ck.config.model;
    let schedule = ck.config.schedule.build()?;
    let ids = match &opts.cases {
        Some(ids) => ids.clone(),
        None => load_manifest(&cfg.data.dir)?.split.test,
    };
    create_dir(&out.join("renders"))?;
    let mut written = Vec::with_capacity(ids.len());
    for id in ids {
        let case = read_sample(cfg.data.dir.join(case_file_name(id)))?;
        let seed = case_seed(opts.seed, id);
        let dose = sample_dose(model, &ck.params, &schedule, &case, seed, cfg.sampling.clamp)?;
        let meta = [
            ("case", id.to_string()),
            ("seed", seed.to_string()),
            ("checkpoint_step", ck.step.to_string()),
            ("fusion", model.fusion.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let map = DoseMap {
            height: case.height,
            width: case.width,
            dose: dose.iter().map(|&d| d as f32).collect(),
            meta,
        };
        let path = out.join(case_file_name(id));
        write_dose_map(&path, &map)?;
        let pred: Vec<f64> = map.dose.iter().map(|&d| f64::from(d)).collect();
        let truth: Vec<f64> = case.dose.iter().map(|&d| f64::from(d)).collect();
        let diff = metrics::dose_difference_map(&pred, &truth)?;
        let r = out.join("renders");
        let stem = format!("case_{id:04}");
        write_file(&r.join(format!("{stem}_pred.pgm")), dose_pgm(case.height, case.width, &pred))?;
        write_file(&r.join(format!("{stem}_truth.pgm")), dose_pgm(case.height, case.width, &truth))?;
        write_file(&r.join(format!("{stem}_diff.ppm")), diff_ppm(case.height, case.width, &diff))?;
        written.push(path);
    }
    Ok(written)
}

/// Dose from either a prediction file or a full phantom sample.
fn load_dose_any(path: &Path) -> Result<Vec<f64>, ExperimentError> {
    let dose = match read_dose_map(path) {
        Ok(m) => m.dose,
        Err(DataError::Kind { .. }) => read_sample(path)?.dose,
        Err(e) => return Err(e.into()),
    };
    Ok(dose.into_iter().map(f64::from).collect())
}

fn case_files(dir: &Path) -> Result<Vec<String>, ExperimentError> {
    let rd = fs::read_dir(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| ExperimentError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("case_") && name.ends_with(".spdp") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub metrics: MetricOptions,
    /// Second prediction directory for paired t-tests.
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub cases: Vec<String>,
    pub reports: Vec<MetricsReport>,
    /// Mean and sample standard deviation of (rel, mae, dvh, hi).
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

fn columns(r: &MetricsReport) -> [f64; 4] {
    [r.dose_score_relative, r.dose_score_mae, r.dvh_score, r.hi]
}

const METRIC_NAMES: [&str; 4] = ["dose_score_rel", "dose_score_mae", "dvh_score", "hi"];

fn evaluate_dir(pred: &Path, truth: &Path, opts: &MetricOptions) -> Result<(Vec<String>, Vec<MetricsReport>, Vec<PhantomSample>), ExperimentError> {
    let names = case_files(pred)?;
    if names.is_empty() {
        return Err(ExperimentError::Data(format!("no case files in {}", pred.display())));
    }
    let mut reports = Vec::with_capacity(names.len());
    let mut truths = Vec::with_capacity(names.len());
    for name in &names {
        let tp = truth.join(name);
        if !tp.exists() {
            return Err(ExperimentError::Data(format!("{name} has no ground truth in {}", truth.display())));
        }
        let t = read_sample(&tp)?;
        let p = load_dose_any(&pred.join(name))?;
        reports.push(metrics::evaluate(&p, &t, opts)?);
        truths.push(t);
    }
    Ok((names, reports, truths))
}

/// Scores every `case_*.spdp` in `pred` against `truth`. Writes
/// `metrics.csv` (per case, then `mean` and `std` rows), `summary.txt`,
/// one key-value report and one DVH CSV per case, and `ttest.csv` when a
/// baseline is given.
pub fn cmd_eval(pred: &Path, truth: &Path, opts: &EvalOptions, out: &Path) -> Result<EvalSummary, ExperimentError> {
    let (names, reports, truths) = evaluate_dir(pred, truth, &opts.metrics)?;
    create_dir(&out.join("dvh"))?;
    create_dir(&out.join("reports"))?;

    let mut csv = format!("{}\n", metrics::REPORT_CSV_HEADER);
    for (name, r) in names.iter().zip(&reports) {
        let case = name.trim_end_matches(".spdp");
        csv.push_str(&r.csv_row(case));
        csv.push('\n');
        write_file(&out.join("reports").join(format!("{case}.txt")), r.to_kv())?;
    }
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for k in 0..4 {
        let col: Vec<f64> = reports.iter().map(|r| columns(r)[k]).collect();
        (mean[k], std[k]) = mean_std(&col);
    }
    let _ = writeln!(csv, "mean,{},{},{},{}", mean[0], mean[1], mean[2], mean[3]);
    let _ = writeln!(csv, "std,{},{},{},{}", std[0], std[1], std[2], std[3]);
    write_file(&out.join("metrics.csv"), csv)?;

    let mut summary = format!("cases={}\n", names.len());
    for k in 0..4 {
        let _ = writeln!(summary, "{}={:.3}±{:.3}", METRIC_NAMES[k], mean[k], std[k]);
    }
    let hi_truth: Vec<f64> = reports.iter().map(|r| r.hi_truth).collect();
    let _ = writeln!(summary, "hi_truth={}", metrics::format_mean_std(&hi_truth));
    write_file(&out.join("summary.txt"), summary)?;

    for (name, t) in names.iter().zip(&truths) {
        let p = load_dose_any(&pred.join(name))?;
        let g: Vec<f64> = t.dose.iter().map(|&d| f64::from(d)).collect();
        let mut curves = dvh_curves(&p, t, opts.metrics.dvh_bins)?;
        for c in &mut curves {
            c.structure = format!("pred/{}", c.structure);
        }
        for mut c in dvh_curves(&g, t, opts.metrics.dvh_bins)? {
            c.structure = format!("truth/{}", c.structure);
            curves.push(c);
        }
        write_file(&out.join("dvh").join(name.replace(".spdp", ".csv")), dvh_csv(&curves))?;
    }

    if let Some(base) = &opts.baseline {
        let (base_names, base_reports, _) = evaluate_dir(base, truth, &opts.metrics)?;
        if base_names != names {
            return Err(ExperimentError::Data("baseline and prediction case sets differ".into()));
        }
        let mut tt = String::from("metric,t,df,p\n");
        for k in 0..4 {
            let a: Vec<f64> = reports.iter().map(|r| columns(r)[k]).collect();
            let b: Vec<f64> = base_reports.iter().map(|r| columns(r)[k]).collect();
            match paired_t_test(&a, &b) {
                Ok(r) => {
                    let _ = writeln!(tt, "{},{},{},{}", METRIC_NAMES[k], r.t, r.df, r.p);
                }
                Err(_) => {
                    let _ = writeln!(tt, "{},nan,{},nan", METRIC_NAMES[k], names.len().saturating_sub(1));
                }
            }
        }
        write_file(&out.join("ttest.csv"), tt)?;
    }
    Ok(EvalSummary {
        cases: names,
        reports,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: FusionStrategy,
    /// Means over the evaluated cases: rel, mae, dvh, hi.
    pub scores: [f64; 4],
    pub wall_seconds: f64,
}

/// Trains, samples and evaluates one model per strategy with identical
/// data, seed and settings. Each strategy gets `out/<strategy>/`.
pub fn fusion_ablation_matrix(
    cfg: &RunConfig,
    strategies: &[FusionStrategy],
    out: &Path,
) -> Result<Vec<AblationRow>, ExperimentError> {
    let manifest = load_manifest(&cfg.data.dir)?;
    let cases = if manifest.split.test.is_empty() {
        manifest.split.train.clone()
    } else {
        manifest.split.test.clone()
    };
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let started = Instant::now();
        let mut run = cfg.clone();
        run.model.fusion = strategy;
        run.out_dir = out.join(strategy.to_string());
        run.validate()?;
        let summary = cmd_train(&run, &TrainOptions::default())?;
        let pred_dir = run.out_dir.join("predictions");
        cmd_sample(
            &run,
            &SampleOptions {
                checkpoint: summary.checkpoint,
                cases: Some(cases.clone()),
                seed: run.seed,
            },
            &pred_dir,
        )?;
        let eval = cmd_eval(
            &pred_dir,
            &run.data.dir,
            &EvalOptions {
                metrics: run.metrics,
                baseline: None,
            },
            &run.out_dir.join("eval"),
        )?;
        rows.push(AblationRow {
            strategy,
            scores: eval.mean,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Runs [`fusion_ablation_matrix`] and writes `comparison.csv` (deterministic)
/// and `timings.csv` (wall-clock seconds) to `out`.
pub fn cmd_ablate(cfg: &RunConfig, strategies: &[FusionStrategy], out: &Path) -> Result<Vec<AblationRow>, ExperimentError> {
    if strategies.is_empty() {
        return Err(ExperimentError::Config("no strategies given".into()));
    }
    create_dir(out)?;
    let rows = fusion_ablation_matrix(cfg, strategies, out)?;
    let mut table = format!("{ABLATION_CSV_HEADER}\n");
    let mut timings = String::from("strategy,wall_seconds\n");
    for r in &rows {
        let s = r.scores;
        let _ = writeln!(table, "{},{},{},{},{}", r.strategy, s[0], s[1], s[2], s[3]);
        let _ = writeln!(timings, "{},{:.3}", r.strategy, r.wall_seconds);
    }
    write_file(&out.join("comparison.csv"), table)?;
    write_file(&out.join("timings.csv"), timings)?;
    Ok(rows)
}

/// `t,beta,alpha,alpha_bar` for `t = 1..=T`.
pub fn schedule_csv(s: &NoiseSchedule) -> String {
    let mut out = String::from("t,beta,alpha,alpha_bar\n");
    for t in 1..=s.steps() {
        let _ = writeln!(out, "{t},{},{},{}", s.beta(t), s.alpha(t), s.alpha_bar(t));
    }
    out
}
