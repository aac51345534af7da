//! Dose evaluation: Dose Score, DVH statistics and score, homogeneity
//! index, DVH curves, difference maps and the paired t-test.
//!
//! Doses are in prescription units. Masks are `&[bool]` aligned with the
//! dose slices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::phantom::PhantomSample;

/// Truth voxels at or below this dose are excluded from the relative score.
pub const RELATIVE_FLOOR: f64 = 1e-3;
pub const DVH_BINS: usize = 256;
pub const DVH_MAX_DOSE: f64 = 1.25;
pub const DVH_QUANTILES: [f64; 3] = [1.0, 95.0, 99.0];
pub const DVH_CSV_HEADER: &str = "structure,dose,volume_pct";
pub const REPORT_CSV_HEADER: &str = "case,dose_score_rel,dose_score_mae,dvh_score,hi";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("quantile {0} outside (0, 100]")]
    Quantile(f64),
    #[error("mean dose is not positive")]
    ZeroMean,
    #[error("differences have zero variance")]
    DegenerateVariance,
    #[error("need at least two paired cases")]
    TooFewCases,
    #[error("no structures given")]
    NoStructures,
}

fn check_len(a: usize, b: usize) -> Result<(), MetricsError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricsError::Length(a, b))
    }
}

fn masked<'a>(dose: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    dose.iter().zip(mask).filter(|(_, &m)| m).map(|(&d, _)| d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoseScoreVariant {
    /// Signed mean of `(pred − truth) / truth`.
    Relative,
    /// Mean of `|pred − truth|`.
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseScore {
    pub value: f64,
    /// Voxels dropped because truth was at or below [`RELATIVE_FLOOR`].
    pub excluded: usize,
}

pub fn dose_score(pred: &[f64], truth: &[f64], mask: &[bool], variant: DoseScoreVariant) -> Result<DoseScore, MetricsError> {
    check_len(pred.len(), truth.len())?;
    check_len(pred.len(), mask.len())?;
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
        if !m {
            continue;
        }
        match variant {
            DoseScoreVariant::Mae => sum += (p - t).abs(),
            DoseScoreVariant::Relative if t > RELATIVE_FLOOR => sum += (p - t) / t,
            DoseScoreVariant::Relative => {
                excluded += 1;
                continue;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask("dose score".into()));
    }
    Ok(DoseScore {
        value: sum / n as f64,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub structure: String,
    pub dose: Vec<f64>,
    /// Percent of the structure receiving at least `dose[k]`.
    pub volume_pct: Vec<f64>,
}

impl DvhCurve {
    pub fn write_csv_rows(&self, out: &mut String) {
        for (d, v) in self.dose.iter().zip(&self.volume_pct) {
            let _ = writeln!(out, "{},{d},{v}", self.structure);
        }
    }
}

/// `bin_count` uniform thresholds from 0 to `max_dose` inclusive.
pub fn dvh_grid(bin_count: usize, max_dose: f64) -> Vec<f64> {
    match bin_count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..bin_count).map(|k| max_dose * k as f64 / (bin_count - 1) as f64).collect(),
    }
}

pub fn dvh_curve_at(
    structure: &str,
    dose: &[f64],
    mask: &[bool],
    thresholds: &[f64],
) -> Result<DvhCurve, MetricsError> {
    check_len(dose.len(), mask.len())?;
    let mut vals: Vec<f64> = masked(dose, mask).collect();
    if vals.is_empty() {
        return Err(MetricsError::EmptyMask(format!("DVH of {structure}")));
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len() as f64;
    let volume_pct = thresholds
        .iter()
        .map(|&d| {
            let below = vals.partition_point(|&v| v < d);
            100.0 * (vals.len() - below) as f64 / n
        })
        .collect();
    Ok(DvhCurve {
        structure: structure.to_string(),
        dose: thresholds.to_vec(),
        volume_pct,
    })
}

/// DVH on the default grid: 256 bins over `[0, 1.25]`.
pub fn dvh_curve(structure: &str, dose: &[f64], mask: &[bool], bin_count: usize) -> Result<DvhCurve, MetricsError> {
    dvh_curve_at(structure, dose, mask, &dvh_grid(bin_count, DVH_MAX_DOSE))
}

/// `D_q`: sort masked doses descending and take index `ceil(q/100 · N) − 1`.
pub fn d_stat(dose: &[f64], mask: &[bool], q: f64) -> Result<f64, MetricsError> {
    check_len(dose.len(), mask.len())?;
    if !(q > 0.0 && q <= 100.0) {
        return Err(MetricsError::Quantile(q));
    }
    let mut vals: Vec<f64> = masked(dose, mask).collect();
    if vals.is_empty() {
        return Err(MetricsError::EmptyMask("dose statistic".into()));
    }
    vals.sort_by(|a, b| b.total_cmp(a));
    let idx = ((q / 100.0 * vals.len() as f64).ceil() as usize).clamp(1, vals.len()) - 1;
    Ok(vals[idx])
}

/// Mean of `|D_q(pred) − D_q(truth)|` over every (structure, q ∈ {1, 95, 99}) pair.
pub fn dvh_score(pred: &[f64], truth: &[f64], structures: &[&[bool]]) -> Result<f64, MetricsError> {
    check_len(pred.len(), truth.len())?;
    if structures.is_empty() {
        return Err(MetricsError::NoStructures);
    }
    let mut sum = 0.0;
    for mask in structures {
        for q in DVH_QUANTILES {
            sum += (d_stat(pred, mask, q)? - d_stat(truth, mask, q)?).abs();
        }
    }
    Ok(sum / (structures.len() * DVH_QUANTILES.len()) as f64)
}

/// Population standard deviation over mean, on the masked region.
pub fn homogeneity_index(dose: &[f64], mask: &[bool]) -> Result<f64, MetricsError> {
    check_len(dose.len(), mask.len())?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(MetricsError::EmptyMask("homogeneity index".into()));
    }
    let mean = masked(dose, mask).sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return Err(MetricsError::ZeroMean);
    }
    let var = masked(dose, mask).map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(var.sqrt() / mean)
}

pub fn dose_difference_map(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>, MetricsError> {
    check_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| p - t).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    check_len(a.len(), b.len())?;
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFewCases);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(MetricsError::DegenerateVariance);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let even = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// Every voxel.
    All,
    /// `ct > 0`.
    Body,
    Ptv,
}

impl Region {
    pub fn mask(self, s: &PhantomSample) -> Vec<bool> {
        match self {
            Region::All => vec![true; s.ct.len()],
            Region::Body => s.body_mask(),
            Region::Ptv => s.ptv_mask(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Body => "body",
            Region::Ptv => "ptv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub eval_region: Region,
    pub hi_region: Region,
    pub dvh_bins: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            eval_region: Region::Body,
            hi_region: Region::Ptv,
            dvh_bins: DVH_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureStats {
    pub name: String,
    /// `D1, D95, D99` of the prediction.
    pub pred: [f64; 3],
    pub truth: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dose_score_relative: f64,
    pub dose_score_mae: f64,
    pub dvh_score: f64,
    /// Homogeneity index of the prediction; NaN when it puts no dose in the region.
    pub hi: f64,
    pub hi_truth: f64,
    pub max_abs_diff: f64,
    /// Voxels excluded from the relative score by the truth floor.
    pub relative_excluded: usize,
    pub eval_region: Region,
    pub hi_region: Region,
    pub structures: Vec<StructureStats>,
}

/// Structures scored by the DVH Score: PTV then each OAR.
pub fn structures_of(s: &PhantomSample) -> Vec<(String, Vec<bool>)> {
    let mut out = vec![("ptv".to_string(), s.ptv_mask())];
    out.extend((0..s.oar_count()).map(|k| (format!("oar{}", k + 1), s.oar_mask(k))));
    out
}

/// Scores `pred` against the ground-truth dose of `truth`.
pub fn evaluate(pred: &[f64], truth: &PhantomSample, opts: &MetricOptions) -> Result<MetricsReport, MetricsError> {
    let gt: Vec<f64> = truth.dose.iter().map(|&d| f64::from(d)).collect();
    check_len(pred.len(), gt.len())?;
    let eval_mask = opts.eval_region.mask(truth);
    let hi_mask = opts.hi_region.mask(truth);
    let rel = dose_score(pred, &gt, &eval_mask, DoseScoreVariant::Relative)?;
    let mae = dose_score(pred, &gt, &eval_mask, DoseScoreVariant::Mae)?;
    let structures = structures_of(truth);
    let masks: Vec<&[bool]> = structures.iter().map(|(_, m)| m.as_slice()).collect();
    let stats = structures
        .iter()
        .map(|(name, m)| {
            let q = |d: &[f64]| -> Result<[f64; 3], MetricsError> {
                Ok([d_stat(d, m, 1.0)?, d_stat(d, m, 95.0)?, d_stat(d, m, 99.0)?])
            };
            Ok(StructureStats {
                name: name.clone(),
                pred: q(pred)?,
                truth: q(&gt)?,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    let diff = dose_difference_map(pred, &gt)?;
    Ok(MetricsReport {
        dose_score_relative: rel.value,
        dose_score_mae: mae.value,
        dvh_score: dvh_score(pred, &gt, &masks)?,
        hi: match homogeneity_index(pred, &hi_mask) {
            // a prediction with no dose in the region is scoreable, just not by HI
            Err(MetricsError::ZeroMean) => f64::NAN,
            r => r?,
        },
        hi_truth: homogeneity_index(&gt, &hi_mask)?,
        max_abs_diff: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        relative_excluded: rel.excluded,
        eval_region: opts.eval_region,
        hi_region: opts.hi_region,
        structures: stats,
    })
}

/// DVH curves of every structure for one dose map.
pub fn dvh_curves(dose: &[f64], truth: &PhantomSample, bins: usize) -> Result<Vec<DvhCurve>, MetricsError> {
    structures_of(truth)
        .iter()
        .map(|(name, m)| dvh_curve(name, dose, m, bins))
        .collect()
}

pub fn dvh_csv(curves: &[DvhCurve]) -> String {
    let mut out = format!("{DVH_CSV_HEADER}\n");
    for c in curves {
        c.write_csv_rows(&mut out);
    }
    out
}

impl MetricsReport {
    /// Row matching [`REPORT_CSV_HEADER`].
    pub fn csv_row(&self, case: &str) -> String {
        format!(
            "{case},{},{},{},{}",
            self.dose_score_relative, self.dose_score_mae, self.dvh_score, self.hi
        )
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dose_score_rel={}", self.dose_score_relative);
        let _ = writeln!(s, "dose_score_mae={}", self.dose_score_mae);
        let _ = writeln!(s, "dvh_score={}", self.dvh_score);
        let _ = writeln!(s, "hi={}", self.hi);
        let _ = writeln!(s, "hi_truth={}", self.hi_truth);
        let _ = writeln!(s, "max_abs_diff={}", self.max_abs_diff);
        let _ = writeln!(s, "relative_excluded={}", self.relative_excluded);
        let _ = writeln!(s, "eval_region={}", self.eval_region.name());
        let _ = writeln!(s, "hi_region={}", self.hi_region.name());
        for st in &self.structures {
            for (k, q) in ["d1", "d95", "d99"].iter().enumerate() {
                let _ = writeln!(s, "{}.{q}.pred={}", st.name, st.pred[k]);
                let _ = writeln!(s, "{}.{q}.truth={}", st.name, st.truth[k]);
            }
        }
        s
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `mean±std` with three decimals.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.3}±{s:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn identical_maps_score_zero() {
        let d = [0.2, 0.9, 1.1, 0.0];
        for v in [DoseScoreVariant::Relative, DoseScoreVariant::Mae] {
            assert_eq!(dose_score(&d, &d, &all(4), v).unwrap().value, 0.0);
        }
    }

    #[test]
    fn single_voxel_relative_score() {
        let s = dose_score(&[3.0], &[2.0], &[true], DoseScoreVariant::Relative).unwrap();
        assert_eq!(s.value, 0.5);
    }

    #[test]
    fn floor_voxels_are_excluded_and_counted() {
        let s = dose_score(&[1.0, 5.0], &[0.0, 2.0], &all(2), DoseScoreVariant::Relative).unwrap();
        assert_eq!((s.value, s.excluded), (1.5, 1));
        assert!(dose_score(&[1.0], &[0.0], &[true], DoseScoreVariant::Relative).is_err());
    }

    #[test]
    fn empty_masks_are_errors() {
        assert!(matches!(dose_score(&[1.0], &[1.0], &[false], DoseScoreVariant::Mae), Err(MetricsError::EmptyMask(_))));
        assert!(d_stat(&[1.0], &[false], 50.0).is_err());
        assert!(homogeneity_index(&[1.0], &[false]).is_err());
        assert!(dvh_curve("x", &[1.0], &[false], 8).is_err());
    }

    #[test]
    fn constant_dose_dvh_is_a_step() {
        let c = dvh_curve_at("s", &[0.6; 10], &all(10), &[0.0, 0.3, 0.6, 0.61, 1.0]).unwrap();
        assert_eq!(c.volume_pct, vec![100.0, 100.0, 100.0, 0.0, 0.0]);
    }

    #[test]
    fn ramp_dvh_at_midpoint() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = dvh_curve_at("s", &d, &all(100), &[50.5]).unwrap();
        assert_eq!(c.volume_pct, vec![50.0]);
    }

    #[test]
    fn default_grid() {
        let g = dvh_grid(DVH_BINS, DVH_MAX_DOSE);
        assert_eq!((g.len(), g[0], g[255]), (256, 0.0, 1.25));
    }

    #[test]
    fn d_stat_conventions() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(d_stat(&d, &all(100), 95.0).unwrap(), 6.0);
        assert_eq!(d_stat(&d, &all(100), 100.0).unwrap(), 1.0);
        assert_eq!(d_stat(&d, &all(100), 1.0).unwrap(), 100.0);
        assert_eq!(d_stat(&[0.7; 5], &all(5), 37.0).unwrap(), 0.7);
        assert!(matches!(d_stat(&d, &all(100), 0.0), Err(MetricsError::Quantile(_))));
    }

    #[test]
    fn shifted_prediction_dvh_score() {
        let truth: Vec<f64> = (0..50).map(|i| f64::from(i) * 0.02).collect();
        let pred: Vec<f64> = truth.iter().map(|d| d + 0.5).collect();
        let m = all(50);
        assert!((dvh_score(&pred, &truth, &[&m]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(dvh_score(&truth, &truth, &[&m]).unwrap(), 0.0);
        assert_eq!(dvh_score(&truth, &truth, &[]), Err(MetricsError::NoStructures));
    }

    #[test]
    fn homogeneity_examples() {
        assert_eq!(homogeneity_index(&[2.0; 4], &all(4)).unwrap(), 0.0);
        assert_eq!(homogeneity_index(&[1.0, 3.0], &all(2)).unwrap(), 0.5);
        assert_eq!(homogeneity_index(&[0.0, 0.0], &all(2)), Err(MetricsError::ZeroMean));
    }

    #[test]
    fn difference_map_is_antisymmetric() {
        let (a, b) = ([1.0, 2.0, 0.5], [0.5, 2.5, 0.5]);
        let ab = dose_difference_map(&a, &b).unwrap();
        let ba = dose_difference_map(&b, &a).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
        assert_eq!(dose_difference_map(&a, &a).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn t_test_degenerate_and_shifted() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test(&a, &a), Err(MetricsError::DegenerateVariance));
        assert_eq!(paired_t_test(&[1.0], &[2.0]), Err(MetricsError::TooFewCases));
        let b = [0.0, 0.999, 2.001, 2.0];
        let r = paired_t_test(&[1.0, 2.0, 3.0, 3.0], &b).unwrap();
        assert!(r.t > 100.0 && r.p < 1e-4, "{r:?}");
    }

    #[test]
    fn t_distribution_known_values() {
        // t = 2.776 is the two-sided 5% critical value at df = 4.
        assert!((student_t_two_sided(2.776_445, 4.0) - 0.05).abs() < 1e-6);
        // df = 1 is Cauchy: p = 1 − 2·atan(t)/π.
        let t: f64 = 1.7;
        assert!((student_t_two_sided(t, 1.0) - (1.0 - 2.0 * t.atan() / std::f64::consts::PI)).abs() < 1e-12);
        assert!((student_t_two_sided(0.0, 7.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_std_format() {
        assert_eq!(format_mean_std(&[1.0, 3.0]), "2.000±1.414");
    }

    #[test]
    fn zero_dose_prediction_still_scores() {
        let truth = crate::phantom::generate_phantom(3, 16, 2, 5).unwrap();
        let r = evaluate(&vec![0.0; 256], &truth, &MetricOptions::default()).unwrap();
        assert!(r.hi.is_nan());
        assert!(r.dose_score_mae > 0.0 && r.hi_truth.is_finite());
    }
}
