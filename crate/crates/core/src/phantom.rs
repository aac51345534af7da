//! Synthetic 2-D thorax-like phantoms with a beam-model dose, and the
//! binary sample format.
//!
//! A phantom is a random body ellipse with a smooth CT-like texture, an
//! elliptical PTV and `O` elliptical OARs inside the body. Dose is a sum of
//! beams aimed at the PTV centroid: a Gaussian lateral profile times
//! exponential attenuation with depth from the body surface, normalized so
//! the PTV mean is one prescription unit.
//!
//! File layout (little-endian):
//!
//! ```text
//! "SPDP" | u16 version | u16 H | u16 W | u16 O
//! f32 × H·W per channel: CT, PTV, OAR_1..OAR_O, dose
//! u32 byte length | UTF-8 metadata, one key=value per line
//! ```
//!
//! Predicted dose maps use the same layout with `O = 0xFFFF` and a single
//! dose channel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPDP";
pub const FORMAT_VERSION: u16 = 1;
pub const GENERATOR_VERSION: u32 = 1;
/// Header `O` value marking a dose-only prediction file.
pub const PREDICTION_SENTINEL: u16 = 0xFFFF;
/// Dose (prescription units) mapped to +1 by [`normalize_dose`].
pub const D_MAX_SCALE: f64 = 1.25;
const MAX_RETRIES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic {0:?}: not a sample file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u16 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed metadata: {0}")]
    Metadata(String),
    #[error("expected a {expected} file")]
    Kind { expected: &'static str },
    #[error("invalid phantom request: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One synthetic case. All maps are row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub height: usize,
    pub width: usize,
    pub ct: Vec<f32>,
    pub ptv: Vec<f32>,
    pub oars: Vec<Vec<f32>>,
    pub dose: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

impl PhantomSample {
    pub fn oar_count(&self) -> usize {
        self.oars.len()
    }

    /// Body support, `ct > 0`.
    pub fn body_mask(&self) -> Vec<bool> {
        self.ct.iter().map(|&v| v > 0.0).collect()
    }

    pub fn ptv_mask(&self) -> Vec<bool> {
        self.ptv.iter().map(|&v| v > 0.5).collect()
    }

    pub fn oar_mask(&self, k: usize) -> Vec<bool> {
        self.oars[k].iter().map(|&v| v > 0.5).collect()
    }

    /// Condition channels `CT, PTV, OAR_1..OAR_O` as a `[2+O, H, W]` tensor.
    pub fn condition(&self) -> Tensor {
        let mut data = Vec::with_capacity((2 + self.oars.len()) * self.ct.len());
        for ch in [&self.ct, &self.ptv].into_iter().chain(self.oars.iter()) {
            data.extend(ch.iter().map(|&v| f64::from(v)));
        }
        Tensor::new([2 + self.oars.len(), self.height, self.width], data)
    }
}

/// Fixed generator constants. [`PhantomParams::default`] is the versioned
/// configuration; other values exist for tests and experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    /// Attenuation per pixel of depth.
    pub mu: f64,
    /// Lateral Gaussian width as a fraction of `H`.
    pub sigma_frac: f64,
    /// Beam-angle jitter as a fraction of the angular spacing.
    pub angle_jitter: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            mu: 0.02,
            sigma_frac: 0.06,
            angle_jitter: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    /// Rotation in radians.
    rot: f64,
}

impl Ellipse {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rot.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Distance travelled inside the ellipse by a ray moving in direction
    /// `dir` that ends at the interior point `(x, y)`.
    fn depth(&self, x: f64, y: f64, dir: (f64, f64)) -> f64 {
        let (s, c) = self.rot.sin_cos();
        let (px, py) = self.local(x, y);
        let du = c * dir.0 + s * dir.1;
        let dv = -s * dir.0 + c * dir.1;
        // Solve |(p + s·d) / axes|² = 1 for the entry root s ≤ 0.
        let qa = (du / self.a).powi(2) + (dv / self.b).powi(2);
        let qb = 2.0 * (px * du / (self.a * self.a) + py * dv / (self.b * self.b));
        let qc = (px / self.a).powi(2) + (py / self.b).powi(2) - 1.0;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let entry = (-qb - disc.sqrt()) / (2.0 * qa);
        (-entry).max(0.0)
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
            .collect()
    }
}

fn random_ellipse_in(rng: &mut ChaCha8Rng, body: &Ellipse, size: (f64, f64), min_axis: f64) -> Ellipse {
    let a = rng.random_range(size.0..size.1).max(min_axis);
    let b = rng.random_range(size.0..size.1).max(min_axis);
    // Centre drawn inside the inner half of the body.
    let r = 0.5 * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let (s, c) = body.rot.sin_cos();
    let (u, v) = (r * body.a * phi.cos(), r * body.b * phi.sin());
    Ellipse {
        cx: body.cx + c * u - s * v,
        cy: body.cy + s * u + c * v,
        a,
        b,
        rot: rng.random_range(0.0..PI),
    }
}

fn centre_pixel(e: &Ellipse, h: usize, w: usize) -> usize {
    let x = (e.cx.floor().max(0.0) as usize).min(w - 1);
    let y = (e.cy.floor().max(0.0) as usize).min(h - 1);
    y * w + x
}

/// Generates one phantom from `seed` with the default constants.
pub fn generate_phantom(seed: u64, h: usize, oars: usize, beams: usize) -> Result<PhantomSample, DataError> {
    generate_phantom_with(seed, h, oars, beams, &PhantomParams::default())
}

pub fn generate_phantom_with(
    seed: u64,
    h: usize,
    oar_count: usize,
    beam_count: usize,
    params: &PhantomParams,
) -> Result<PhantomSample, DataError> {
    if h < 16 {
        return Err(DataError::Invalid(format!("H = {h} is below the minimum of 16")));
    }
    if oar_count == 0 || beam_count == 0 {
        return Err(DataError::Invalid("need at least one OAR and one beam".into()));
    }
    if oar_count >= usize::from(PREDICTION_SENTINEL) || h > usize::from(u16::MAX) {
        return Err(DataError::Invalid("dimensions exceed the file format".into()));
    }
    let w = h;
    let hf = h as f64;
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert("generator_version".to_string(), GENERATOR_VERSION.to_string());

    let body = Ellipse {
        cx: hf / 2.0 + rng.random_range(-0.03..0.03) * hf,
        cy: hf / 2.0 + rng.random_range(-0.03..0.03) * hf,
        a: rng.random_range(0.38..0.46) * hf,
        b: rng.random_range(0.28..0.36) * hf,
        rot: rng.random_range(-0.15..0.15),
    };
    let body_mask = body.rasterize(h, w);

    // Smooth base from a few low-frequency waves plus fine noise.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) * 2.0 * PI / hf,
                rng.random_range(0.5..2.5) * 2.0 * PI / hf,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.08),
            )
        })
        .collect();
    let mut ct = vec![0f32; n];
    for (i, v) in ct.iter_mut().enumerate() {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let texture: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin()).sum();
        let noise = rng.random_range(-0.02..0.02);
        if body_mask[i] {
            *v = (0.5 + texture + noise).clamp(0.05, 1.0) as f32;
        }
    }

    let min_axis = 1.5;
    let inside = |m: &[bool]| m.iter().zip(&body_mask).all(|(&p, &b)| !p || b);
    let mut ptv_shape = random_ellipse_in(&mut rng, &body, (0.06 * hf, 0.10 * hf), min_axis);
    let mut ptv = ptv_shape.rasterize(h, w);
    let mut tries = 1;
    while !(inside(&ptv) && ptv.iter().any(|&p| p)) && tries < MAX_RETRIES {
        ptv_shape = random_ellipse_in(&mut rng, &body, (0.06 * hf, 0.10 * hf), min_axis);
        ptv = ptv_shape.rasterize(h, w);
        tries += 1;
    }
    for (p, &b) in ptv.iter_mut().zip(&body_mask) {
        *p &= b;
    }
    let c = centre_pixel(&ptv_shape, h, w);
    if body_mask[c] {
        ptv[c] = true;
    }

    let mut oar_masks = Vec::with_capacity(oar_count);
    for k in 0..oar_count {
        let mut accepted = None;
        let mut last = None;
        for _ in 0..MAX_RETRIES {
            let e = random_ellipse_in(&mut rng, &body, (0.05 * hf, 0.12 * hf), min_axis);
            let m = e.rasterize(h, w);
            let nonempty = m.iter().any(|&p| p);
            let disjoint = m.iter().zip(&ptv).all(|(&o, &p)| !(o && p));
            if nonempty && disjoint && inside(&m) {
                accepted = Some(m);
                break;
            }
            last = Some((e, m));
        }
        let mask = match accepted {
            Some(m) => m,
            None => {
                meta.insert(format!("oar{}_overlap", k + 1), "1".into());
                let (e, mut m) = last.expect("at least one attempt");
                for (o, &b) in m.iter_mut().zip(&body_mask) {
                    *o &= b;
                }
                let c = centre_pixel(&e, h, w);
                if body_mask[c] {
                    m[c] = true;
                }
                m
            }
        };
        oar_masks.push(mask);
    }

    // Beams aimed through the PTV centroid.
    let count = ptv.iter().filter(|&&p| p).count() as f64;
    let (mut gx, mut gy) = (0.0, 0.0);
    for (i, _) in ptv.iter().enumerate().filter(|(_, &p)| p) {
        gx += (i % w) as f64 + 0.5;
        gy += (i / w) as f64 + 0.5;
    }
    let (gx, gy) = (gx / count, gy / count);
    let spacing = 2.0 * PI / beam_count as f64;
    let angles: Vec<f64> = (0..beam_count)
        .map(|b| b as f64 * spacing + rng.random_range(-1.0..1.0) * params.angle_jitter * spacing)
        .collect();
    meta.insert(
        "beam_angles_deg".into(),
        angles.iter().map(|a| format!("{:.4}", a.to_degrees())).collect::<Vec<_>>().join(","),
    );
    let sigma = params.sigma_frac * hf;
    let mut dose = vec![0f64; n];
    for &theta in &angles {
        let dir = (theta.cos(), theta.sin());
        for (i, d) in dose.iter_mut().enumerate() {
            if !body_mask[i] {
                continue;
            }
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let lateral = -(x - gx) * dir.1 + (y - gy) * dir.0;
            let depth = body.depth(x, y, dir);
            *d += (-lateral * lateral / (2.0 * sigma * sigma)).exp() * (-params.mu * depth).exp();
        }
    }
    let ptv_mean = dose.iter().zip(&ptv).filter(|(_, &p)| p).map(|(d, _)| d).sum::<f64>() / count;
    if !(ptv_mean > 0.0) {
        return Err(DataError::Invalid("beam model delivered no dose to the PTV".into()));
    }
    let to_f32 = |m: &[bool]| m.iter().map(|&b| if b { 1.0f32 } else { 0.0 }).collect::<Vec<f32>>();
    Ok(PhantomSample {
        height: h,
        width: w,
        ct,
        ptv: to_f32(&ptv),
        oars: oar_masks.iter().map(|m| to_f32(m)).collect(),
        dose: dose.iter().map(|&d| (d / ptv_mean) as f32).collect(),
        meta,
    })
}

fn encode_meta(meta: &BTreeMap<String, String>) -> Result<String, DataError> {
    let mut s = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(DataError::Metadata(format!("entry `{k}` cannot be written as key=value")));
        }
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    Ok(s)
}

fn decode_meta(text: &str) -> Result<BTreeMap<String, String>, DataError> {
    text.lines()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| DataError::Metadata(format!("line `{line}` has no `=`")))
        })
        .collect()
}

fn encode(h: usize, w: usize, o: u16, channels: &[&[f32]], meta: &BTreeMap<String, String>) -> Result<Vec<u8>, DataError> {
    let dim = |v: usize| u16::try_from(v).map_err(|_| DataError::Invalid(format!("dimension {v} exceeds u16")));
    let meta = encode_meta(meta)?;
    let mut out = Vec::with_capacity(12 + 4 * h * w * channels.len() + 4 + meta.len());
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, dim(h)?, dim(w)?, o] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for ch in channels {
        assert_eq!(ch.len(), h * w, "channel length");
        for v in ch.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

struct Decoded {
    h: usize,
    w: usize,
    o: u16,
    channels: Vec<Vec<f32>>,
    meta: BTreeMap<String, String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            DataError::Truncated(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Decoded, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => return Err(DataError::Truncated("header".into())),
    };
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    r.pos = 4;
    let version = r.u16("header")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version { found: version });
    }
    let h = usize::from(r.u16("header")?);
    let w = usize::from(r.u16("header")?);
    let o = r.u16("header")?;
    let n_channels = if o == PREDICTION_SENTINEL { 1 } else { usize::from(o) + 3 };
    let mut channels = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let raw = r.take(4 * h * w, &format!("channel {c}"))?;
        channels.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    let len = u32::from_le_bytes(r.take(4, "metadata length")?.try_into().unwrap()) as usize;
    let text = std::str::from_utf8(r.take(len, "metadata")?).map_err(|e| DataError::Metadata(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(DataError::Metadata(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded {
        h,
        w,
        o,
        channels,
        meta: decode_meta(text)?,
    })
}

pub fn sample_to_bytes(s: &PhantomSample) -> Result<Vec<u8>, DataError> {
    let o = u16::try_from(s.oars.len())
        .ok()
        .filter(|&o| o != PREDICTION_SENTINEL)
        .ok_or_else(|| DataError::Invalid("too many OARs".into()))?;
    let mut channels: Vec<&[f32]> = vec![&s.ct, &s.ptv];
    channels.extend(s.oars.iter().map(Vec::as_slice));
    channels.push(&s.dose);
    encode(s.height, s.width, o, &channels, &s.meta)
}

pub fn sample_from_bytes(bytes: &[u8]) -> Result<PhantomSample, DataError> {
    let d = decode(bytes)?;
    if d.o == PREDICTION_SENTINEL {
        return Err(DataError::Kind { expected: "phantom sample" });
    }
    let mut ch = d.channels.into_iter();
    let ct = ch.next().unwrap();
    let ptv = ch.next().unwrap();
    let mut rest: Vec<Vec<f32>> = ch.collect();
    let dose = rest.pop().unwrap();
    Ok(PhantomSample {
        height: d.h,
        width: d.w,
        ct,
        ptv,
        oars: rest,
        dose,
        meta: d.meta,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(path, e))
}

pub fn write_sample(path: impl AsRef<Path>, s: &PhantomSample) -> Result<(), DataError> {
    write_atomic(path.as_ref(), &sample_to_bytes(s)?)
}

pub fn read_sample(path: impl AsRef<Path>) -> Result<PhantomSample, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    sample_from_bytes(&bytes)
}

/// A predicted dose map in prescription units.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseMap {
    pub height: usize,
    pub width: usize,
    pub dose: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

pub fn write_dose_map(path: impl AsRef<Path>, d: &DoseMap) -> Result<(), DataError> {
    let bytes = encode(d.height, d.width, PREDICTION_SENTINEL, &[&d.dose], &d.meta)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_dose_map(path: impl AsRef<Path>) -> Result<DoseMap, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let d = decode(&bytes)?;
    if d.o != PREDICTION_SENTINEL {
        return Err(DataError::Kind { expected: "dose map" });
    }
    Ok(DoseMap {
        height: d.h,
        width: d.w,
        dose: d.channels.into_iter().next().unwrap(),
        meta: d.meta,
    })
}

/// `d → d / 1.25 · 2 − 1`, clamped to `[−1, 1]`. The flag reports clamping.
pub fn normalize_dose(d: f64) -> (f64, bool) {
    let v = d / D_MAX_SCALE * 2.0 - 1.0;
    (v.clamp(-1.0, 1.0), !(-1.0..=1.0).contains(&v))
}

pub fn denormalize_dose(v: f64) -> f64 {
    (v + 1.0) / 2.0 * D_MAX_SCALE
}

/// Model-ready tensors for a set of cases.
pub struct NormalizedBatch {
    /// `[2+O, H, W]` per case.
    pub conditions: Vec<Tensor>,
    /// `[1, H, W]` per case, in `[−1, 1]`.
    pub doses: Vec<Tensor>,
    /// Voxels whose dose exceeded the normalization range and were clamped.
    pub clamped: usize,
}

pub fn normalize_batch(samples: &[PhantomSample]) -> Result<NormalizedBatch, DataError> {
    let Some(first) = samples.first() else {
        return Ok(NormalizedBatch {
            conditions: Vec::new(),
            doses: Vec::new(),
            clamped: 0,
        });
    };
    let mut out = NormalizedBatch {
        conditions: Vec::with_capacity(samples.len()),
        doses: Vec::with_capacity(samples.len()),
        clamped: 0,
    };
    for s in samples {
        if (s.height, s.width, s.oars.len()) != (first.height, first.width, first.oars.len()) {
            return Err(DataError::Invalid(format!(
                "mixed batch: {}×{} with {} OARs vs {}×{} with {}",
                s.height,
                s.width,
                s.oars.len(),
                first.height,
                first.width,
                first.oars.len()
            )));
        }
        out.conditions.push(s.condition());
        let dose = s
            .dose
            .iter()
            .map(|&d| {
                let (v, clamped) = normalize_dose(f64::from(d));
                out.clamped += usize::from(clamped);
                v
            })
            .collect();
        out.doses.push(Tensor::new([1, s.height, s.width], dose));
    }
    Ok(out)
}

/// Default train/val/test proportions 220/20/80.
pub const DEFAULT_SPLIT: [u32; 3] = [220, 20, 80];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Shuffles ids `0..n` with `seed` and cuts them by `ratios`
    /// (validation and test counts rounded, train takes the rest).
    pub fn new(n: usize, ratios: [u32; 3], seed: u64) -> Result<Self, DataError> {
        let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
        if total == 0 {
            return Err(DataError::Invalid("split ratios sum to zero".into()));
        }
        let share = |r: u32| ((n as u64 * u64::from(r)) as f64 / total as f64).round() as usize;
        let test = share(ratios[2]).min(n);
        let val = share(ratios[1]).min(n - test);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test_ids = ids.split_off(n - test);
        let val_ids = ids.split_off(n - test - val);
        let sort = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        Ok(Self {
            seed,
            train: sort(ids),
            val: sort(val_ids),
            test: sort(test_ids),
        })
    }
}

/// Per-case generator seed derived from the dataset seed.
pub fn case_seed(global: u64, id: usize) -> u64 {
    let mut z = global ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn case_file_name(id: usize) -> String {
    format!("case_{id:04}.spdp")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PhantomSample {
        generate_phantom(11, 16, 3, 5).unwrap()
    }

    #[test]
    fn ptv_mean_is_one_prescription_unit() {
        for seed in 0..10 {
            let s = generate_phantom(seed, 32, 3, 5).unwrap();
            let ptv = s.ptv_mask();
            let n = ptv.iter().filter(|&&p| p).count() as f64;
            let mean: f64 = s.dose.iter().zip(&ptv).filter(|(_, &p)| p).map(|(&d, _)| f64::from(d)).sum::<f64>() / n;
            assert!((mean - 1.0).abs() < 1e-6, "seed {seed}: {mean}");
        }
    }

    #[test]
    fn same_seed_same_sample() {
        assert_eq!(sample(), sample());
        assert_ne!(sample(), generate_phantom(12, 16, 3, 5).unwrap());
    }

    #[test]
    fn geometry_is_consistent() {
        for seed in 0..20 {
            let s = generate_phantom(seed, 16, 3, 5).unwrap();
            let body = s.body_mask();
            for (i, &b) in body.iter().enumerate() {
                if !b {
                    assert_eq!(s.dose[i], 0.0);
                    assert_eq!(s.ptv[i], 0.0);
                }
                assert!((0.0..=1.0).contains(&s.ct[i]));
            }
            for m in s.oars.iter().chain([&s.ptv]) {
                assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
                assert!(m.iter().any(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn no_attenuation_single_beam_is_flat_along_axis() {
        let params = PhantomParams {
            mu: 0.0,
            angle_jitter: 0.0,
            ..PhantomParams::default()
        };
        // Angle 0: the beam travels along +x, so the lateral offset is y − gy.
        let s = generate_phantom_with(4, 32, 2, 1, &params).unwrap();
        let body = s.body_mask();
        for row in 0..32 {
            let vals: Vec<f32> = (0..32).filter(|&x| body[row * 32 + x]).map(|x| s.dose[row * 32 + x]).collect();
            if let Some(&first) = vals.first() {
                assert!(vals.iter().all(|&v| v == first), "row {row}: {vals:?}");
            }
        }
    }

    #[test]
    fn ptv_receives_more_than_oars() {
        for seed in 0..20 {
            let s = generate_phantom(seed, 32, 3, 5).unwrap();
            let mean = |m: &[bool]| {
                let n = m.iter().filter(|&&b| b).count() as f64;
                s.dose.iter().zip(m).filter(|(_, &b)| b).map(|(&d, _)| f64::from(d)).sum::<f64>() / n
            };
            let ptv = mean(&s.ptv_mask());
            for k in 0..3 {
                assert!(ptv > mean(&s.oar_mask(k)), "seed {seed} oar {k}");
            }
        }
    }

    #[test]
    fn file_roundtrip_is_bitwise() {
        let s = sample();
        let bytes = sample_to_bytes(&s).unwrap();
        assert_eq!(sample_from_bytes(&bytes).unwrap(), s);
        assert_eq!(&bytes[..4], b"SPDP");
        // O = 3 → CT, PTV, 3 OARs, dose
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]) as usize + 3, 6);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let bytes = sample_to_bytes(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(sample_from_bytes(&bad), Err(DataError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(sample_from_bytes(&bad), Err(DataError::Version { found: 9 })));
        assert!(matches!(sample_from_bytes(&bytes[..100]), Err(DataError::Truncated(_))));
        assert!(matches!(sample_from_bytes(&bytes[..2]), Err(DataError::Truncated(_))));
    }

    #[test]
    fn dose_map_files_are_distinct_from_samples() {
        let d = DoseMap {
            height: 2,
            width: 2,
            dose: vec![0.0, 0.5, 1.0, 1.25],
            meta: BTreeMap::from([("case".to_string(), "3".to_string())]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.spdp");
        write_dose_map(&p, &d).unwrap();
        assert_eq!(read_dose_map(&p).unwrap(), d);
        assert!(matches!(read_sample(&p), Err(DataError::Kind { .. })));
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_dose(0.0), (-1.0, false));
        assert_eq!(normalize_dose(1.25), (1.0, false));
        assert_eq!(normalize_dose(1.5), (1.0, true));
        for d in [0.0, 0.1, 0.7, 1.0, 1.2] {
            assert!((denormalize_dose(normalize_dose(d).0) - d).abs() < 1e-15);
        }
    }

    #[test]
    fn condition_channel_order() {
        let s = sample();
        let c = s.condition();
        assert_eq!(c.shape(), [5, 16, 16]);
        assert_eq!(c.data()[256 * 1 + 100], f64::from(s.ptv[100]));
        assert_eq!(c.data()[256 * 4 + 37], f64::from(s.oars[2][37]));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let s = DatasetSplit::new(320, DEFAULT_SPLIT, 5).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (220, 20, 80));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..320).collect::<Vec<_>>());
    }

    #[test]
    fn small_images_are_rejected() {
        assert!(matches!(generate_phantom(0, 8, 3, 5), Err(DataError::Invalid(_))));
    }
}
