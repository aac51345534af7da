//! Structure encoder and denoising network.
//!
//! Both branches share one channel plan: a 3×3 stem at full resolution, one
//! convolutional stage and four Swin stages, each ending in a stride-2
//! residual downsampling block. The structure encoder turns the anatomy
//! stack `[CT, PTV, OAR_1..O]` into per-stage features `f_1..f_5`; the
//! denoiser fuses them into its own encoder after every stage, passes
//! through two middle Swin blocks and decodes with upsampling blocks and
//! skip connections back to a one-channel noise estimate.
//!
//! Parameter paths:
//!
//! ```text
//! enc.stem                      structure-encoder stem conv
//! enc.s1.conv{j}.{a,b,time}     conv blocks of stage 1
//! enc.s{i}.swin{j}.*            Swin blocks of stage i = 2..5
//! enc.s{i}.down.{main,skip}     downsampling block closing stage i
//! den.time.{fc1,fc2}            time-embedding MLP
//! den.stem, den.enc.s{i}.*      denoiser encoder (same layout as enc.*)
//! fuse.s{i}.xattn.{wq,wk,wv}    cross-attention fusion at stage i
//! fuse.s{i}.proj.{down,up}      projector after fusion at stage i
//! den.mid.swin{0,1}             middle blocks
//! den.dec.s{i}.{up,merge,...}   decoder level mirroring stage i
//! den.head                      output conv (zero-initialized)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffusion::NoisePredictor;
use crate::nn::{
    self, cross_attention_tokens, init_conv, init_linear, map_to_tokens, projector_hidden, projector_tokens,
    swin_block_tokens, time_embedding, tokens_to_map, ConvParams, CrossAttentionParams, Init, LinearParams,
    ProjectorParams, SwinBlockParams,
};
pub use crate::nn::ModelError;
use crate::optim::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const STAGES: usize = 5;

/// How structural features enter the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    /// Anatomy channels concatenated to the noisy dose at the input; no
    /// structure encoder and no per-stage fusion.
    Concatenate,
    /// Element-wise addition at every stage.
    AddAll,
    /// Cross-attention at every stage.
    AttnAll,
    /// Cross-attention at the last `k` (lowest-resolution) stages, addition
    /// elsewhere. `AttnLast(0)` behaves as `AddAll`, `AttnLast(5)` as `AttnAll`.
    AttnLast(usize),
}

impl FusionStrategy {
    /// Whether stage `i ∈ [1, 5]` fuses with cross-attention.
    pub fn uses_attention(self, stage: usize) -> bool {
        match self {
            FusionStrategy::Concatenate | FusionStrategy::AddAll => false,
            FusionStrategy::AttnAll => true,
            FusionStrategy::AttnLast(k) => stage + k > STAGES,
        }
    }

    pub fn uses_structure_encoder(self) -> bool {
        self != FusionStrategy::Concatenate
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionStrategy::Concatenate => f.write_str("concatenate"),
            FusionStrategy::AddAll => f.write_str("add-all"),
            FusionStrategy::AttnAll => f.write_str("attn-all"),
            FusionStrategy::AttnLast(k) => write!(f, "attn-last{k}"),
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "concatenate" => Ok(FusionStrategy::Concatenate),
            "add-all" => Ok(FusionStrategy::AddAll),
            "attn-all" => Ok(FusionStrategy::AttnAll),
            _ => {
                let k = s
                    .strip_prefix("attn-last")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| ModelError::InvalidConfig(format!("unknown fusion strategy `{s}`")))?;
                if k > STAGES {
                    return Err(ModelError::InvalidConfig(format!("attn-last{k}: at most {STAGES} stages")));
                }
                Ok(FusionStrategy::AttnLast(k))
            }
        }
    }
}

impl Serialize for FusionStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FusionStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub oar_count: usize,
    pub base_channels: usize,
    pub channel_multipliers: [usize; STAGES],
    pub window_size: usize,
    pub heads: usize,
    pub projector_ratio: usize,
    pub use_projector: bool,
    /// Conv or Swin blocks per stage (and per decoder level).
    pub blocks_per_stage: usize,
    pub fusion: FusionStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            oar_count: 3,
            base_channels: 8,
            channel_multipliers: [1, 2, 4, 8, 8],
            window_size: 4,
            heads: 4,
            projector_ratio: 4,
            use_projector: true,
            blocks_per_stage: 3,
            fusion: FusionStrategy::AttnLast(2),
        }
    }
}

impl ModelConfig {
    /// Full-resolution setting: 256×256 slices, 32 base channels.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 256,
            base_channels: 32,
            window_size: 8,
            ..Self::default()
        }
    }

    /// `[C, H, W]` of the anatomy stack.
    pub fn condition_channels(&self) -> usize {
        2 + self.oar_count
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Side lengths `s_0..s_5`: `s_0 = H`, then halved per stage, never below 1.
    pub fn stage_sides(&self) -> [usize; STAGES + 1] {
        let mut s = [self.image_size; STAGES + 1];
        for i in 1..=STAGES {
            s[i] = s[i - 1].div_ceil(2);
        }
        s
    }

    /// Channel widths `c_0..c_5`: `c_0 = C`, `c_i = C · m_i`.
    pub fn stage_channels(&self) -> [usize; STAGES + 1] {
        let mut c = [self.base_channels; STAGES + 1];
        for i in 1..=STAGES {
            c[i] = self.base_channels * self.channel_multipliers[i - 1];
        }
        c
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.image_size < 2 {
            return bad(format!("image size {} too small", self.image_size));
        }
        let sides = self.stage_sides();
        for i in 0..STAGES {
            if sides[i] > 1 && sides[i] % 2 != 0 {
                return bad(format!(
                    "image size {} cannot be halved exactly five times (side {} at stage {})",
                    self.image_size,
                    sides[i],
                    i + 1
                ));
            }
        }
        if self.oar_count == 0 {
            return bad("at least one OAR is required".into());
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be positive".into());
        }
        if self.window_size == 0 {
            return bad("window size must be positive".into());
        }
        let chans = self.stage_channels();
        // Swin blocks run at sides s_1..s_5 with widths c_1..c_5.
        for i in 1..=STAGES {
            let (s, c) = (sides[i], chans[i]);
            let win = self.window_size.min(s);
            if s % win != 0 {
                return bad(format!("window {win} does not divide side {s}"));
            }
            if self.heads == 0 || c % self.heads != 0 {
                return bad(format!("{} heads do not divide {c} channels", self.heads));
            }
            if self.use_projector && self.fusion.uses_structure_encoder() {
                projector_hidden(c, self.projector_ratio)?;
            }
        }
        if let FusionStrategy::AttnLast(k) = self.fusion {
            if k > STAGES {
                return bad(format!("attn-last{k}: at most {STAGES} stages"));
            }
        }
        Ok(())
    }
}

/// Per-stage structural features `f_1..f_5` (empty in concatenate mode)
/// together with the raw anatomy stack they came from.
#[derive(Clone)]
pub struct ConditionStack {
    pub y: Tensor,
    pub features: Vec<Tensor>,
}

/// Coarse grouping of parameters by network part.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("enc.") {
        "structure-encoder"
    } else if name.starts_with("fuse.") {
        "fusion-projector"
    } else if name.starts_with("den.time.") {
        "time-embedding"
    } else if name.starts_with("den.mid.") {
        "middle"
    } else if name.starts_with("den.dec.") || name.starts_with("den.head.") {
        "decoder"
    } else {
        "denoiser-encoder"
    }
}

fn init_conv_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
    time_dim: Option<usize>,
) -> crate::Result<()> {
    init_conv(store, rng, &format!("{prefix}.a"), c, c, 3, Init::DEFAULT)?;
    init_conv(store, rng, &format!("{prefix}.b"), c, c, 3, Init::DEFAULT)?;
    if let Some(td) = time_dim {
        init_linear(store, rng, &format!("{prefix}.time"), td, c, Init::DEFAULT)?;
    }
    Ok(())
}

fn init_down(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cin: usize, cout: usize) -> crate::Result<()> {
    init_conv(store, rng, &format!("{prefix}.main"), cin, cout, 3, Init::DEFAULT)?;
    init_conv(store, rng, &format!("{prefix}.skip"), cin, cout, 1, Init::DEFAULT)
}

/// Registers the five-stage encoder under `prefix` (`enc` or `den.enc`).
fn init_encoder(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    prefix: &str,
    time_dim: Option<usize>,
) -> crate::Result<()> {
    let ch = cfg.stage_channels();
    for j in 0..cfg.blocks_per_stage {
        init_conv_block(store, rng, &format!("{prefix}.s1.conv{j}"), ch[0], time_dim)?;
    }
    init_down(store, rng, &format!("{prefix}.s1.down"), ch[0], ch[1])?;
    for i in 2..=STAGES {
        for j in 0..cfg.blocks_per_stage {
            SwinBlockParams::init(store, rng, &format!("{prefix}.s{i}.swin{j}"), ch[i - 1], time_dim, Init::DEFAULT)?;
        }
        init_down(store, rng, &format!("{prefix}.s{i}.down"), ch[i - 1], ch[i])?;
    }
    Ok(())
}

/// Creates every parameter for `cfg`. Biases start at zero, weights from a
/// truncated normal (std 0.02); the output head and projector up-projections
/// start at zero.
pub fn build_model(cfg: &ModelConfig, rng: &mut impl Rng) -> crate::Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let ch = cfg.stage_channels();
    let td = cfg.time_dim();

    if cfg.fusion.uses_structure_encoder() {
        init_conv(&mut store, rng, "enc.stem", cfg.condition_channels(), ch[0], 3, Init::DEFAULT)?;
        init_encoder(&mut store, rng, cfg, "enc", None)?;
    }

    init_linear(&mut store, rng, "den.time.fc1", td, td, Init::DEFAULT)?;
    init_linear(&mut store, rng, "den.time.fc2", td, td, Init::DEFAULT)?;
    let den_in = match cfg.fusion {
        FusionStrategy::Concatenate => 1 + cfg.condition_channels(),
        _ => 1,
    };
    init_conv(&mut store, rng, "den.stem", den_in, ch[0], 3, Init::DEFAULT)?;
    init_encoder(&mut store, rng, cfg, "den.enc", Some(td))?;

    if cfg.fusion.uses_structure_encoder() {
        for i in 1..=STAGES {
            if cfg.fusion.uses_attention(i) {
                CrossAttentionParams::init(&mut store, rng, &format!("fuse.s{i}.xattn"), ch[i], ch[i], Init::DEFAULT)?;
            }
            if cfg.use_projector {
                ProjectorParams::init(&mut store, rng, &format!("fuse.s{i}.proj"), ch[i], cfg.projector_ratio, Init::DEFAULT)?;
            }
        }
    }

    for j in 0..2 {
        SwinBlockParams::init(&mut store, rng, &format!("den.mid.swin{j}"), ch[STAGES], Some(td), Init::DEFAULT)?;
    }

    for i in (1..=STAGES).rev() {
        let p = format!("den.dec.s{i}");
        init_conv(&mut store, rng, &format!("{p}.up"), ch[i], ch[i - 1], 3, Init::DEFAULT)?;
        init_conv(&mut store, rng, &format!("{p}.merge"), 2 * ch[i - 1], ch[i - 1], 1, Init::DEFAULT)?;
        for j in 0..cfg.blocks_per_stage {
            if i == 1 {
                init_conv_block(&mut store, rng, &format!("{p}.conv{j}"), ch[0], Some(td))?;
            } else {
                SwinBlockParams::init(&mut store, rng, &format!("{p}.swin{j}"), ch[i - 1], Some(td), Init::DEFAULT)?;
            }
        }
    }
    init_conv(&mut store, rng, "den.head", ch[0], 1, 3, Init::Zeros)?;
    Ok(store)
}

struct ConvBlock {
    a: ConvParams,
    b: ConvParams,
    time: Option<LinearParams>,
}

impl ConvBlock {
    fn bind(p: &BoundParams, prefix: &str, with_time: bool) -> crate::Result<Self> {
        Ok(Self {
            a: ConvParams::bind(p, &format!("{prefix}.a"))?,
            b: ConvParams::bind(p, &format!("{prefix}.b"))?,
            time: with_time
                .then(|| LinearParams::bind(p, &format!("{prefix}.time")))
                .transpose()?,
        })
    }

    /// `x + conv_b(gelu(conv_a(x) + time_bias))`
    fn forward(&self, x: &Tensor, t_emb: Option<&Tensor>) -> crate::Result<Tensor> {
        let mut h = self.a.forward(x, 1)?;
        if let (Some(proj), Some(e)) = (&self.time, t_emb) {
            let bias = proj.forward(e)?;
            h = h.channel_bias(&bias.reshape([bias.numel()])?)?;
        }
        let h = self.b.forward(&h.gelu(), 1)?;
        Ok(x.add(&h)?)
    }
}

struct DownBlock {
    main: ConvParams,
    skip: ConvParams,
}

impl DownBlock {
    fn bind(p: &BoundParams, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            main: ConvParams::bind(p, &format!("{prefix}.main"))?,
            skip: ConvParams::bind(p, &format!("{prefix}.skip"))?,
        })
    }

    /// `skip_1x1/2(x) + gelu(conv_3x3/2(x))`
    fn forward(&self, x: &Tensor) -> crate::Result<Tensor> {
        let main = self.main.forward(x, 2)?.gelu();
        Ok(self.skip.forward(x, 2)?.add(&main)?)
    }
}

enum StageBlocks {
    Conv(Vec<ConvBlock>),
    Swin(Vec<SwinBlockParams>),
}

impl StageBlocks {
    fn forward(&self, x: &Tensor, t_emb: Option<&Tensor>) -> crate::Result<Tensor> {
        match self {
            StageBlocks::Conv(blocks) => blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h, t_emb)),
            StageBlocks::Swin(blocks) => {
                let [_, h, w] = nn::dims3(x)?;
                let mut tok = map_to_tokens(x)?;
                for b in blocks {
                    tok = swin_block_tokens(&tok, h, w, b, t_emb)?;
                }
                tokens_to_map(&tok, h, w)
            }
        }
    }
}

fn bind_stage_blocks(
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    conv: bool,
    with_time: bool,
) -> crate::Result<StageBlocks> {
    let n = cfg.blocks_per_stage;
    Ok(if conv {
        StageBlocks::Conv(
            (0..n)
                .map(|j| ConvBlock::bind(p, &format!("{prefix}.conv{j}"), with_time))
                .collect::<crate::Result<_>>()?,
        )
    } else {
        StageBlocks::Swin(
            (0..n)
                .map(|j| SwinBlockParams::bind(p, &format!("{prefix}.swin{j}"), cfg.heads, cfg.window_size, j % 2 == 1, with_time))
                .collect::<crate::Result<_>>()?,
        )
    })
}

struct Stage {
    blocks: StageBlocks,
    down: DownBlock,
}

struct Encoder {
    stem: ConvParams,
    stages: Vec<Stage>,
}

impl Encoder {
    fn bind(p: &BoundParams, cfg: &ModelConfig, prefix: &str, stem: &str, with_time: bool) -> crate::Result<Self> {
        let stages = (1..=STAGES)
            .map(|i| {
                Ok(Stage {
                    blocks: bind_stage_blocks(p, cfg, &format!("{prefix}.s{i}"), i == 1, with_time)?,
                    down: DownBlock::bind(p, &format!("{prefix}.s{i}.down"))?,
                })
            })
            .collect::<crate::Result<_>>()?;
        Ok(Self {
            stem: ConvParams::bind(p, stem)?,
            stages,
        })
    }
}

struct Fusion {
    xattn: Option<CrossAttentionParams>,
    proj: Option<ProjectorParams>,
}

struct DecoderLevel {
    up: ConvParams,
    merge: ConvParams,
    blocks: StageBlocks,
}

/// Bound parameters of both branches, ready for forward passes.
pub struct DoseNet {
    cfg: ModelConfig,
    encoder: Option<Encoder>,
    time_fc1: LinearParams,
    time_fc2: LinearParams,
    den: Encoder,
    fusion: Vec<Fusion>,
    middle: Vec<SwinBlockParams>,
    /// Levels 5 down to 1.
    decoder: Vec<DecoderLevel>,
    head: ConvParams,
}

impl DoseNet {
    /// Binds `store` for one forward/backward pass. With `track`, gradients
    /// flow to every parameter.
    pub fn new(cfg: &ModelConfig, store: &ParamStore, track: bool) -> crate::Result<Self> {
        Self::from_bound(cfg, &store.bind(track))
    }

    /// Builds the network over caller-supplied leaves, e.g. perturbed copies
    /// of the parameters in a finite-difference check.
    pub fn from_bound(cfg: &ModelConfig, p: &BoundParams) -> crate::Result<Self> {
        cfg.validate()?;
        let encoder = cfg
            .fusion
            .uses_structure_encoder()
            .then(|| Encoder::bind(p, cfg, "enc", "enc.stem", false))
            .transpose()?;
        let fusion = if cfg.fusion.uses_structure_encoder() {
            (1..=STAGES)
                .map(|i| {
                    Ok(Fusion {
                        xattn: cfg
                            .fusion
                            .uses_attention(i)
                            .then(|| CrossAttentionParams::bind(p, &format!("fuse.s{i}.xattn")))
                            .transpose()?,
                        proj: cfg
                            .use_projector
                            .then(|| ProjectorParams::bind(p, &format!("fuse.s{i}.proj")))
                            .transpose()?,
                    })
                })
                .collect::<crate::Result<_>>()?
        } else {
            Vec::new()
        };
        let middle = (0..2)
            .map(|j| SwinBlockParams::bind(p, &format!("den.mid.swin{j}"), cfg.heads, cfg.window_size, j == 1, true))
            .collect::<crate::Result<_>>()?;
        let decoder = (1..=STAGES)
            .rev()
            .map(|i| {
                let prefix = format!("den.dec.s{i}");
                Ok(DecoderLevel {
                    up: ConvParams::bind(p, &format!("{prefix}.up"))?,
                    merge: ConvParams::bind(p, &format!("{prefix}.merge"))?,
                    blocks: bind_stage_blocks(p, cfg, &prefix, i == 1, true)?,
                })
            })
            .collect::<crate::Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            time_fc1: LinearParams::bind(p, "den.time.fc1")?,
            time_fc2: LinearParams::bind(p, "den.time.fc2")?,
            den: Encoder::bind(p, cfg, "den.enc", "den.stem", true)?,
            fusion,
            middle,
            decoder,
            head: ConvParams::bind(p, "den.head")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_condition(&self, y: &Tensor) -> crate::Result<()> {
        let h = self.cfg.image_size;
        let want = [self.cfg.condition_channels(), h, h];
        if y.shape() != want {
            return Err(ModelError::Shape(format!(
                "condition tensor {:?}, expected {want:?}",
                y.shape()
            ))
            .into());
        }
        Ok(())
    }

    /// Runs the structure encoder. In concatenate mode only the raw stack is kept.
    pub fn encode_structure(&self, y: &Tensor) -> crate::Result<ConditionStack> {
        self.check_condition(y)?;
        let Some(enc) = &self.encoder else {
            return Ok(ConditionStack {
                y: y.clone(),
                features: Vec::new(),
            });
        };
        let mut h = enc.stem.forward(y, 1)?;
        let mut features = Vec::with_capacity(STAGES);
        for stage in &enc.stages {
            h = stage.down.forward(&stage.blocks.forward(&h, None)?)?;
            features.push(h.clone());
        }
        Ok(ConditionStack { y: y.clone(), features })
    }

    fn time_features(&self, t: usize) -> crate::Result<Tensor> {
        let e = time_embedding(t, self.cfg.time_dim())?.reshape([1, self.cfg.time_dim()])?;
        let e = self.time_fc2.forward(&self.time_fc1.forward(&e)?.gelu())?;
        Ok(e.gelu())
    }

    /// Noise estimate for `x_t: [1, H, W]`. With `cond = None` the fusion
    /// inputs are skipped (projectors still run), which is the pure
    /// denoiser path.
    pub fn denoise_forward(&self, x_t: &Tensor, t: usize, cond: Option<&ConditionStack>) -> crate::Result<Tensor> {
        let h = self.cfg.image_size;
        if x_t.shape() != [1, h, h] {
            return Err(ModelError::Shape(format!("noisy dose {:?}, expected [1, {h}, {h}]", x_t.shape())).into());
        }
        let t_emb = self.time_features(t)?;
        let temb = Some(&t_emb);

        let input = match self.cfg.fusion {
            FusionStrategy::Concatenate => {
                let cond = cond.ok_or_else(|| ModelError::Shape("concatenate mode requires the condition stack".into()))?;
                self.check_condition(&cond.y)?;
                Tensor::concat(&[x_t.clone(), cond.y.clone()], 0)?
            }
            _ => x_t.clone(),
        };
        if let Some(c) = cond {
            if self.cfg.fusion.uses_structure_encoder() && c.features.len() != STAGES {
                return Err(ModelError::Shape(format!(
                    "expected {STAGES} structural feature maps, got {}",
                    c.features.len()
                ))
                .into());
            }
        }

        let mut x = self.den.stem.forward(&input, 1)?;
        let mut skips = vec![x.clone()];
        for (i, stage) in self.den.stages.iter().enumerate() {
            x = stage.down.forward(&stage.blocks.forward(&x, temb)?)?;
            if let Some(fusion) = self.fusion.get(i) {
                x = self.fuse(i, fusion, x, cond)?;
            }
            if i + 1 < STAGES {
                skips.push(x.clone());
            }
        }

        let [_, s5h, s5w] = nn::dims3(&x)?;
        let mut tok = map_to_tokens(&x)?;
        for b in &self.middle {
            tok = swin_block_tokens(&tok, s5h, s5w, b, temb)?;
        }
        x = tokens_to_map(&tok, s5h, s5w)?;

        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let [_, sh, sw] = nn::dims3(&skip)?;
            let [_, xh, xw] = nn::dims3(&x)?;
            let up = x.upsample_nearest(sh / xh, sw / xw)?;
            x = level.up.forward(&up, 1)?;
            x = level.merge.forward(&Tensor::concat(&[x, skip], 0)?, 1)?;
            x = level.blocks.forward(&x, temb)?;
        }
        self.head.forward(&x, 1)
    }

    fn fuse(&self, i: usize, fusion: &Fusion, x: Tensor, cond: Option<&ConditionStack>) -> crate::Result<Tensor> {
        let [_, h, w] = nn::dims3(&x)?;
        let mut tok = map_to_tokens(&x)?;
        if let Some(c) = cond {
            let f = &c.features[i];
            if f.shape() != x.shape() {
                return Err(ModelError::Shape(format!(
                    "stage {} features {:?} vs denoiser {:?}",
                    i + 1,
                    f.shape(),
                    x.shape()
                ))
                .into());
            }
            let ftok = map_to_tokens(f)?;
            tok = match &fusion.xattn {
                Some(xa) => cross_attention_tokens(&ftok, &tok, xa)?.0,
                None => tok.add(&ftok)?,
            };
        }
        if let Some(proj) = &fusion.proj {
            tok = projector_tokens(&tok, proj)?;
        }
        tokens_to_map(&tok, h, w)
    }
}

impl NoisePredictor for DoseNet {
    type Features = ConditionStack;

    fn encode(&self, condition: &Tensor) -> crate::Result<ConditionStack> {
        self.encode_structure(condition)
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, features: &ConditionStack) -> crate::Result<Tensor> {
        self.denoise_forward(x_t, t, Some(features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(fusion: FusionStrategy) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            base_channels: 4,
            blocks_per_stage: 1,
            fusion,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in ["concatenate", "add-all", "attn-all", "attn-last0", "attn-last2", "attn-last5"] {
            assert_eq!(s.parse::<FusionStrategy>().unwrap().to_string(), s);
        }
        assert!("attn-last6".parse::<FusionStrategy>().is_err());
        assert!("mix".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn last_two_means_stages_four_and_five() {
        let s = FusionStrategy::AttnLast(2);
        let stages: Vec<bool> = (1..=5).map(|i| s.uses_attention(i)).collect();
        assert_eq!(stages, [false, false, false, true, true]);
    }

    #[test]
    fn full_resolution_stage_sides() {
        let cfg = ModelConfig::paper_scale();
        assert_eq!(cfg.stage_sides(), [256, 128, 64, 32, 16, 8]);
        cfg.validate().unwrap();
    }

    #[test]
    fn small_images_saturate_at_one_pixel() {
        assert_eq!(tiny(FusionStrategy::AddAll).stage_sides(), [16, 8, 4, 2, 1, 1]);
    }

    #[test]
    fn odd_sides_are_rejected() {
        let cfg = ModelConfig {
            image_size: 48,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn encoder_feature_sides_halve() {
        let cfg = ModelConfig {
            image_size: 64,
            base_channels: 4,
            blocks_per_stage: 1,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = build_model(&cfg, &mut rng).unwrap();
        let net = DoseNet::new(&cfg, &store, false).unwrap();
        let y = Tensor::zeros([5, 64, 64]);
        let stack = net.encode_structure(&y).unwrap();
        let sides: Vec<usize> = stack.features.iter().map(|f| f.shape()[1]).collect();
        assert_eq!(sides, [32, 16, 8, 4, 2]);
        let chans: Vec<usize> = stack.features.iter().map(|f| f.shape()[0]).collect();
        assert_eq!(chans, [4, 8, 16, 32, 32]);
    }

    #[test]
    fn wrong_condition_channels_are_rejected() {
        let cfg = tiny(FusionStrategy::AddAll);
        let store = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let net = DoseNet::new(&cfg, &store, false).unwrap();
        assert!(net.encode_structure(&Tensor::zeros([4, 16, 16])).is_err());
    }

    #[test]
    fn concatenate_has_no_structure_encoder() {
        let cfg = tiny(FusionStrategy::Concatenate);
        let store = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.names().all(|n| !n.starts_with("enc.") && !n.starts_with("fuse.")));
        assert_eq!(store.get("den.stem.w").unwrap().shape, vec![4, 6, 3, 3]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny(FusionStrategy::AttnAll);
        let a = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_groups() {
        assert_eq!(param_group("enc.s2.swin0.attn.wq"), "structure-encoder");
        assert_eq!(param_group("fuse.s4.proj.up.w"), "fusion-projector");
        assert_eq!(param_group("den.enc.s1.conv0.a.w"), "denoiser-encoder");
        assert_eq!(param_group("den.stem.w"), "denoiser-encoder");
        assert_eq!(param_group("den.mid.swin1.fc1.b"), "middle");
        assert_eq!(param_group("den.head.w"), "decoder");
        assert_eq!(param_group("den.time.fc1.w"), "time-embedding");
    }
}
