use std::rc::Rc;

use rand::Rng;

use super::{dims3, init_layer_norm, init_linear, map_to_tokens, param, tokens_to_map, Init, LinearParams, ModelError, NormParams};
use crate::optim::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Hidden width of the Swin MLP relative to the channel count.
pub const MLP_RATIO: usize = 4;

fn check_window(op: &str, h: usize, w: usize, win: usize) -> Result<(), ModelError> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(ModelError::Shape(format!(
            "{op}: window {win} does not divide {h}x{w}"
        )));
    }
    Ok(())
}

/// `[C, H, W] → [nW, C, w, w]`, windows in row-major order.
pub fn window_partition(x: &Tensor, win: usize) -> crate::Result<Tensor> {
    let [c, h, w] = dims3(x)?;
    check_window("window_partition", h, w, win)?;
    let (ny, nx) = (h / win, w / win);
    let mut idx = Vec::with_capacity(x.numel());
    for wy in 0..ny {
        for wx in 0..nx {
            for ch in 0..c {
                for iy in 0..win {
                    for ix in 0..win {
                        idx.push((ch * h + wy * win + iy) * w + wx * win + ix);
                    }
                }
            }
        }
    }
    Ok(x.gather(vec![ny * nx, c, win, win], idx.into())?)
}

/// Inverse of [`window_partition`] for an `h × w` map.
pub fn window_merge(windows: &Tensor, h: usize, w: usize) -> crate::Result<Tensor> {
    let s = windows.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(ModelError::Shape(format!("window_merge: expected [nW, C, w, w], got {s:?}")).into());
    }
    let (c, win) = (s[1], s[2]);
    check_window("window_merge", h, w, win)?;
    let nx = w / win;
    if s[0] != (h / win) * nx {
        return Err(ModelError::Shape(format!("window_merge: {} windows cannot tile {h}x{w}", s[0])).into());
    }
    let mut idx = Vec::with_capacity(windows.numel());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let wi = (y / win) * nx + x / win;
                idx.push(((wi * c + ch) * win + y % win) * win + x % win);
            }
        }
    }
    Ok(windows.gather(vec![c, h, w], idx.into())?)
}

/// Toroidal roll of a `[C, H, W]` map: `out[y, x] = in[(y − dy) mod H, (x − dx) mod W]`.
pub fn cyclic_shift(x: &Tensor, dy: isize, dx: isize) -> crate::Result<Tensor> {
    dims3(x)?;
    Ok(x.roll2d(dy, dx)?)
}

fn token_window_index(h: usize, w: usize, c: usize, win: usize) -> Vec<usize> {
    let (ny, nx) = (h / win, w / win);
    let mut idx = Vec::with_capacity(h * w * c);
    for wy in 0..ny {
        for wx in 0..nx {
            for iy in 0..win {
                for ix in 0..win {
                    let p = (wy * win + iy) * w + wx * win + ix;
                    idx.extend(p * c..(p + 1) * c);
                }
            }
        }
    }
    idx
}

/// `[H·W, C]` tokens → `[nW, w·w, C]`.
pub fn partition_tokens(tokens: &Tensor, h: usize, w: usize, win: usize) -> crate::Result<Tensor> {
    check_window("partition_tokens", h, w, win)?;
    let c = tokens.shape()[1];
    let idx = token_window_index(h, w, c, win);
    Ok(tokens.gather(vec![(h / win) * (w / win), win * win, c], idx.into())?)
}

/// Inverse of [`partition_tokens`].
pub fn merge_tokens(windows: &Tensor, h: usize, w: usize, win: usize) -> crate::Result<Tensor> {
    check_window("merge_tokens", h, w, win)?;
    let c = windows.shape()[2];
    let fwd = token_window_index(h, w, c, win);
    let mut inv = vec![0usize; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    Ok(windows.gather(vec![h * w, c], inv.into())?)
}

/// Spatial roll of `[H·W, C]` tokens, same convention as [`cyclic_shift`].
pub fn roll_tokens(tokens: &Tensor, h: usize, w: usize, dy: isize, dx: isize) -> crate::Result<Tensor> {
    let c = tokens.shape()[1];
    let mut idx = Vec::with_capacity(tokens.numel());
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            let p = sy * w + sx;
            idx.extend(p * c..(p + 1) * c);
        }
    }
    let idx: Rc<[usize]> = idx.into();
    Ok(tokens.gather(tokens.shape().to_vec(), idx)?)
}

/// Multi-head self-attention projections. `d_k = channels / heads`.
#[derive(Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub out: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        init: Init,
    ) -> crate::Result<()> {
        for name in ["wq", "wk", "wv"] {
            store.insert(
                format!("{prefix}.{name}"),
                vec![channels, channels],
                init.sample(channels * channels, rng),
            )?;
        }
        init_linear(store, rng, &format!("{prefix}.out"), channels, channels, init)
    }

    pub fn bind(p: &BoundParams, prefix: &str, heads: usize) -> crate::Result<Self> {
        let a = Self {
            wq: param(p, &format!("{prefix}.wq"))?,
            wk: param(p, &format!("{prefix}.wk"))?,
            wv: param(p, &format!("{prefix}.wv"))?,
            out: LinearParams::bind(p, &format!("{prefix}.out"))?,
            heads,
        };
        let c = a.channels();
        if heads == 0 || c % heads != 0 {
            return Err(ModelError::InvalidConfig(format!("{heads} heads do not divide {c} channels")).into());
        }
        Ok(a)
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// `[nW, n, C] → [nW·heads, n, d_k]`
fn split_heads(x: &Tensor, heads: usize) -> crate::Result<Tensor> {
    let &[nw, n, c] = x.shape() else { unreachable!() };
    if heads == 1 {
        return Ok(x.clone());
    }
    let dk = c / heads;
    Ok(x.reshape([nw, n, heads, dk])?
        .permute(&[0, 2, 1, 3])?
        .reshape([nw * heads, n, dk])?)
}

fn join_heads(x: &Tensor, nw: usize, heads: usize) -> crate::Result<Tensor> {
    if heads == 1 {
        return Ok(x.clone());
    }
    let &[_, n, dk] = x.shape() else { unreachable!() };
    Ok(x.reshape([nw, heads, n, dk])?
        .permute(&[0, 2, 1, 3])?
        .reshape([nw, n, heads * dk])?)
}

/// Self-attention inside each window, returning the output and the
/// attention maps `[nW·heads, n, n]`.
pub fn window_attention_with_weights(windows: &Tensor, p: &AttentionParams) -> crate::Result<(Tensor, Tensor)> {
    let s = windows.shape();
    if s.len() != 3 || s[2] != p.channels() {
        return Err(ModelError::Shape(format!(
            "window_attention: windows {s:?} vs {} channels",
            p.channels()
        ))
        .into());
    }
    let nw = s[0];
    let q = split_heads(&windows.matmul(&p.wq)?, p.heads)?;
    let k = split_heads(&windows.matmul(&p.wk)?, p.heads)?;
    let v = split_heads(&windows.matmul(&p.wv)?, p.heads)?;
    let scale = 1.0 / (p.head_dim() as f64).sqrt();
    let logits = q.bmm(&k.permute(&[0, 2, 1])?)?.scale(scale);
    let weights = logits.softmax(2)?;
    let h = join_heads(&weights.bmm(&v)?, nw, p.heads)?;
    Ok((p.out.forward(&h)?, weights))
}

/// `[nW, n, C] → [nW, n, C]`.
pub fn window_attention(windows: &Tensor, p: &AttentionParams) -> crate::Result<Tensor> {
    Ok(window_attention_with_weights(windows, p)?.0)
}

/// One Swin transformer block: pre-norm windowed attention and a ReLU MLP,
/// each on a residual branch.
#[derive(Clone)]
pub struct SwinBlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    /// Projection of the time embedding to a per-channel bias.
    pub time: Option<LinearParams>,
    pub window: usize,
    pub shift: bool,
}

impl SwinBlockParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        time_dim: Option<usize>,
        init: Init,
    ) -> crate::Result<()> {
        init_layer_norm(store, &format!("{prefix}.norm1"), channels)?;
        AttentionParams::init(store, rng, &format!("{prefix}.attn"), channels, init)?;
        init_layer_norm(store, &format!("{prefix}.norm2"), channels)?;
        let hidden = channels * MLP_RATIO;
        init_linear(store, rng, &format!("{prefix}.fc1"), channels, hidden, init)?;
        init_linear(store, rng, &format!("{prefix}.fc2"), hidden, channels, init)?;
        if let Some(td) = time_dim {
            init_linear(store, rng, &format!("{prefix}.time"), td, channels, init)?;
        }
        Ok(())
    }

    pub fn bind(
        p: &BoundParams,
        prefix: &str,
        heads: usize,
        window: usize,
        shift: bool,
        with_time: bool,
    ) -> crate::Result<Self> {
        Ok(Self {
            norm1: NormParams::bind(p, &format!("{prefix}.norm1"))?,
            attn: AttentionParams::bind(p, &format!("{prefix}.attn"), heads)?,
            norm2: NormParams::bind(p, &format!("{prefix}.norm2"))?,
            fc1: LinearParams::bind(p, &format!("{prefix}.fc1"))?,
            fc2: LinearParams::bind(p, &format!("{prefix}.fc2"))?,
            time: with_time
                .then(|| LinearParams::bind(p, &format!("{prefix}.time")))
                .transpose()?,
            window,
            shift,
        })
    }

    /// Window size actually used on an `h × w` map (clipped to the map side).
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window.min(h).min(w)
    }
}

/// [`swin_block`] on `[H·W, C]` tokens.
pub fn swin_block_tokens(
    x: &Tensor,
    h: usize,
    w: usize,
    p: &SwinBlockParams,
    t_emb: Option<&Tensor>,
) -> crate::Result<Tensor> {
    let win = p.effective_window(h, w);
    check_window("swin_block", h, w, win)?;
    let mut u = p.norm1.forward(x)?;
    match (&p.time, t_emb) {
        (Some(proj), Some(e)) => {
            let bias = proj.forward(e)?;
            u = u.add(&bias.reshape([bias.numel()])?)?;
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(ModelError::Shape("swin_block: time projection present but no embedding given".into()).into())
        }
        (None, Some(_)) => {
            return Err(ModelError::Shape("swin_block: embedding given to a block without time projection".into()).into())
        }
    }
    let shift = if p.shift && win < h.max(w) { (win / 2) as isize } else { 0 };
    if shift != 0 {
        u = roll_tokens(&u, h, w, -shift, -shift)?;
    }
    let windows = partition_tokens(&u, h, w, win)?;
    let attended = window_attention(&windows, &p.attn)?;
    let mut a = merge_tokens(&attended, h, w, win)?;
    if shift != 0 {
        a = roll_tokens(&a, h, w, shift, shift)?;
    }
    let x = x.add(&a)?;
    let m = p.fc2.forward(&p.fc1.forward(&p.norm2.forward(&x)?)?.relu())?;
    Ok(x.add(&m)?)
}

/// One Swin block on a `[C, H, W]` map; output has the input's shape.
pub fn swin_block(x: &Tensor, p: &SwinBlockParams, t_emb: Option<&Tensor>) -> crate::Result<Tensor> {
    let [_, h, w] = dims3(x)?;
    let tokens = swin_block_tokens(&map_to_tokens(x)?, h, w, p, t_emb)?;
    tokens_to_map(&tokens, h, w)
}

/// Queries from the structural map, keys and values from the noise branch.
/// Single head; inner width equals the noise-branch channel count so the
/// result can be added back onto it.
#[derive(Clone)]
pub struct CrossAttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl CrossAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        struct_channels: usize,
        noise_channels: usize,
        init: Init,
    ) -> crate::Result<()> {
        let (a, b) = (struct_channels, noise_channels);
        store.insert(format!("{prefix}.wq"), vec![a, b], init.sample(a * b, rng))?;
        store.insert(format!("{prefix}.wk"), vec![b, b], init.sample(b * b, rng))?;
        store.insert(format!("{prefix}.wv"), vec![b, b], init.sample(b * b, rng))?;
        Ok(())
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            wq: param(p, &format!("{prefix}.wq"))?,
            wk: param(p, &format!("{prefix}.wk"))?,
            wv: param(p, &format!("{prefix}.wv"))?,
        })
    }
}

/// Token-level cross-attention: returns `B + softmax(Q_A K_Bᵀ/√d) V_B` and the weights `[N, N]`.
pub fn cross_attention_tokens(a: &Tensor, b: &Tensor, p: &CrossAttentionParams) -> crate::Result<(Tensor, Tensor)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(ModelError::Shape(format!("cross_attention: token sets {sa:?} and {sb:?} differ")).into());
    }
    if p.wq.shape()[0] != sa[1] || p.wk.shape()[0] != sb[1] {
        return Err(ModelError::Shape(format!(
            "cross_attention: channels {} / {} vs projections {:?} / {:?}",
            sa[1],
            sb[1],
            p.wq.shape(),
            p.wk.shape()
        ))
        .into());
    }
    let q = a.matmul(&p.wq)?;
    let k = b.matmul(&p.wk)?;
    let v = b.matmul(&p.wv)?;
    let d = k.shape()[1] as f64;
    let weights = q.matmul(&k.permute(&[1, 0])?)?.scale(1.0 / d.sqrt()).softmax(1)?;
    let out = weights.matmul(&v)?;
    Ok((b.add(&out)?, weights))
}

/// Fuses a structural map `A: [C_a, H, W]` into a noise map `B: [C_b, H, W]`.
pub fn cross_attention_fuse(a: &Tensor, b: &Tensor, p: &CrossAttentionParams) -> crate::Result<Tensor> {
    let [_, ha, wa] = dims3(a)?;
    let [_, hb, wb] = dims3(b)?;
    if (ha, wa) != (hb, wb) {
        return Err(ModelError::Shape(format!(
            "cross_attention_fuse: spatial {ha}x{wa} vs {hb}x{wb}"
        ))
        .into());
    }
    let (fused, _) = cross_attention_tokens(&map_to_tokens(a)?, &map_to_tokens(b)?, p)?;
    tokens_to_map(&fused, hb, wb)
}

/// Bottleneck MLP with GELU, applied per location on a residual branch.
#[derive(Clone)]
pub struct ProjectorParams {
    pub down: LinearParams,
    pub up: LinearParams,
}

impl ProjectorParams {
    /// `up` is zero-initialized so a fresh projector is the identity.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        ratio: usize,
        init: Init,
    ) -> crate::Result<()> {
        let hidden = projector_hidden(channels, ratio)?;
        init_linear(store, rng, &format!("{prefix}.down"), channels, hidden, init)?;
        init_linear(store, rng, &format!("{prefix}.up"), hidden, channels, Init::Zeros)
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            down: LinearParams::bind(p, &format!("{prefix}.down"))?,
            up: LinearParams::bind(p, &format!("{prefix}.up"))?,
        })
    }
}

pub fn projector_hidden(channels: usize, ratio: usize) -> Result<usize, ModelError> {
    if ratio == 0 || channels % ratio != 0 || channels < ratio {
        return Err(ModelError::InvalidConfig(format!(
            "projector ratio {ratio} does not divide {channels} channels"
        )));
    }
    Ok(channels / ratio)
}

/// `F + MLP_up(GELU(MLP_down(F)))` on `[N, C]` tokens.
pub fn projector_tokens(f: &Tensor, p: &ProjectorParams) -> crate::Result<Tensor> {
    let branch = p.up.forward(&p.down.forward(f)?.gelu())?;
    Ok(f.add(&branch)?)
}

/// Projector on a `[C, H, W]` map.
pub fn projector_forward(f: &Tensor, p: &ProjectorParams) -> crate::Result<Tensor> {
    let [c, h, w] = dims3(f)?;
    if p.down.w.shape()[0] != c {
        return Err(ModelError::Shape(format!(
            "projector: {c} channels vs weights {:?}",
            p.down.w.shape()
        ))
        .into());
    }
    tokens_to_map(&projector_tokens(&map_to_tokens(f)?, p)?, h, w)
}

/// Sinusoidal timestep embedding: `dim/2` sines followed by `dim/2` cosines
/// at geometrically spaced frequencies `10000^(-k/(dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor, ModelError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::InvalidConfig(format!("time embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let t = t as f64;
    let mut v: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    v.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(Tensor::new([dim], v))
}
