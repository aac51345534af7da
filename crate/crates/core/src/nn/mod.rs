//! Neural building blocks shared by the structure encoder and the denoiser.
//!
//! Parameters live in a [`ParamStore`] under dotted paths; each block has an
//! `init_*` function that registers its parameters under a prefix and a
//! matching `bind` that pulls the leaf tensors for one forward pass.

mod attention;
mod init;

pub use attention::*;
pub use init::{trunc_normal, Init};

use crate::optim::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0}")]
    Shape(String),
}

pub(crate) fn param(p: &BoundParams, name: &str) -> Result<Tensor, ModelError> {
    p.get(name)
        .cloned()
        .ok_or_else(|| ModelError::MissingParam(name.to_owned()))
}

/// `[.., in] × [in, out] + [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    Ok(x.matmul(w)?.add(b)?)
}

/// `[C, H, W] → [H·W, C]`, pixels in row-major order.
pub fn map_to_tokens(x: &Tensor) -> crate::Result<Tensor> {
    let [c, h, w] = dims3(x)?;
    Ok(x.reshape([c, h * w])?.permute(&[1, 0])?)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> crate::Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(ModelError::Shape(format!("tokens {s:?} do not tile a {h}x{w} map")).into());
    }
    Ok(tokens.permute(&[1, 0])?.reshape([s[1], h, w])?)
}

pub(crate) fn dims3(x: &Tensor) -> Result<[usize; 3], ModelError> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(ModelError::Shape(format!("expected a [C, H, W] feature map, got {s:?}"))),
    }
}

/// Registers a dense layer `{prefix}.w: [inp, out]`, `{prefix}.b: [out]`.
pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl rand::Rng,
    prefix: &str,
    inp: usize,
    out: usize,
    init: Init,
) -> crate::Result<()> {
    store.insert(format!("{prefix}.w"), vec![inp, out], init.sample(inp * out, rng))?;
    store.insert(format!("{prefix}.b"), vec![out], vec![0.0; out])?;
    Ok(())
}

/// Registers a convolution `{prefix}.w: [out, inp, k, k]`, `{prefix}.b: [out]`.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl rand::Rng,
    prefix: &str,
    inp: usize,
    out: usize,
    k: usize,
    init: Init,
) -> crate::Result<()> {
    store.insert(format!("{prefix}.w"), vec![out, inp, k, k], init.sample(out * inp * k * k, rng))?;
    store.insert(format!("{prefix}.b"), vec![out], vec![0.0; out])?;
    Ok(())
}

/// Registers layer-norm affine parameters (`gamma = 1`, `beta = 0`).
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, c: usize) -> crate::Result<()> {
    store.insert(format!("{prefix}.g"), vec![c], vec![1.0; c])?;
    store.insert(format!("{prefix}.b"), vec![c], vec![0.0; c])?;
    Ok(())
}

#[derive(Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            w: param(p, &format!("{prefix}.w"))?,
            b: param(p, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> crate::Result<Tensor> {
        linear(x, &self.w, &self.b)
    }
}

#[derive(Clone)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            w: param(p, &format!("{prefix}.w"))?,
            b: param(p, &format!("{prefix}.b"))?,
        })
    }

    /// Square kernel, padding `k / 2`.
    pub fn forward(&self, x: &Tensor, stride: usize) -> crate::Result<Tensor> {
        let k = self.w.shape()[2];
        Ok(x.conv2d(&self.w, Some(&self.b), stride, k / 2)?)
    }
}

#[derive(Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl NormParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            gamma: param(p, &format!("{prefix}.g"))?,
            beta: param(p, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> crate::Result<Tensor> {
        Ok(x.layer_norm(&self.gamma, &self.beta, LN_EPS)?)
    }
}
