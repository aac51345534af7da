//! String-keyed op dispatch and the central-difference gradient oracle.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Bmm,
    Conv2d,
    UpsampleNearest,
    Reshape,
    Permute,
    Concat,
    Slice,
    Roll2d,
    Softmax,
    Relu,
    Gelu,
    LayerNorm,
    ChannelBias,
    Mean,
    Sum,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::MatMul,
        OpKind::Bmm,
        OpKind::Conv2d,
        OpKind::UpsampleNearest,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Roll2d,
        OpKind::Softmax,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::ChannelBias,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::MatMul => "matmul",
            OpKind::Bmm => "bmm",
            OpKind::Conv2d => "conv2d",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Roll2d => "roll2d",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ChannelBias => "channel_bias",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Mse => "mse",
        }
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

/// Key-value attributes for [`forward_op`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Attrs(BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn int(mut self, key: &str, v: i64) -> Self {
        self.0.insert(key.to_owned(), AttrValue::Int(v));
        self
    }

    pub fn float(mut self, key: &str, v: f64) -> Self {
        self.0.insert(key.to_owned(), AttrValue::Float(v));
        self
    }

    pub fn ints(mut self, key: &str, v: &[i64]) -> Self {
        self.0.insert(key.to_owned(), AttrValue::Ints(v.to_vec()));
        self
    }

    fn get_int(&self, op: &'static str, key: &str) -> Result<i64> {
        match self.0.get(key) {
            Some(AttrValue::Int(v)) => Ok(*v),
            _ => Err(TensorError::Attr {
                op,
                attr: key.to_owned(),
            }),
        }
    }

    fn get_usize(&self, op: &'static str, key: &str) -> Result<usize> {
        let v = self.get_int(op, key)?;
        usize::try_from(v).map_err(|_| TensorError::Attr {
            op,
            attr: key.to_owned(),
        })
    }

    fn get_float(&self, op: &'static str, key: &str) -> Result<f64> {
        match self.0.get(key) {
            Some(AttrValue::Float(v)) => Ok(*v),
            Some(AttrValue::Int(v)) => Ok(*v as f64),
            _ => Err(TensorError::Attr {
                op,
                attr: key.to_owned(),
            }),
        }
    }

    fn get_usizes(&self, op: &'static str, key: &str) -> Result<Vec<usize>> {
        let bad = || TensorError::Attr {
            op,
            attr: key.to_owned(),
        };
        match self.0.get(key) {
            Some(AttrValue::Ints(v)) => v.iter().map(|&x| usize::try_from(x).map_err(|_| bad())).collect(),
            _ => Err(bad()),
        }
    }
}

fn arity(kind: OpKind, inputs: &[Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(super::shape_err(
            kind.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

/// Applies `kind` to `inputs`.
///
/// Attributes: `conv2d` takes `stride`, `pad` (ints; a third input is the
/// bias); `scalar_mul` takes `c`; `reshape`/`permute` take `shape`/`axes`;
/// `concat`/`softmax` take `axis`; `slice` takes `axis`, `start`, `len`;
/// `roll2d` takes `dy`, `dx`; `upsample_nearest` takes `factor`;
/// `layer_norm` takes `eps`.
pub fn forward_op(kind: OpKind, inputs: &[Tensor], attrs: &Attrs) -> Result<Tensor> {
    let name = kind.name();
    match kind {
        OpKind::Add => {
            arity(kind, inputs, 2)?;
            inputs[0].add(&inputs[1])
        }
        OpKind::Sub => {
            arity(kind, inputs, 2)?;
            inputs[0].sub(&inputs[1])
        }
        OpKind::Mul => {
            arity(kind, inputs, 2)?;
            inputs[0].mul(&inputs[1])
        }
        OpKind::ScalarMul => {
            arity(kind, inputs, 1)?;
            Ok(inputs[0].scale(attrs.get_float(name, "c")?))
        }
        OpKind::MatMul => {
            arity(kind, inputs, 2)?;
            inputs[0].matmul(&inputs[1])
        }
        OpKind::Bmm => {
            arity(kind, inputs, 2)?;
            inputs[0].bmm(&inputs[1])
        }
        OpKind::Conv2d => {
            if !(2..=3).contains(&inputs.len()) {
                return Err(super::shape_err(
                    name,
                    format!("expected 2 or 3 inputs, got {}", inputs.len()),
                ));
            }
            inputs[0].conv2d(
                &inputs[1],
                inputs.get(2),
                attrs.get_usize(name, "stride")?,
                attrs.get_usize(name, "pad")?,
            )
        }
        OpKind::UpsampleNearest => {
            arity(kind, inputs, 1)?;
            let f = attrs.get_usize(name, "factor")?;
            inputs[0].upsample_nearest(f, f)
        }
        OpKind::Reshape => {
            arity(kind, inputs, 1)?;
            inputs[0].reshape(attrs.get_usizes(name, "shape")?)
        }
        OpKind::Permute => {
            arity(kind, inputs, 1)?;
            inputs[0].permute(&attrs.get_usizes(name, "axes")?)
        }
        OpKind::Concat => Tensor::concat(inputs, attrs.get_usize(name, "axis")?),
        OpKind::Slice => {
            arity(kind, inputs, 1)?;
            inputs[0].slice(
                attrs.get_usize(name, "axis")?,
                attrs.get_usize(name, "start")?,
                attrs.get_usize(name, "len")?,
            )
        }
        OpKind::Roll2d => {
            arity(kind, inputs, 1)?;
            inputs[0].roll2d(
                attrs.get_int(name, "dy")? as isize,
                attrs.get_int(name, "dx")? as isize,
            )
        }
        OpKind::Softmax => {
            arity(kind, inputs, 1)?;
            inputs[0].softmax(attrs.get_usize(name, "axis")?)
        }
        OpKind::Relu => {
            arity(kind, inputs, 1)?;
            Ok(inputs[0].relu())
        }
        OpKind::Gelu => {
            arity(kind, inputs, 1)?;
            Ok(inputs[0].gelu())
        }
        OpKind::LayerNorm => {
            arity(kind, inputs, 3)?;
            inputs[0].layer_norm(&inputs[1], &inputs[2], attrs.get_float(name, "eps")?)
        }
        OpKind::ChannelBias => {
            arity(kind, inputs, 2)?;
            inputs[0].channel_bias(&inputs[1])
        }
        OpKind::Mean => {
            arity(kind, inputs, 1)?;
            Ok(inputs[0].mean())
        }
        OpKind::Sum => {
            arity(kind, inputs, 1)?;
            Ok(inputs[0].sum())
        }
        OpKind::Mse => {
            arity(kind, inputs, 2)?;
            inputs[0].mse(&inputs[1])
        }
    }
}

/// Maximum relative disagreement between the analytic gradient and a
/// central difference with step `eps`, over every element of every input.
///
/// Non-scalar outputs are reduced to a scalar by a fixed pseudo-random
/// weighting so that every output element contributes.
pub fn finite_diff_check(kind: OpKind, point: &[Tensor], attrs: &Attrs, eps: f64) -> Result<f64> {
    let f = |xs: &[Tensor]| forward_op(kind, xs, attrs);
    gradient_check(f, point, eps, None)
}

/// Central-difference check of an arbitrary tensor function.
///
/// `coords`, when given, restricts the comparison to `(input, flat index)`
/// pairs; otherwise every element of every input is checked.
pub fn gradient_check<F>(f: F, point: &[Tensor], eps: f64, coords: Option<&[(usize, usize)]>) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let consts: Vec<Tensor> = point.iter().map(Tensor::detach).collect();
    let probe = f(&consts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let weights = Tensor::new(
        probe.shape().to_vec(),
        (0..probe.numel()).map(|_| rng.random_range(0.5..1.5)).collect(),
    );
    let objective = |xs: &[Tensor]| -> Result<Tensor> {
        let out = f(xs)?;
        Ok(out.mul(&weights)?.sum())
    };

    let vars: Vec<Tensor> = point
        .iter()
        .map(|t| Tensor::variable(t.shape().to_vec(), t.to_vec()))
        .collect();
    let root = objective(&vars)?;
    backward(&root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = point
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let eval_at = |input: usize, j: usize, delta: f64| -> Result<f64> {
        let mut xs = consts.clone();
        let mut data = xs[input].to_vec();
        data[j] += delta;
        xs[input] = Tensor::new(xs[input].shape().to_vec(), data);
        Ok(objective(&xs)?.item())
    };

    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        let numeric = (eval_at(i, j, eps)? - eval_at(i, j, -eps)?) / (2.0 * eps);
        let a = analytic[i][j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}
