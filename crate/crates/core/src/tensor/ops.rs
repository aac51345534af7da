use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{shape_err, Result, Tensor};

/// Recorded operation with whatever the backward pass needs beyond the
/// input and output values.
pub(crate) enum Op {
    /// `rhs` is either the same shape as `lhs` or a trailing suffix of it.
    Add { rhs_len: usize },
    Sub,
    Mul,
    Scale(f64),
    MatMul { m: usize, k: usize, n: usize, batch: usize },
    Bmm { b: usize, m: usize, k: usize, n: usize },
    Conv2d { geom: ConvGeom, has_bias: bool },
    Gather(Rc<[usize]>),
    Reshape,
    Concat { outer: usize, chunks: Vec<usize> },
    Softmax { outer: usize, len: usize, inner: usize },
    Relu,
    Gelu,
    LayerNorm { cols: usize, mean: Vec<f64>, rstd: Vec<f64> },
    ChannelBias { outer: usize, c: usize, inner: usize },
    Sum,
    Mean,
    Mse,
}

type Grads = Vec<Option<Vec<f64>>>;

impl Op {
    pub(crate) fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &[f64]) -> Grads {
        let want = |i: usize| inputs[i].requires_grad();
        match self {
            Op::Add { rhs_len } => {
                let rhs = want(1).then(|| {
                    let mut acc = vec![0.0; *rhs_len];
                    for chunk in g.chunks(*rhs_len) {
                        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
                vec![want(0).then(|| g.to_vec()), rhs]
            }
            Op::Sub => vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| g.iter().map(|v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    want(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    want(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::MatMul { m, k, n, batch } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let (m, k, n) = (*m, *k, *n);
                let da = want(0).then(|| {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        kernels::gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(a, g, &mut db, batch * m, k, n);
                    db
                });
                vec![da, db]
            }
            Op::Bmm { b: bs, m, k, n } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let (m, k, n) = (*m, *k, *n);
                let da = want(0).then(|| {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..*bs {
                        kernels::gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &b[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..*bs {
                        kernels::gemm_tn(
                            &a[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    db
                });
                vec![da, db]
            }
            Op::Conv2d { geom, has_bias } => {
                let (x, w) = (inputs[0].data(), inputs[1].data());
                let mut dx = want(0).then(|| vec![0.0; x.len()]);
                let mut dw = want(1).then(|| vec![0.0; w.len()]);
                kernels::conv2d_backward(geom, x, w, g, dx.as_deref_mut(), dw.as_deref_mut());
                let mut grads = vec![dx, dw];
                if *has_bias {
                    let db = want(2).then(|| {
                        let ohw = geom.oh * geom.ow;
                        let mut db = vec![0.0; geom.cout];
                        for (i, chunk) in g.chunks(ohw).enumerate() {
                            db[i % geom.cout] += chunk.iter().sum::<f64>();
                        }
                        db
                    });
                    grads.push(db);
                }
                grads
            }
            Op::Gather(idx) => {
                let mut dx = vec![0.0; inputs[0].numel()];
                for (gv, &src) in g.iter().zip(idx.iter()) {
                    dx[src] += gv;
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Concat { outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                chunks
                    .iter()
                    .enumerate()
                    .map(|(i, &len)| {
                        let grad = want(i).then(|| {
                            let mut d = Vec::with_capacity(outer * len);
                            for o in 0..*outer {
                                let start = o * total + offset;
                                d.extend_from_slice(&g[start..start + len]);
                            }
                            d
                        });
                        offset += len;
                        grad
                    })
                    .collect()
            }
            Op::Softmax { outer, len, inner } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Relu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Gelu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect(),
                )]
            }
            Op::LayerNorm { cols, mean, rstd } => {
                let (x, gamma) = (inputs[0].data(), inputs[1].data());
                let c = *cols;
                let mut dx = want(0).then(|| vec![0.0; x.len()]);
                let mut dgamma = want(1).then(|| vec![0.0; c]);
                let mut dbeta = want(2).then(|| vec![0.0; c]);
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..mean.len() {
                    let row = &x[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = grow[j] * gamma[j];
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        for j in 0..c {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }
            Op::ChannelBias { outer, c, inner } => {
                let db = want(1).then(|| {
                    let mut db = vec![0.0; *c];
                    for o in 0..*outer {
                        for ch in 0..*c {
                            let base = (o * c + ch) * inner;
                            db[ch] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    db
                });
                vec![want(0).then(|| g.to_vec()), db]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::Mse => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let s = 2.0 * g[0] / a.len() as f64;
                let da: Vec<f64> = a.iter().zip(b).map(|(a, b)| s * (a - b)).collect();
                let db = want(1).then(|| da.iter().map(|v| -v).collect());
                vec![want(0).then_some(da), db]
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Index maps for the permutation-style ops, exposed so callers can build
/// their own gathers (window tiling, rolls).
pub mod index {
    use super::strides;

    pub fn permute(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let src_strides = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n: usize = shape.iter().product();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; axes.len()];
        for _ in 0..n {
            idx.push(
                counter
                    .iter()
                    .zip(axes)
                    .map(|(&c, &a)| c * src_strides[a])
                    .sum(),
            );
            for d in (0..axes.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        (out_shape, idx)
    }

    /// Toroidal roll of the last two axes: out[.., y, x] = in[.., (y - dy) mod H, (x - dx) mod W].
    pub fn roll2d(shape: &[usize], dy: isize, dx: isize) -> Vec<usize> {
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let outer: usize = shape[..nd - 2].iter().product();
        let mut idx = Vec::with_capacity(outer * h * w);
        for o in 0..outer {
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                    idx.push(o * h * w + sy * w + sx);
                }
            }
        }
        idx
    }

    /// Nearest-neighbour upsampling of the last two axes by integer factors.
    pub fn upsample(shape: &[usize], fy: usize, fx: usize) -> (Vec<usize>, Vec<usize>) {
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let (oh, ow) = (h * fy, w * fx);
        let outer: usize = shape[..nd - 2].iter().product();
        let mut idx = Vec::with_capacity(outer * oh * ow);
        for o in 0..outer {
            for y in 0..oh {
                for x in 0..ow {
                    idx.push(o * h * w + (y / fy) * w + x / fx);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        (out_shape, idx)
    }
}

impl Tensor {
    /// Elementwise sum. `other` may also be a trailing suffix of `self`'s
    /// shape (e.g. a `[C]` bias added to every row of `[N, C]`).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let suffix = b.len() <= a.len() && a[a.len() - b.len()..] == *b;
        if !suffix {
            return Err(shape_err("add", format!("{a:?} vs {b:?}")));
        }
        let rhs = other.data();
        let data = self
            .data()
            .chunks(rhs.len())
            .flat_map(|chunk| chunk.iter().zip(rhs).map(|(x, y)| x + y))
            .collect();
        Ok(Tensor::from_op(
            a.to_vec(),
            data,
            Op::Add { rhs_len: rhs.len() },
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(c), vec![self.clone()])
    }

    /// `[.., m, k] × [k, n] → [.., m, n]`, the right operand shared across the leading axes.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() < 2 || b.len() != 2 || a[a.len() - 1] != b[0] {
            return Err(shape_err("matmul", format!("{a:?} × {b:?}")));
        }
        let (m, k, n) = (a[a.len() - 2], b[0], b[1]);
        let batch: usize = a[..a.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        kernels::gemm_nn(self.data(), rhs.data(), &mut out, batch * m, k, n);
        let mut shape = a.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MatMul { m, k, n, batch },
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// Batched product `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(shape_err("bmm", format!("{a:?} × {b:?}")));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        let mut out = vec![0.0; bs * m * n];
        let (x, y) = (self.data(), rhs.data());
        for i in 0..bs {
            kernels::gemm_nn(
                &x[i * m * k..(i + 1) * m * k],
                &y[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(Tensor::from_op(
            vec![bs, m, n],
            out,
            Op::Bmm { b: bs, m, k, n },
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[C, H, W]` or `[N, C, H, W]`, `weight` is `[Cout, C, k, k]`,
    /// `bias` (optional) is `[Cout]`. Output keeps the input's rank.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        let (n, cin, h, w) = match *xs {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be 3-D or 4-D, got {xs:?}"))),
        };
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(shape_err(
                "conv2d",
                format!("weight {ws:?} incompatible with input channels {cin}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} does not match {cout} output channels", b.shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; n * cout * ohw];
        if let Some(b) = bias {
            for (i, chunk) in out.chunks_mut(ohw).enumerate() {
                chunk.fill(b.data()[i % cout]);
            }
        }
        kernels::conv2d_forward(&geom, self.data(), weight.data(), &mut out);
        let shape = if xs.len() == 3 {
            vec![cout, geom.oh, geom.ow]
        } else {
            vec![n, cout, geom.oh, geom.ow]
        };
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
        ))
    }

    /// `out[i] = self[idx[i]]` (flat indices). Differentiable; repeated
    /// indices accumulate in the backward pass.
    pub fn gather(&self, out_shape: Vec<usize>, idx: Rc<[usize]>) -> Result<Tensor> {
        if out_shape.iter().product::<usize>() != idx.len() {
            return Err(shape_err(
                "gather",
                format!("{} indices for output shape {out_shape:?}", idx.len()),
            ));
        }
        let src = self.data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(out_shape, data, Op::Gather(idx), vec![self.clone()]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} → {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        let valid = axes.len() == nd
            && axes.iter().all(|&a| a < nd && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(shape_err(
                "permute",
                format!("axes {axes:?} for shape {:?}", self.shape()),
            ));
        }
        let (shape, idx) = index::permute(self.shape(), axes);
        self.gather(shape, idx.into())
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(out_shape, idx.into())
    }

    /// Toroidal roll over the last two axes by `(dy, dx)`.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Result<Tensor> {
        if self.shape().len() < 2 {
            return Err(shape_err("roll2d", format!("need ≥2 axes, got {:?}", self.shape())));
        }
        let idx = index::roll2d(self.shape(), dy, dx);
        self.gather(self.shape().to_vec(), idx.into())
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest(&self, fy: usize, fx: usize) -> Result<Tensor> {
        if self.shape().len() < 2 || fy == 0 || fx == 0 {
            return Err(shape_err(
                "upsample",
                format!("factors ({fy},{fx}) for {:?}", self.shape()),
            ));
        }
        let (shape, idx) = index::upsample(self.shape(), fy, fx);
        self.gather(shape, idx.into())
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?
            .shape();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&chunks) {
                data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total / inner;
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Concat { outer, chunks },
            parts.to_vec(),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            y,
            Op::Softmax { outer, len, inner },
            vec![self.clone()],
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu, vec![self.clone()])
    }

    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| kernels::gelu(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu, vec![self.clone()])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both `[C]`).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = *self.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for last axis {c}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let x = self.data();
        let rows = x.len() / c;
        let (gm, bt) = (gamma.data(), beta.data());
        let mut y = vec![0.0; x.len()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                y[r * c + j] = (row[j] - mu) * rs * gm[j] + bt[j];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            Op::LayerNorm { cols: c, mean, rstd },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` in a `[.., C, H, W]` map.
    pub fn channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 3 || bias.shape() != [s[s.len() - 3]] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {:?} for map {s:?}", bias.shape()),
            ));
        }
        let c = s[s.len() - 3];
        let inner = s[s.len() - 2] * s[s.len() - 1];
        let outer = self.numel() / (c * inner);
        let b = bias.data();
        let data = self
            .data()
            .chunks(inner)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let bv = b[i % c];
                chunk.iter().map(move |v| v + bv)
            })
            .collect();
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            Op::ChannelBias { outer, c, inner },
            vec![self.clone(), bias.clone()],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::from_op(vec![1], vec![s], Op::Mean, vec![self.clone()])
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, target)?;
        let n = self.numel() as f64;
        let s = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            Op::Mse,
            vec![self.clone(), target.clone()],
        ))
    }
}
