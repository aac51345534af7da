// Raw loops behind the differentiable ops. All buffers are row-major.

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output indices `lo..hi` whose input index `o·stride + off − pad`
    /// lands inside `0..len`.
    #[inline]
    fn span(&self, off: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(off).div_ceil(s);
        let hi = if len + self.pad > off {
            ((len + self.pad - off - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Valid (input row, output row) pairs for kernel offset `ky`.
    #[inline]
    fn rows(&self, ky: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (lo, hi) = self.span(ky, self.h, self.oh);
        (lo..hi).map(move |oy| (oy * self.stride + ky - self.pad, oy))
    }

    /// Valid output columns for kernel offset `kx` and the first input column.
    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize, usize) {
        let (lo, hi) = self.span(kx, self.w, self.ow);
        (lo, hi, (lo * self.stride + kx).saturating_sub(self.pad))
    }
}

/// Cross-correlation with zero padding.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * ohw;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * hw;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wt[(co * g.cin + ci) * kk + ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi, ix0) = g.cols(kx);
                        if lo == hi {
                            continue;
                        }
                        for (iy, oy) in g.rows(ky) {
                            let orow = &mut out[obase + oy * g.ow + lo..obase + oy * g.ow + hi];
                            let xrow = &x[xbase + iy * g.w + ix0..xbase + (iy + 1) * g.w];
                            if g.stride == 1 {
                                for (o, xv) in orow.iter_mut().zip(&xrow[..hi - lo]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (o, xv) in orow.iter_mut().zip(xrow.iter().step_by(g.stride)) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (hw, ohw, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    if let Some(dx) = dx {
        for n in 0..g.n {
            for co in 0..g.cout {
                let obase = (n * g.cout + co) * ohw;
                for ci in 0..g.cin {
                    let xbase = (n * g.cin + ci) * hw;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wt[(co * g.cin + ci) * kk + ky * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi, ix0) = g.cols(kx);
                            if lo == hi {
                                continue;
                            }
                            for (iy, oy) in g.rows(ky) {
                                let drow = &dout[obase + oy * g.ow + lo..obase + oy * g.ow + hi];
                                let xrow = &mut dx[xbase + iy * g.w + ix0..xbase + (iy + 1) * g.w];
                                if g.stride == 1 {
                                    for (xv, d) in xrow[..hi - lo].iter_mut().zip(drow) {
                                        *xv += wv * d;
                                    }
                                } else {
                                    for (xv, d) in xrow.iter_mut().step_by(g.stride).zip(drow) {
                                        *xv += wv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for n in 0..g.n {
            for co in 0..g.cout {
                let obase = (n * g.cout + co) * ohw;
                for ci in 0..g.cin {
                    let xbase = (n * g.cin + ci) * hw;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let (lo, hi, ix0) = g.cols(kx);
                            if lo == hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for (iy, oy) in g.rows(ky) {
                                let drow = &dout[obase + oy * g.ow + lo..obase + oy * g.ow + hi];
                                let xrow = &x[xbase + iy * g.w + ix0..xbase + (iy + 1) * g.w];
                                for (xv, d) in xrow.iter().step_by(g.stride).zip(drow) {
                                    acc += xv * d;
                                }
                            }
                            dw[(co * g.cin + ci) * kk + ky * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, x·Φ(x).
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·c should equal Σ_i a[i,p] c[i,j]
        let mut d = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut d, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((d[p * n + j] - want).abs() < 1e-12);
            }
        }
        let mut e = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut e, m, n, k);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((e[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_indexing() {
        let mut seed = 1u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for k in 1..=4 {
            for stride in 1..=3 {
                for pad in 0..=3 {
                    for (h, w) in [(1, 1), (3, 5), (6, 4), (7, 7)] {
                        if h + 2 * pad < k || w + 2 * pad < k {
                            continue;
                        }
                        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
                        let g = ConvGeom { n: 1, cin: 2, h, w, cout: 2, k, stride, pad, oh, ow };
                        let x: Vec<f64> = (0..2 * h * w).map(|_| next()).collect();
                        let wt: Vec<f64> = (0..4 * k * k).map(|_| next()).collect();
                        let dout: Vec<f64> = (0..2 * oh * ow).map(|_| next()).collect();
                        let mut out = vec![0.0; 2 * oh * ow];
                        conv2d_forward(&g, &x, &wt, &mut out);
                        let mut dx = vec![0.0; x.len()];
                        let mut dw = vec![0.0; wt.len()];
                        conv2d_backward(&g, &x, &wt, &dout, Some(&mut dx), Some(&mut dw));

                        let mut want = vec![0.0; out.len()];
                        let mut want_dx = vec![0.0; x.len()];
                        let mut want_dw = vec![0.0; wt.len()];
                        for co in 0..2 {
                            for ci in 0..2 {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wi = (co * 2 + ci) * k * k + ky * k + kx;
                                        for oy in 0..oh {
                                            for ox in 0..ow {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                    continue;
                                                }
                                                let xi = ci * h * w + iy as usize * w + ix as usize;
                                                let oi = co * oh * ow + oy * ow + ox;
                                                want[oi] += wt[wi] * x[xi];
                                                want_dx[xi] += wt[wi] * dout[oi];
                                                want_dw[wi] += x[xi] * dout[oi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
                        assert!(close(&out, &want), "forward k{k} s{stride} p{pad} {h}x{w}");
                        assert!(close(&dx, &want_dx), "dx k{k} s{stride} p{pad} {h}x{w}");
                        assert!(close(&dw, &want_dw), "dw k{k} s{stride} p{pad} {h}x{w}");
                    }
                }
            }
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }
}
