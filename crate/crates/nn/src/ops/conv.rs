//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Samples of a batch are processed in parallel. Weight gradients are
//! accumulated over fixed groups of samples and folded in group order.

use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::par;
use crate::Tensor;

/// Samples per weight-gradient partial sum.
const GRAD_GROUP: usize = 4;

/// Geometry of a square-kernel convolution over one `channels × h × w` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        ConvGeom {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` (`channels × h × w`) into `col` (`channels·k·k × oh·ow`).
pub fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (k, s, p) = (g.k as isize, g.stride as isize, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c as isize * k + ky) * k + kx) as usize;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky - p;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` back into `x`.
pub fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let (k, s, p) = (g.k as isize, g.stride as isize, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c as isize * k + ky) * k + kx) as usize;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kx - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (o, b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(grad: &Tensor) -> Tensor {
    let (bsz, c, h, w) = grad.dims4();
    let plane = h * w;
    let mut out = vec![0.0; c];
    for b in 0..bsz {
        let gb = grad.sample(b);
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += gb[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[c], out)
}

/// Forward convolution of a batch. `w` is `o × c × k × k`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (bsz, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
    assert_eq!(k, k2);
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let per_out = o * g.col_cols();
    let mut out = vec![0.0; bsz * per_out];
    let wm = MatRef::new(w.data(), o, g.col_rows());
    par::for_each_chunk_mut(&mut out, per_out, |b, chunk| {
        let xb = x.sample(b);
        if g.is_pointwise() {
            gemm(wm, MatRef::new(xb, c, g.col_cols()), chunk, 0.0);
        } else {
            let mut col = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(&g, xb, &mut col);
            gemm(wm, MatRef::new(&col, g.col_rows(), g.col_cols()), chunk, 0.0);
        }
        if let Some(bias) = bias {
            add_channel_bias(chunk, bias.data(), g.col_cols());
        }
    });
    Tensor::from_vec(&[bsz, o, g.oh, g.ow], out)
}

fn conv2d_grad_input(grad: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let bsz = grad.shape()[0];
    let o = w.shape()[0];
    let per_in = g.channels * g.h * g.w;
    let mut dx = vec![0.0; bsz * per_in];
    let wm = MatRef::new(w.data(), o, g.col_rows());
    par::for_each_chunk_mut(&mut dx, per_in, |b, chunk| {
        let gb = MatRef::new(grad.sample(b), o, g.col_cols());
        if g.is_pointwise() {
            gemm(wm.t(), gb, chunk, 0.0);
        } else {
            let mut dcol = vec![0.0; g.col_rows() * g.col_cols()];
            gemm(wm.t(), gb, &mut dcol, 0.0);
            col2im(g, &dcol, chunk);
        }
    });
    Tensor::from_vec(&[bsz, g.channels, g.h, g.w], dx)
}

fn conv2d_grad_weight(grad: &Tensor, x: &Tensor, w_shape: &[usize], g: &ConvGeom) -> Tensor {
    let bsz = x.shape()[0];
    let o = w_shape[0];
    let len = o * g.col_rows();
    let groups = bsz.div_ceil(GRAD_GROUP);
    let dw = par::ordered_sum(groups, len, |gi| {
        let mut acc = vec![0.0; len];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; g.col_rows() * g.col_cols()]
        };
        for b in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(bsz) {
            let gb = MatRef::new(grad.sample(b), o, g.col_cols());
            let colm = if g.is_pointwise() {
                MatRef::new(x.sample(b), g.col_rows(), g.col_cols())
            } else {
                im2col(g, x.sample(b), &mut col);
                MatRef::new(&col, g.col_rows(), g.col_cols())
            };
            gemm(gb, colm.t(), &mut acc, 1.0);
        }
        acc
    });
    Tensor::from_vec(w_shape, dw)
}

/// Transposed convolution forward. `w` is `c_in × c_out × k × k`; output
/// size is `(h − 1)·stride − 2·pad + k + out_pad`.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let (bsz, cin, h, wd) = x.dims4();
    let (wcin, cout, k, _) = w.dims4();
    assert_eq!(
        cin, wcin,
        "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
    );
    let g = transpose_geom(cout, h, wd, k, stride, pad, out_pad);
    let per_out = cout * g.h * g.w;
    let mut out = vec![0.0; bsz * per_out];
    let wm = MatRef::new(w.data(), cin, g.col_rows());
    par::for_each_chunk_mut(&mut out, per_out, |b, chunk| {
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        gemm(wm.t(), MatRef::new(x.sample(b), cin, h * wd), &mut col, 0.0);
        col2im(&g, &col, chunk);
        if let Some(bias) = bias {
            add_channel_bias(chunk, bias.data(), g.h * g.w);
        }
    });
    Tensor::from_vec(&[bsz, cout, g.h, g.w], out)
}

/// Geometry of the forward convolution whose adjoint a transposed
/// convolution computes: it maps the `c_out × oh × ow` output back to `h × w`.
fn transpose_geom(cout: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> ConvGeom {
    let oh = (h - 1) * stride + k + out_pad - 2 * pad;
    let ow = (w - 1) * stride + k + out_pad - 2 * pad;
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
    assert_eq!((g.oh, g.ow), (h, w), "inconsistent transposed convolution geometry");
    g
}

impl Graph {
    /// Convolution of `x` (`b × c × h × w`) with `w` (`o × c × k × k`).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), stride, pad);
        let (_, c, h, wd) = self.value(x).dims4();
        let k = self.value(w).shape()[2];
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.apply(
            &inputs,
            out,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let mut grads = vec![
                    ctx.needs[0].then(|| conv2d_grad_input(ctx.grad, w, &geom)),
                    ctx.needs[1].then(|| conv2d_grad_weight(ctx.grad, x, w.shape(), &geom)),
                ];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| channel_sums(ctx.grad)));
                }
                grads
            }),
        )
    }

    /// Transposed convolution; `w` is `c_in × c_out × k × k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let out = conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        );
        let (_, _, h, wd) = self.value(x).dims4();
        let (_, cout, k, _) = self.value(w).dims4();
        let geom = transpose_geom(cout, h, wd, k, stride, pad, out_pad);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.apply(
            &inputs,
            out,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let (bsz, cin, h, wd) = x.dims4();
                let grad = ctx.grad;
                let wm = MatRef::new(w.data(), cin, geom.col_rows());
                let dx = ctx.needs[0].then(|| {
                    let per = cin * h * wd;
                    let mut dx = vec![0.0; bsz * per];
                    par::for_each_chunk_mut(&mut dx, per, |b, chunk| {
                        let mut col = vec![0.0; geom.col_rows() * geom.col_cols()];
                        im2col(&geom, grad.sample(b), &mut col);
                        gemm(wm, MatRef::new(&col, geom.col_rows(), geom.col_cols()), chunk, 0.0);
                    });
                    Tensor::from_vec(x.shape(), dx)
                });
                let dw = ctx.needs[1].then(|| {
                    let len = cin * geom.col_rows();
                    let groups = bsz.div_ceil(GRAD_GROUP);
                    let data = par::ordered_sum(groups, len, |gi| {
                        let mut acc = vec![0.0; len];
                        let mut col = vec![0.0; geom.col_rows() * geom.col_cols()];
                        for b in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(bsz) {
                            im2col(&geom, grad.sample(b), &mut col);
                            gemm(
                                MatRef::new(x.sample(b), cin, h * wd),
                                MatRef::new(&col, geom.col_rows(), geom.col_cols()).t(),
                                &mut acc,
                                1.0,
                            );
                        }
                        acc
                    });
                    Tensor::from_vec(w.shape(), data)
                });
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| channel_sums(grad)));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, c, h, wd) = x.dims4();
        let (o, _, k, _) = w.dims4();
        let g = ConvGeom::new(c, h, wd, k, stride, pad);
        let mut out = Tensor::zeros(&[b, o, g.oh, g.ow]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let got = conv2d_forward(&x, &w, None, s, p);
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(u), v> == <u, conv_t(v)>
        let u = Tensor::from_fn(&[1, 2, 8, 8], |i| ((i * 31 % 17) as f64 - 8.0) * 0.05);
        let w = Tensor::from_fn(&[3, 2, 5, 5], |i| ((i * 7 % 13) as f64 - 6.0) * 0.03);
        let cu = conv2d_forward(&u, &w, None, 2, 2);
        let v = Tensor::from_fn(cu.shape(), |i| ((i * 5 % 9) as f64 - 4.0) * 0.1);
        let ctv = conv_transpose2d_forward(&v, &w, None, 2, 2, 1);
        assert_eq!(ctv.shape(), u.shape());
        let lhs: f64 = cu.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(ctv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_sizes() {
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let a = conv2d_forward(&x, &w, None, 2, 1);
        assert_eq!(a.shape(), &[1, 1, 14, 14]);
        let b = conv2d_forward(&a, &w, None, 2, 1);
        assert_eq!(b.shape(), &[1, 1, 7, 7]);
        let c = conv2d_forward(&b, &w, None, 2, 1);
        assert_eq!(c.shape(), &[1, 1, 4, 4]);
        let up = conv_transpose2d_forward(
            &Tensor::zeros(&[1, 1, 4, 4]),
            &Tensor::zeros(&[1, 2, 5, 5]),
            None,
            2,
            2,
            1,
        );
        assert_eq!(up.shape(), &[1, 2, 8, 8]);
    }
}
