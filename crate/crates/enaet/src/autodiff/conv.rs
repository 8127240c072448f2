//! 2-D convolution via im2col + matrix multiply.
//!
//! Activations are `(N, C, H, W)`, weights `(Cout, Cin, KH, KW)`, zero
//! padding. The column buffer from the forward pass is kept alive inside the
//! backward closure so the weight gradient is a single gemm.

use super::{NodeId, Tape, Tensor};
use ndarray::{Array2, Array4, ArrayView4, Ix4, s};
use std::rc::Rc;

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

fn out_len(input: usize, k: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.pad - k) / spec.stride + 1
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k_off`,
/// i.e. the outputs whose sampled input index lands inside `[0, input)`.
fn valid_range(input: usize, out: usize, k_off: usize, spec: ConvSpec) -> (usize, usize) {
    let (stride, pad) = (spec.stride as isize, spec.pad as isize);
    let k_off = k_off as isize;
    // in = o*stride + k_off - pad, require 0 <= in < input
    let lo = (pad - k_off + stride - 1).div_euclid(stride).max(0) as usize;
    let hi_incl = (input as isize - 1 + pad - k_off).div_euclid(stride);
    if hi_incl < lo as isize {
        return (0, 0);
    }
    (lo, (hi_incl as usize + 1).min(out))
}

/// Unfold `x` into a `(Cin*KH*KW, N*Ho*Wo)` matrix.
fn im2col(x: &ArrayView4<f64>, kh: usize, kw: usize, spec: ConvSpec) -> Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_len(h, kh, spec), out_len(w, kw, spec));
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            let (ho_lo, ho_hi) = valid_range(h, ho, ki, spec);
            for kj in 0..kw {
                let (wo_lo, wo_hi) = valid_range(w, wo, kj, spec);
                if wo_lo >= wo_hi {
                    continue;
                }
                let row = (ci * kh + ki) * kw + kj;
                let wi_lo = wo_lo * spec.stride + kj - spec.pad;
                let wi_hi = (wo_hi - 1) * spec.stride + kj - spec.pad + 1;
                for ni in 0..n {
                    for oi in ho_lo..ho_hi {
                        let hi = oi * spec.stride + ki - spec.pad;
                        let src = x.slice(s![ni, ci, hi, wi_lo..wi_hi;spec.stride]);
                        let base = (ni * ho + oi) * wo;
                        let mut dst =
                            cols.slice_mut(s![row, base + wo_lo..base + wo_hi]);
                        dst.assign(&src);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column gradient back into input layout.
fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Array4<f64> {
    let (ho, wo) = (out_len(h, kh, spec), out_len(w, kw, spec));
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            let (ho_lo, ho_hi) = valid_range(h, ho, ki, spec);
            for kj in 0..kw {
                let (wo_lo, wo_hi) = valid_range(w, wo, kj, spec);
                if wo_lo >= wo_hi {
                    continue;
                }
                let row = (ci * kh + ki) * kw + kj;
                let wi_lo = wo_lo * spec.stride + kj - spec.pad;
                let wi_hi = (wo_hi - 1) * spec.stride + kj - spec.pad + 1;
                for ni in 0..n {
                    for oi in ho_lo..ho_hi {
                        let hi = oi * spec.stride + ki - spec.pad;
                        let base = (ni * ho + oi) * wo;
                        let src = dcols.slice(s![row, base + wo_lo..base + wo_hi]);
                        let mut dst = dx.slice_mut(s![ni, ci, hi, wi_lo..wi_hi;spec.stride]);
                        dst += &src;
                    }
                }
            }
        }
    }
    dx
}

/// Plain (non-taped) convolution, shared by the inference path.
pub fn conv2d_raw(x: &ArrayView4<f64>, w: &ArrayView4<f64>, spec: ConvSpec) -> Array4<f64> {
    let (n, _c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_kk) = (w.shape()[0], w.shape()[1] * w.shape()[2] * w.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (ho, wo) = (out_len(h, kh, spec), out_len(wd, kw, spec));
    let cols = im2col(x, kh, kw, spec);
    let wmat = w.to_shape((cout, cin_kk)).unwrap();
    let out = wmat.dot(&cols); // (Cout, N*Ho*Wo)
    to_nchw(&out, n, cout, ho, wo)
}

fn to_nchw(mat: &Array2<f64>, n: usize, cout: usize, ho: usize, wo: usize) -> Array4<f64> {
    let out = mat
        .to_shape((cout, n, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3]);
    out.as_standard_layout().to_owned()
}

fn to_cout_major(g: &ArrayView4<f64>) -> Array2<f64> {
    let (n, cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let g = g.view().permuted_axes([1, 0, 2, 3]);
    g.as_standard_layout()
        .to_owned()
        .into_shape_with_order((cout, n * ho * wo))
        .unwrap()
}

impl Tape {
    /// Convolution node; bias-free (normalization layers follow every conv).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> NodeId {
        let vx = self.value_rc(x);
        let vw = self.value_rc(w);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d: x rank 4");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv2d: w rank 4");
        let (n, c, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let (cout, kh, kw) = (w4.shape()[0], w4.shape()[2], w4.shape()[3]);
        assert_eq!(w4.shape()[1], c, "conv2d: channel mismatch");
        let (ho, wo) = (out_len(h, kh, spec), out_len(wd, kw, spec));

        let cols = Rc::new(im2col(&x4, kh, kw, spec));
        let wmat = w4.to_shape((cout, c * kh * kw)).unwrap().to_owned();
        let out = to_nchw(&wmat.dot(&*cols), n, cout, ho, wo);

        let cols_c = Rc::clone(&cols);
        let vw_c = Rc::clone(&vw);
        self.push(
            Rc::new(out.into_dyn()),
            vec![x, w],
            Some(Box::new(move |g: &Tensor| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gmat = to_cout_major(&g4);
                let dw = gmat.dot(&cols_c.t()); // (Cout, Cin*KH*KW)
                let w4 = vw_c.view().into_dimensionality::<Ix4>().unwrap();
                let wmat = w4.to_shape((cout, c * kh * kw)).unwrap();
                let dcols = wmat.t().dot(&gmat);
                let dx = col2im(&dcols, n, c, h, wd, kh, kw, spec);
                vec![
                    dx.into_dyn(),
                    dw.into_shape_with_order((cout, c, kh, kw)).unwrap().into_dyn(),
                ]
            })),
            false,
        )
    }
}
