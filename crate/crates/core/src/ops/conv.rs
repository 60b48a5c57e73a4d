//! 2-D cross-correlation with zero padding.
//!
//! `conv2d_forward` lowers each sample to a column matrix and runs one GEMM
//! per sample; `conv2d_forward_direct` is the plain nested-loop definition.
//! The two must agree to rounding error.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Rng, Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(outC, inC, kH, kW)`.
    pub weights: Tensor4<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_weights: Tensor4<T>,
    pub grad_bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor4<T>, bias: Option<Vec<T>>, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.len() != weights.n() {
                return Err(Error::ChannelMismatch {
                    op: "conv2d bias",
                    expected: weights.n(),
                    found: b.len(),
                });
            }
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            pad,
        })
    }

    /// He-normal weights with fan `kH * kW * outC`, zero bias.
    pub fn he_normal(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (2.0 / (kernel * kernel * out_ch) as f64).sqrt();
        let weights = Tensor4::randn([out_ch, in_ch, kernel, kernel], 0.0, std, rng)?;
        let bias = with_bias.then(|| vec![T::zero(); out_ch]);
        Self::new(weights, bias, stride, pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.c()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.h(), self.weights.w())
    }

    /// `floor((H + 2 pad - kH) / stride) + 1`, and likewise for W.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (kh, kw) = self.kernel();
        if h + 2 * self.pad < kh || w + 2 * self.pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("input {h}x{w} with pad {} smaller than kernel {kh}x{kw}", self.pad),
            ));
        }
        Ok((
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        ))
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<(usize, usize)> {
        if x.c() != self.in_channels() {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: self.in_channels(),
                found: x.c(),
            });
        }
        self.output_hw(x.h(), x.w())
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or None
    /// when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }

    /// Output columns `[lo, hi)` whose tap `k` lands inside an input row of
    /// length `extent`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_len: usize) -> (usize, usize) {
        // need pad <= o * stride + k < extent + pad
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample into `rows` rows of the column matrix. Row `r` of this
/// sample starts at `col[r * ld]`, so several samples can sit side by side
/// in one matrix of leading dimension `ld`.
fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T], ld: usize) {
    let cols = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ld..row * ld + cols];
                let (lo, hi) = g.valid_range(kj, g.w, g.wo);
                for oh in 0..g.ho {
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let Some(ih) = g.source(oh, ki, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &x[(ci * g.h + ih) * g.w..(ci * g.h + ih + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if hi > lo {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], ld: usize, x: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * ld..row * ld + cols];
                let (lo, hi) = g.valid_range(kj, g.w, g.wo);
                if hi <= lo {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oh in 0..g.ho {
                    let Some(ih) = g.source(oh, ki, g.h) else {
                        continue;
                    };
                    let dst = &mut x[(ci * g.h + ih) * g.w..(ci * g.h + ih + 1) * g.w];
                    let line = &src[oh * g.wo + lo..oh * g.wo + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Column-matrix elements per GEMM call; samples are grouped up to this size.
const COL_BUDGET: usize = 1 << 18;

fn samples_per_chunk(g: &Geometry, n: usize) -> usize {
    (COL_BUDGET / (g.rows() * g.cols()).max(1)).clamp(1, n.max(1))
}

fn geometry<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, ho: usize, wo: usize) -> Geometry {
    let (kh, kw) = p.kernel();
    Geometry {
        c: x.c(),
        h: x.h(),
        w: x.w(),
        kh,
        kw,
        stride: p.stride,
        pad: p.pad,
        ho,
        wo,
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let (ho, wo) = p.check_input(x)?;
    let g = geometry(x, p, ho, wo);
    let (rows, cols) = (g.rows(), g.cols());
    let out_c = p.out_channels();
    let mut out = Tensor4::zeros([x.n(), out_c, ho, wo])?;
    let chunk = samples_per_chunk(&g, x.n());
    let mut col = vec![T::zero(); rows * chunk * cols];
    let mut y = vec![T::zero(); out_c * chunk * cols];
    for start in (0..x.n()).step_by(chunk) {
        let len = chunk.min(x.n() - start);
        let ld = len * cols;
        for s in 0..len {
            im2col(&g, x.sample(start + s), &mut col[s * cols..], ld);
        }
        gemm(out_c, rows, ld, p.weights.data(), false, &col[..rows * ld], false, T::zero(), &mut y[..out_c * ld]);
        for s in 0..len {
            let dst = out.sample_mut(start + s);
            for o in 0..out_c {
                let b = p.bias.as_ref().map_or(T::zero(), |b| b[o]);
                let src = &y[o * ld + s * cols..o * ld + (s + 1) * cols];
                for (d, &v) in dst[o * cols..(o + 1) * cols].iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
    }
    Ok(out)
}

/// Nested-loop convolution, one multiply-add per (n, o, y, x, c, i, j).
pub fn conv2d_forward_direct<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let (ho, wo) = p.check_input(x)?;
    let g = geometry(x, p, ho, wo);
    let out_c = p.out_channels();
    let mut out = Tensor4::zeros([x.n(), out_c, ho, wo])?;
    for n in 0..x.n() {
        for o in 0..out_c {
            let b = p.bias.as_ref().map_or(T::zero(), |b| b[o]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b;
                    for ci in 0..g.c {
                        for ki in 0..g.kh {
                            let Some(ih) = g.source(oh, ki, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                if let Some(iw) = g.source(ow, kj, g.w) {
                                    acc = acc + x[[n, ci, ih, iw]] * p.weights[[o, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    out[[n, o, oh, ow]] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = p.check_input(x)?;
    let out_c = p.out_channels();
    grad_out.expect_dims("conv2d_backward", [x.n(), out_c, ho, wo])?;
    let g = geometry(x, p, ho, wo);
    let (rows, cols) = (g.rows(), g.cols());

    let mut grad_x = Tensor4::zeros(x.dims())?;
    let mut grad_w = Tensor4::zeros(p.weights.dims())?;
    let chunk = samples_per_chunk(&g, x.n());
    let mut col = vec![T::zero(); rows * chunk * cols];
    let mut grad_col = vec![T::zero(); rows * chunk * cols];
    let mut gy = vec![T::zero(); out_c * chunk * cols];
    let mut grad_w_t = vec![T::zero(); rows * out_c];
    for start in (0..x.n()).step_by(chunk) {
        let len = chunk.min(x.n() - start);
        let ld = len * cols;
        for s in 0..len {
            im2col(&g, x.sample(start + s), &mut col[s * cols..], ld);
            let src = grad_out.sample(start + s);
            for o in 0..out_c {
                gy[o * ld + s * cols..o * ld + (s + 1) * cols].copy_from_slice(&src[o * cols..(o + 1) * cols]);
            }
        }
        let (col, gy) = (&col[..rows * ld], &gy[..out_c * ld]);
        // dW^T += col (K x L) * dY^T (L x outC)
        let beta = if start == 0 { T::zero() } else { T::one() };
        gemm(rows, ld, out_c, col, false, gy, true, beta, &mut grad_w_t);
        // dcol = W^T (K x outC) * dY (outC x L)
        gemm(rows, out_c, ld, p.weights.data(), true, gy, false, T::zero(), &mut grad_col[..rows * ld]);
        for s in 0..len {
            col2im(&g, &grad_col[s * cols..], ld, grad_x.sample_mut(start + s));
        }
    }
    for (r, row) in grad_w_t.chunks_exact(out_c.max(1)).enumerate() {
        for (o, &v) in row.iter().enumerate() {
            grad_w.data_mut()[o * rows + r] = v;
        }
    }

    let grad_bias = p.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); out_c];
        for n in 0..x.n() {
            let gy = grad_out.sample(n);
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc = gy[o * cols..(o + 1) * cols].iter().fold(*acc, |a, &v| a + v);
            }
        }
        gb
    });

    Ok(ConvGrads {
        grad_x,
        grad_weights: grad_w,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel() -> ConvParams<f64> {
        ConvParams::new(Tensor4::full([1, 1, 3, 3], 1.0).unwrap(), None, 1, 1).unwrap()
    }

    #[test]
    fn all_ones_center_is_nine() {
        let x = Tensor4::full([1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d_forward(&x, &ones_kernel()).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert_eq!(y[[0, 0, 1, 1]], 9.0);
        // corners see a 2x2 window
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(conv2d_forward_direct(&x, &ones_kernel()).unwrap(), y);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor4::<f64>::randn([2, 1, 5, 4], 0.0, 1.0, &mut Rng::new(2)).unwrap();
        let p = ConvParams::new(Tensor4::full([1, 1, 1, 1], 1.0).unwrap(), None, 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn stride_two_halves_spatial_extent() {
        let mut rng = Rng::new(0);
        let p = ConvParams::<f32>::he_normal(32, 16, 3, 2, 1, false, &mut rng).unwrap();
        assert_eq!(p.output_hw(32, 32).unwrap(), (16, 16));
        let x = Tensor4::zeros([1, 16, 32, 32]).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().dims(), [1, 32, 16, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ones_kernel();
        let x = Tensor4::zeros([1, 2, 3, 3]).unwrap();
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::ChannelMismatch { .. })));
        assert!(ConvParams::new(Tensor4::<f64>::zeros([1, 1, 3, 3]).unwrap(), None, 0, 1).is_err());
        let x = Tensor4::zeros([1, 1, 3, 3]).unwrap();
        let bad = Tensor4::zeros([1, 1, 2, 3]).unwrap();
        assert!(conv2d_backward(&x, &p, &bad).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let p = ConvParams::<f64>::he_normal(3, 2, 3, 1, 1, true, &mut rng).unwrap();
        let x = Tensor4::randn([2, 2, 5, 5], 0.0, 1.0, &mut rng).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor4::zeros([2, 3, 5, 5]).unwrap()).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = Rng::new(5);
        let p = ConvParams::<f64>::he_normal(3, 2, 3, 2, 1, true, &mut rng).unwrap();
        let x = Tensor4::randn([2, 2, 5, 5], 0.0, 1.0, &mut rng).unwrap();
        let g = Tensor4::randn([2, 3, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let one = conv2d_backward(&x, &p, &g).unwrap();
        let two = conv2d_backward(&x, &p, &g.scale(2.0)).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(a, b)| (2.0 * a - b).abs() < 1e-12);
        assert!(close(one.grad_x.data(), two.grad_x.data()));
        assert!(close(one.grad_weights.data(), two.grad_weights.data()));
        assert!(close(&one.grad_bias.unwrap(), &two.grad_bias.unwrap()));
    }

    #[test]
    fn gemm_path_matches_direct_loops_in_f32() {
        let mut rng = Rng::new(9);
        let p = ConvParams::<f32>::he_normal(8, 5, 3, 2, 1, true, &mut rng).unwrap();
        let x = Tensor4::randn([3, 5, 9, 7], 0.0, 1.0, &mut rng).unwrap();
        let a = conv2d_forward(&x, &p).unwrap();
        let b = conv2d_forward_direct(&x, &p).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
    }
}
