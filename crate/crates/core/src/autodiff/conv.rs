//! Direct 2-D convolution kernels (cross-correlation with zero padding).

use num_complex::Complex;

use super::tape::AutodiffError;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: usize, groups: usize) -> Result<Self, AutodiffError> {
        let err = |detail: String| AutodiffError::Shape { op: "conv2d", detail };
        let &[cin, h, w] = x else {
            return Err(err(format!("input must be [C,H,W], got {x:?}")));
        };
        let &[cout, cpg, kh, kw] = k else {
            return Err(err(format!("kernel must be [Cout,Cin/g,KH,KW], got {k:?}")));
        };
        if stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(err(format!("input {x:?}, kernel {k:?}, stride {stride}, groups {groups}")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(err(format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        Ok(Self {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            groups,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.out_height, self.out_width]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output columns `ox` for which input column `ox*stride - pad + kx` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        axis_range(self.width, self.out_width, self.stride, self.padding, kx)
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        axis_range(self.height, self.out_height, self.stride, self.padding, ky)
    }

    /// Calls `f(out_channel, in_channel, kernel_offset)` for every connected
    /// channel pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ipg, opg) = (self.in_per_group(), self.out_per_group());
        for o in 0..self.out_channels {
            let g = o / opg;
            for cl in 0..ipg {
                let ci = g * ipg + cl;
                let kbase = (o * ipg + cl) * self.kh * self.kw;
                f(o, ci, kbase);
            }
        }
    }
}

fn axis_range(n: usize, out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < n
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn zero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[Complex<T>], k: &[Complex<T>]) -> Vec<Complex<T>> {
    let (h, w, oh, ow) = (g.height, g.width, g.out_height, g.out_width);
    let mut out = vec![zero(); g.out_channels * oh * ow];
    g.for_each_tap(|o, ci, kbase| {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        let op = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for ky in 0..g.kh {
            let (r0, r1) = g.row_range(ky);
            for kx in 0..g.kw {
                let wv = k[kbase + ky * g.kw + kx];
                let (c0, c1) = g.col_range(kx);
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let orow = &mut op[oy * ow..(oy + 1) * ow];
                    let xrow = &xp[iy * w..(iy + 1) * w];
                    for ox in c0..c1 {
                        orow[ox] += wv * xrow[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(g: &ConvGeometry, k: &[Complex<T>], grad: &[Complex<T>]) -> Vec<Complex<T>> {
    let (h, w, oh, ow) = (g.height, g.width, g.out_height, g.out_width);
    let mut out = vec![zero(); g.in_channels * h * w];
    g.for_each_tap(|o, ci, kbase| {
        let gp = &grad[o * oh * ow..(o + 1) * oh * ow];
        let xp = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            let (r0, r1) = g.row_range(ky);
            for kx in 0..g.kw {
                let wv = k[kbase + ky * g.kw + kx].conj();
                let (c0, c1) = g.col_range(kx);
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let grow = &gp[oy * ow..(oy + 1) * ow];
                    let xrow = &mut xp[iy * w..(iy + 1) * w];
                    for ox in c0..c1 {
                        xrow[ox * g.stride + kx - g.padding] += wv * grow[ox];
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_kernel<T: Real>(g: &ConvGeometry, x: &[Complex<T>], grad: &[Complex<T>]) -> Vec<Complex<T>> {
    let (h, w, oh, ow) = (g.height, g.width, g.out_height, g.out_width);
    let mut out = vec![zero(); g.out_channels * g.in_per_group() * g.kh * g.kw];
    g.for_each_tap(|o, ci, kbase| {
        let gp = &grad[o * oh * ow..(o + 1) * oh * ow];
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            let (r0, r1) = g.row_range(ky);
            for kx in 0..g.kw {
                let (c0, c1) = g.col_range(kx);
                let mut acc = zero::<T>();
                for oy in r0..r1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let grow = &gp[oy * ow..(oy + 1) * ow];
                    let xrow = &xp[iy * w..(iy + 1) * w];
                    for ox in c0..c1 {
                        acc += grow[ox] * xrow[ox * g.stride + kx - g.padding].conj();
                    }
                }
                out[kbase + ky * g.kw + kx] += acc;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex<f64> {
        Complex::new(re, 0.0)
    }

    /// Naive reference with explicit bounds checks.
    fn naive(g: &ConvGeometry, x: &[Complex<f64>], k: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let ipg = g.in_channels / g.groups;
        let opg = g.out_channels / g.groups;
        let mut out = vec![c(0.0); g.out_channels * g.out_height * g.out_width];
        for o in 0..g.out_channels {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = c(0.0);
                    for cl in 0..ipg {
                        let ci = (o / opg) * ipg + cl;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let xv = x[(ci * g.height + iy as usize) * g.width + ix as usize];
                                acc += k[((o * ipg + cl) * g.kh + ky) * g.kw + kx] * xv;
                            }
                        }
                    }
                    out[(o * g.out_height + oy) * g.out_width + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        for &(stride, pad, groups, kh) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 0, 2, 2), (2, 2, 4, 5), (1, 3, 4, 7)] {
            let g = ConvGeometry::new(&[4, 9, 7], &[8, 4 / groups, kh, kh], stride, pad, groups).unwrap();
            let x: Vec<_> = (0..4 * 9 * 7).map(|i| Complex::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
            let k: Vec<_> = (0..8 * (4 / groups) * kh * kh).map(|i| Complex::new((i as f64 * 0.53).cos(), (i as f64).sin() * 0.2)).collect();
            let fast = conv2d_forward(&g, &x, &k);
            let slow = naive(&g, &x, &k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-12, "stride {stride} pad {pad} groups {groups}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let g = ConvGeometry::new(&[2, 6, 5], &[4, 1, 3, 3], 2, 1, 2).unwrap();
        let x: Vec<_> = (0..60).map(|i| Complex::new((i as f64 * 0.3).sin(), (i as f64 * 0.7).cos())).collect();
        let k: Vec<_> = (0..36).map(|i| Complex::new((i as f64 * 0.9).cos(), (i as f64 * 0.2).sin())).collect();
        let y = conv2d_forward(&g, &x, &k);
        let r: Vec<_> = (0..y.len()).map(|i| Complex::new((i as f64).cos(), (i as f64 * 1.3).sin())).collect();
        // <A x, r> = <x, A^H r>
        let lhs: Complex<f64> = y.iter().zip(&r).map(|(a, b)| a * b.conj()).sum();
        let xt = conv2d_backward_input(&g, &k, &r);
        let rhs: Complex<f64> = x.iter().zip(&xt).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-10);
        let kt = conv2d_backward_kernel(&g, &x, &r);
        let rhs_k: Complex<f64> = k.iter().zip(&kt).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs_k).norm() < 1e-10);
    }

    #[test]
    fn rejects_bad_groups() {
        assert!(ConvGeometry::new(&[3, 4, 4], &[4, 1, 3, 3], 1, 1, 2).is_err());
        assert!(ConvGeometry::new(&[2, 2, 2], &[1, 2, 5, 5], 1, 0, 1).is_err());
    }
}
