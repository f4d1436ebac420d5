//! Differentiable operations recorded on a [`Tape`].
//!
//! Each operation computes its forward value eagerly, keeps what its backward
//! rule needs, and records itself. Backward rules follow the conjugate
//! cotangent convention documented on [`Op`]; for a holomorphic linear map
//! `w = A z` the rule is `g_z = A^H g_w`.

use std::sync::Arc;

use num_complex::Complex;

use super::conv::{conv2d_backward_input, conv2d_backward_kernel, conv2d_forward, ConvGeometry};
use super::tape::{AutodiffError, BackwardCtx, Op, Tape, Var};
use crate::propagation::PropagationPlan;
use crate::scalar::{Real, MAGNITUDE_GUARD};
use crate::tensor::{layer_norm_kernel, BilinearTap, Kind, Tensor};

fn zero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn combine_kind(a: Kind, b: Kind) -> Kind {
    if a == Kind::Real && b == Kind::Real {
        Kind::Real
    } else {
        Kind::Complex
    }
}

fn bits_of(flags: impl Iterator<Item = bool>) -> u64 {
    flags.fold(0u64, |h, f| h.rotate_left(1) ^ (f as u64))
}

fn guard<T: Real>() -> T {
    T::lit(MAGNITUDE_GUARD)
}

/// Magnitudes below this are reported as non-smooth points to branch tracking.
const NON_SMOOTH_ZONE: f64 = 1e-6;

// ---------------------------------------------------------------- elementwise

struct AddOp;
impl<T: Real> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        ctx.needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct SubOp;
impl<T: Real> Op<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let neg = || {
            let mut n = g.clone();
            n.scale(-T::one());
            n
        };
        vec![ctx.needs[0].then(|| g.clone()), ctx.needs[1].then(neg)]
    }
}

struct MulOp;
impl<T: Real> Op<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let ga = ctx.needs[0].then(|| {
            let d = g.data().iter().zip(b.data()).map(|(g, b)| g * b.conj()).collect();
            Tensor::new(a.shape(), d, a.kind()).expect("shape")
        });
        let gb = ctx.needs[1].then(|| {
            let d = g.data().iter().zip(a.data()).map(|(g, a)| g * a.conj()).collect();
            Tensor::new(b.shape(), d, b.kind()).expect("shape")
        });
        vec![ga, gb]
    }
}

struct ScaleConstOp<T>(T);
impl<T: Real> Op<T> for ScaleConstOp<T> {
    fn name(&self) -> &'static str {
        "scale_const"
    }
    fn backward(&self, _: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut out = g.clone();
        out.scale(self.0);
        vec![Some(out)]
    }
}

/// `s * x` for a real scalar variable `s`.
struct ScaleByOp;
impl<T: Real> Op<T> for ScaleByOp {
    fn name(&self) -> &'static str {
        "scale_by"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, s) = (ctx.inputs[0], ctx.inputs[1]);
        let sv = s.data()[0].re;
        let gx = ctx.needs[0].then(|| {
            let mut out = g.clone();
            out.scale(sv);
            out
        });
        let gs = ctx.needs[1].then(|| {
            let v: T = g.data().iter().zip(x.data()).map(|(g, x)| (g.conj() * x).re).sum();
            Tensor::scalar(v).reshaped(s.shape())
        });
        vec![gx, gs]
    }
}

struct AbsOp;
impl<T: Real> Op<T> for AbsOp {
    fn name(&self) -> &'static str {
        "abs"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let d = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(g, z)| {
                let m = z.norm();
                let u = if m < guard() { Complex::new(T::one(), T::zero()) } else { z / m };
                u * g.re
            })
            .collect();
        vec![Some(Tensor::new(x.shape(), d, x.kind()).expect("shape"))]
    }
}

/// `z / |z|`, with the unit phase `1` where `|z|` falls below the guard.
struct UnitPhaseOp;
impl<T: Real> Op<T> for UnitPhaseOp {
    fn name(&self) -> &'static str {
        "unit_phase"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let two = T::lit(2.0);
        let d = g
            .data()
            .iter()
            .zip(x.data())
            .zip(ctx.output.data())
            .map(|((g, z), u)| {
                let m = z.norm();
                if m < guard() {
                    zero()
                } else {
                    (g - u * u * g.conj()) / (two * m)
                }
            })
            .collect();
        vec![Some(Tensor::new(x.shape(), d, Kind::Complex).expect("shape"))]
    }
}

struct SplitReluOp;
impl<T: Real> Op<T> for SplitReluOp {
    fn name(&self) -> &'static str {
        "split_relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let z = T::zero();
        let d = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(g, x)| Complex::new(if x.re > z { g.re } else { z }, if x.im > z { g.im } else { z }))
            .collect();
        vec![Some(Tensor::new(x.shape(), d, x.kind()).expect("shape"))]
    }
}

struct GeluOp;
impl<T: Real> Op<T> for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let d = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(g, x)| Complex::new(g.re * gelu_derivative(x.re), T::zero()))
            .collect();
        vec![Some(Tensor::new(x.shape(), d, Kind::Real).expect("shape"))]
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-half * x * x).exp() / (T::lit(2.0) * T::PI()).sqrt();
    cdf + x * pdf
}

/// `[C, ...]` complex to `[2C, ...]` real: real parts then imaginary parts.
struct SplitReImOp;
impl<T: Real> Op<T> for SplitReImOp {
    fn name(&self) -> &'static str {
        "split_re_im"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let n = x.len();
        let d = (0..n).map(|i| Complex::new(g.data()[i].re, g.data()[n + i].re)).collect();
        vec![Some(Tensor::new(x.shape(), d, x.kind()).expect("shape"))]
    }
}

struct ReshapeOp;
impl<T: Real> Op<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshaped(ctx.inputs[0].shape()))]
    }
}

// ---------------------------------------------------------------- reductions

/// Mean squared error between the real part of `x` and a fixed target.
struct MseOp<T: Real> {
    target: Vec<T>,
}
impl<T: Real> Op<T> for MseOp<T> {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let scale = g.data()[0].re * T::lit(2.0) / T::from_usize_lossy(x.len());
        let d = x
            .data()
            .iter()
            .zip(&self.target)
            .map(|(x, &t)| Complex::new((x.re - t) * scale, T::zero()))
            .collect();
        vec![Some(Tensor::new(x.shape(), d, x.kind()).expect("shape"))]
    }
}

/// `Re(sum conj(w) * x)` for a fixed weight tensor `w`.
struct ProjectOp<T: Real> {
    weights: Vec<Complex<T>>,
}
impl<T: Real> Op<T> for ProjectOp<T> {
    fn name(&self) -> &'static str {
        "project"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let s = g.data()[0].re;
        let d = self.weights.iter().map(|w| w * s).collect();
        vec![Some(Tensor::new(x.shape(), d, x.kind()).expect("shape"))]
    }
}

// ---------------------------------------------------------------- propagation

struct PropagateOp<T: Real> {
    plan: Arc<PropagationPlan<T>>,
    adjoint: bool,
}
impl<T: Real> Op<T> for PropagateOp<T> {
    fn name(&self) -> &'static str {
        if self.adjoint {
            "adjoint_propagate"
        } else {
            "propagate"
        }
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut d = g.data().to_vec();
        if self.adjoint {
            self.plan.forward_in_place(&mut d);
        } else {
            self.plan.adjoint_in_place(&mut d);
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), d, Kind::Complex).expect("shape"))]
    }
}

// ---------------------------------------------------------------- convolution

struct Conv2dOp {
    geom: ConvGeometry,
}
impl<T: Real> Op<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, k) = (ctx.inputs[0], ctx.inputs[1]);
        let gx = ctx.needs[0].then(|| {
            let d = conv2d_backward_input(&self.geom, k.data(), g.data());
            Tensor::new(x.shape(), d, x.kind()).expect("shape")
        });
        let gk = ctx.needs[1].then(|| {
            let d = conv2d_backward_kernel(&self.geom, x.data(), g.data());
            Tensor::new(k.shape(), d, k.kind()).expect("shape")
        });
        vec![gx, gk]
    }
}

/// Adds a per-channel bias `b[C]` to `x[C, ...]`.
struct ChannelBiasOp;
impl<T: Real> Op<T> for ChannelBiasOp {
    fn name(&self) -> &'static str {
        "channel_bias"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let b = ctx.inputs[1];
        let c = b.len();
        let plane = g.len() / c;
        let gb = ctx.needs[1].then(|| {
            let d = (0..c)
                .map(|ch| g.data()[ch * plane..(ch + 1) * plane].iter().fold(zero(), |a, v| a + v))
                .collect();
            Tensor::new(b.shape(), d, b.kind()).expect("shape")
        });
        vec![ctx.needs[0].then(|| g.clone()), gb]
    }
}

/// Nearest-neighbour x2 upsampling of `[C, H, W]`.
struct Upsample2Op;
impl<T: Real> Op<T> for Upsample2Op {
    fn name(&self) -> &'static str {
        "upsample2"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut d = vec![zero(); x.len()];
        let w2 = 2 * w;
        for ch in 0..c {
            for r in 0..2 * h {
                let grow = &g.data()[(ch * 2 * h + r) * w2..(ch * 2 * h + r + 1) * w2];
                let drow = &mut d[(ch * h + r / 2) * w..(ch * h + r / 2 + 1) * w];
                for (col, v) in grow.iter().enumerate() {
                    drow[col / 2] += *v;
                }
            }
        }
        vec![Some(Tensor::new(x.shape(), d, x.kind()).expect("shape"))]
    }
}

// ---------------------------------------------------------------- normalization

struct LayerNormOp<T: Real> {
    normalized: Vec<Complex<T>>,
    inv_std: Vec<T>,
}
impl<T: Real> Op<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, gamma, beta) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let c = gamma.len();
        let locs = x.len() / c;
        let n = &self.normalized;
        let gd = g.data();
        let gg = ctx.needs[1].then(|| {
            let d = (0..c)
                .map(|ch| {
                    let r = ch * locs..(ch + 1) * locs;
                    gd[r.clone()].iter().zip(&n[r]).fold(zero(), |a, (g, n)| a + g * n.conj())
                })
                .collect();
            Tensor::new(gamma.shape(), d, gamma.kind()).expect("shape")
        });
        let gb = ctx.needs[2].then(|| {
            let d = (0..c)
                .map(|ch| gd[ch * locs..(ch + 1) * locs].iter().fold(zero(), |a, g| a + g))
                .collect();
            Tensor::new(beta.shape(), d, beta.kind()).expect("shape")
        });
        let gx = ctx.needs[0].then(|| {
            let inv_c = T::one() / T::from_usize_lossy(c);
            let mut gn = vec![zero(); x.len()];
            let mut mean_g = vec![zero::<T>(); locs];
            let mut mean_proj = vec![T::zero(); locs];
            for ch in 0..c {
                let gam = gamma.data()[ch].conj();
                let r = ch * locs..(ch + 1) * locs;
                for (((o, g), nv), (mg, mp)) in gn[r.clone()]
                    .iter_mut()
                    .zip(&gd[r.clone()])
                    .zip(&n[r])
                    .zip(mean_g.iter_mut().zip(mean_proj.iter_mut()))
                {
                    *o = g * gam;
                    *mg += *o;
                    *mp += (*o * nv.conj()).re;
                }
            }
            let mut d = vec![zero(); x.len()];
            for ch in 0..c {
                let r = ch * locs..(ch + 1) * locs;
                for (loc, (o, (gv, nv))) in d[r.clone()].iter_mut().zip(gn[r.clone()].iter().zip(&n[r])).enumerate() {
                    *o = (gv - mean_g[loc] * inv_c - nv * (mean_proj[loc] * inv_c)) * self.inv_std[loc];
                }
            }
            Tensor::new(x.shape(), d, x.kind()).expect("shape")
        });
        vec![gx, gg, gb]
    }
}

// ---------------------------------------------------------------- deformable sampling

/// Geometry of deformable attention over an `height x width` feature map:
/// one reference point at the center of every `cell x cell` block, so keys
/// and values are downsampled by `cell^2` relative to the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub height: usize,
    pub width: usize,
    pub cell: usize,
}

impl AttentionGeometry {
    pub const DEFAULT_CELL: usize = 8;

    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, cell: Self::DEFAULT_CELL }
    }

    /// Downsampling rate `N_Q / N_K`.
    pub fn rate(&self) -> usize {
        self.cell * self.cell
    }

    pub fn num_queries(&self) -> usize {
        self.height * self.width
    }

    pub fn grid_height(&self) -> usize {
        self.height / self.cell
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.cell
    }

    pub fn num_keys(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    /// Reference point of grid cell `(i, j)` in feature-map pixel units.
    pub fn reference<T: Real>(&self, i: usize, j: usize) -> (T, T) {
        let half = T::lit((self.cell as f64 - 1.0) / 2.0);
        (
            T::from_usize_lossy(i * self.cell) + half,
            T::from_usize_lossy(j * self.cell) + half,
        )
    }

    /// Sample positions `reference + offset`, unclamped. `offsets` is `[2, gh, gw]`
    /// holding row offsets then column offsets.
    pub fn positions<T: Real>(&self, offsets: &[Complex<T>]) -> Vec<(T, T)> {
        let (gh, gw) = (self.grid_height(), self.grid_width());
        let n = gh * gw;
        let mut out = Vec::with_capacity(n);
        for i in 0..gh {
            for j in 0..gw {
                let (r, c) = self.reference::<T>(i, j);
                let k = i * gw + j;
                out.push((r + offsets[k].re, c + offsets[n + k].re));
            }
        }
        out
    }
}

struct DeformSampleOp<T: Real> {
    layout: AttentionGeometry,
    taps: Vec<BilinearTap<T>>,
}
impl<T: Real> Op<T> for DeformSampleOp<T> {
    fn name(&self) -> &'static str {
        "deform_sample"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (f, off) = (ctx.inputs[0], ctx.inputs[1]);
        let (c, h, w) = (f.shape()[0], self.layout.height, self.layout.width);
        let plane = h * w;
        let n = self.taps.len();
        let gf = ctx.needs[0].then(|| {
            let mut d = vec![zero(); f.len()];
            for (k, tap) in self.taps.iter().enumerate() {
                let idx = tap.indices(w);
                let wt = tap.weights();
                for ch in 0..c {
                    let gv = g.data()[ch * n + k];
                    let base = &mut d[ch * plane..(ch + 1) * plane];
                    for q in 0..4 {
                        base[idx[q]] += gv * wt[q];
                    }
                }
            }
            Tensor::new(f.shape(), d, f.kind()).expect("shape")
        });
        let goff = ctx.needs[1].then(|| {
            let mut d = vec![zero(); off.len()];
            for (k, tap) in self.taps.iter().enumerate() {
                let idx = tap.indices(w);
                let (dr, dc) = tap.weight_derivatives();
                let (mut sr, mut sc) = (T::zero(), T::zero());
                for ch in 0..c {
                    let gv = g.data()[ch * n + k].conj();
                    let base = &f.data()[ch * plane..(ch + 1) * plane];
                    let (mut vr, mut vc) = (zero::<T>(), zero::<T>());
                    for q in 0..4 {
                        vr += base[idx[q]] * dr[q];
                        vc += base[idx[q]] * dc[q];
                    }
                    sr += (gv * vr).re;
                    sc += (gv * vc).re;
                }
                d[k] = Complex::new(sr, T::zero());
                d[n + k] = Complex::new(sc, T::zero());
            }
            Tensor::new(off.shape(), d, off.kind()).expect("shape")
        });
        vec![gf, goff]
    }
}

/// Relative position bias `B[NQ, NK]` read from a real table by bilinear
/// interpolation at the normalized query-to-key displacement.
struct PositionBiasOp<T: Real> {
    layout: AttentionGeometry,
    /// Per (query, key): table taps.
    taps: Vec<BilinearTap<T>>,
    /// Per key: whether the row/column position was left unclamped.
    free: Vec<(bool, bool)>,
}

impl<T: Real> PositionBiasOp<T> {
    fn table_coord(q: T, p: T, extent: usize, table: usize) -> T {
        let span = T::from_usize_lossy(extent.saturating_sub(1).max(1));
        let d = (q - p) / span;
        (d + T::one()) * T::lit(0.5) * T::from_usize_lossy(table - 1)
    }
}

impl<T: Real> Op<T> for PositionBiasOp<T> {
    fn name(&self) -> &'static str {
        "position_bias"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (table, off) = (ctx.inputs[0], ctx.inputs[1]);
        let (th, tw) = (table.shape()[0], table.shape()[1]);
        let nk = self.layout.num_keys();
        let nq = self.layout.height * self.layout.width;
        let gt = ctx.needs[0].then(|| {
            let mut d = vec![zero(); table.len()];
            for (tap, gv) in self.taps.iter().zip(g.data()) {
                let idx = tap.indices(tw);
                let wt = tap.weights();
                for q in 0..4 {
                    d[idx[q]] += Complex::new(gv.re * wt[q], T::zero());
                }
            }
            Tensor::new(table.shape(), d, Kind::Real).expect("shape")
        });
        let goff = ctx.needs[1].then(|| {
            // d(table coord)/d(position) = -(table-1) / (2 * span)
            let span_r = T::from_usize_lossy(self.layout.height.saturating_sub(1).max(1));
            let span_c = T::from_usize_lossy(self.layout.width.saturating_sub(1).max(1));
            let kr = -T::from_usize_lossy(th - 1) * T::lit(0.5) / span_r;
            let kc = -T::from_usize_lossy(tw - 1) * T::lit(0.5) / span_c;
            let mut d = vec![zero(); off.len()];
            for qi in 0..nq {
                for kj in 0..nk {
                    let tap = &self.taps[qi * nk + kj];
                    let gv = g.data()[qi * nk + kj].re;
                    let idx = tap.indices(tw);
                    let (dr, dc) = tap.weight_derivatives();
                    let (mut vr, mut vc) = (T::zero(), T::zero());
                    for q in 0..4 {
                        let t = table.data()[idx[q]].re;
                        vr += t * dr[q];
                        vc += t * dc[q];
                    }
                    let (fr, fc) = self.free[kj];
                    if fr {
                        d[kj].re += gv * vr * kr;
                    }
                    if fc {
                        d[nk + kj].re += gv * vc * kc;
                    }
                }
            }
            Tensor::new(off.shape(), d, Kind::Real).expect("shape")
        });
        vec![gt, goff]
    }
}

// ---------------------------------------------------------------- attention

/// Row softmax of `Re<q_i, k_j> * scale + bias_ij` (Hermitian similarity).
struct AttentionWeightsOp<T: Real> {
    scale: T,
    nq: usize,
    nk: usize,
    channels: usize,
}
impl<T: Real> Op<T> for AttentionWeightsOp<T> {
    fn name(&self) -> &'static str {
        "attention_weights"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (q, k, bias) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let (nq, nk, c) = (self.nq, self.nk, self.channels);
        let a = ctx.output.data();
        // dL/dS_ij = A_ij (g_ij - sum_k A_ik g_ik)
        let mut gs = vec![T::zero(); nq * nk];
        for i in 0..nq {
            let row = i * nk..(i + 1) * nk;
            let dot: T = a[row.clone()].iter().zip(&g.data()[row.clone()]).map(|(a, g)| a.re * g.re).sum();
            for j in row {
                gs[j] = a[j].re * (g.data()[j].re - dot);
            }
        }
        let gq = ctx.needs[0].then(|| {
            let mut d = vec![zero(); q.len()];
            for ch in 0..c {
                let krow = &k.data()[ch * nk..(ch + 1) * nk];
                for i in 0..nq {
                    let srow = &gs[i * nk..(i + 1) * nk];
                    let acc = srow.iter().zip(krow).fold(zero::<T>(), |a, (s, k)| a + k * *s);
                    d[ch * nq + i] = acc * self.scale;
                }
            }
            Tensor::new(q.shape(), d, q.kind()).expect("shape")
        });
        let gk = ctx.needs[1].then(|| {
            let mut d = vec![zero(); k.len()];
            for ch in 0..c {
                let qrow = &q.data()[ch * nq..(ch + 1) * nq];
                let drow = &mut d[ch * nk..(ch + 1) * nk];
                for (i, qv) in qrow.iter().enumerate() {
                    let srow = &gs[i * nk..(i + 1) * nk];
                    for (o, s) in drow.iter_mut().zip(srow) {
                        *o += qv * *s;
                    }
                }
                for o in drow.iter_mut() {
                    *o = *o * self.scale;
                }
            }
            Tensor::new(k.shape(), d, k.kind()).expect("shape")
        });
        let gb = ctx.needs[2].then(|| {
            let d = gs.iter().map(|&s| Complex::new(s, T::zero())).collect();
            Tensor::new(bias.shape(), d, Kind::Real).expect("shape")
        });
        vec![gq, gk, gb]
    }
}

/// `out[c, i] = sum_j A[i, j] v[c, j]`.
struct AttendOp {
    nq: usize,
    nk: usize,
    channels: usize,
}
impl<T: Real> Op<T> for AttendOp {
    fn name(&self) -> &'static str {
        "attend"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, v) = (ctx.inputs[0], ctx.inputs[1]);
        let (nq, nk, c) = (self.nq, self.nk, self.channels);
        let ga = ctx.needs[0].then(|| {
            let mut d = vec![zero(); nq * nk];
            for ch in 0..c {
                let vrow = &v.data()[ch * nk..(ch + 1) * nk];
                let grow = &g.data()[ch * nq..(ch + 1) * nq];
                for (i, gv) in grow.iter().enumerate() {
                    let gc = gv.conj();
                    for (o, vv) in d[i * nk..(i + 1) * nk].iter_mut().zip(vrow) {
                        o.re += (gc * vv).re;
                    }
                }
            }
            Tensor::new(a.shape(), d, Kind::Real).expect("shape")
        });
        let gv = ctx.needs[1].then(|| {
            let mut d = vec![zero(); v.len()];
            for ch in 0..c {
                let grow = &g.data()[ch * nq..(ch + 1) * nq];
                let drow = &mut d[ch * nk..(ch + 1) * nk];
                for (i, gv) in grow.iter().enumerate() {
                    for (o, av) in drow.iter_mut().zip(&a.data()[i * nk..(i + 1) * nk]) {
                        *o += gv * av.re;
                    }
                }
            }
            Tensor::new(v.shape(), d, v.kind()).expect("shape")
        });
        vec![ga, gv]
    }
}

// ---------------------------------------------------------------- tape API

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let v = Tensor::new(x.shape(), d, combine_kind(x.kind(), y.kind())).expect("shape");
        Ok(self.record(v, &[a, b], Box::new(AddOp)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Tensor::new(x.shape(), d, combine_kind(x.kind(), y.kind())).expect("shape");
        Ok(self.record(v, &[a, b], Box::new(SubOp)))
    }

    /// Elementwise complex product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.shape(), d, combine_kind(x.kind(), y.kind())).expect("shape");
        Ok(self.record(v, &[a, b], Box::new(MulOp)))
    }

    pub fn scale_const(&mut self, a: Var, s: T) -> Var {
        let x = self.value(a);
        let d = x.data().iter().map(|p| p * s).collect();
        let v = Tensor::new(x.shape(), d, x.kind()).expect("shape");
        self.record(v, &[a], Box::new(ScaleConstOp(s)))
    }

    /// Scales `a` by the real scalar variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scale must be scalar, got {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0].re;
        let x = self.value(a);
        let d = x.data().iter().map(|p| p * sv).collect();
        let v = Tensor::new(x.shape(), d, x.kind()).expect("shape");
        Ok(self.record(v, &[a, s], Box::new(ScaleByOp)))
    }

    /// Elementwise modulus.
    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d: Vec<_> = x.data().iter().map(|z| Complex::new(z.norm(), T::zero())).collect();
        if self.tracking() {
            let zone = T::lit(NON_SMOOTH_ZONE);
            let bits = bits_of(d.iter().map(|m| m.re < zone));
            self.note_branch(bits);
        }
        let v = Tensor::new(self.value(a).shape(), d, Kind::Real).expect("shape");
        self.record(v, &[a], Box::new(AbsOp))
    }

    /// Elementwise `z / |z|` (unit phase factor, `1` at `|z| < 1e-12`).
    pub fn unit_phase(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d: Vec<_> = x.data().iter().map(|&z| unit_phase(z)).collect();
        if self.tracking() {
            let zone = T::lit(NON_SMOOTH_ZONE);
            let bits = bits_of(x.data().iter().map(|z| z.norm() < zone));
            self.note_branch(bits);
        }
        let v = Tensor::new(self.value(a).shape(), d, Kind::Complex).expect("shape");
        self.record(v, &[a], Box::new(UnitPhaseOp))
    }

    /// ReLU applied separately to the real and imaginary parts.
    pub fn split_relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let z = T::zero();
        let d: Vec<_> = x.data().iter().map(|v| Complex::new(v.re.max(z), v.im.max(z))).collect();
        if self.tracking() {
            let bits = bits_of(x.data().iter().flat_map(|v| [v.re > z, v.im > z]));
            self.note_branch(bits);
        }
        let v = Tensor::new(self.value(a).shape(), d, self.value(a).kind()).expect("shape");
        self.record(v, &[a], Box::new(SplitReluOp))
    }

    /// GELU on a real tensor.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.data().iter().map(|v| Complex::new(gelu(v.re), T::zero())).collect();
        let v = Tensor::new(x.shape(), d, Kind::Real).expect("shape");
        self.record(v, &[a], Box::new(GeluOp))
    }

    /// `[C, ...]` complex to `[2C, ...]` real.
    pub fn split_re_im(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut shape = x.shape().to_vec();
        shape[0] *= 2;
        let mut d: Vec<_> = x.data().iter().map(|z| Complex::new(z.re, T::zero())).collect();
        d.extend(x.data().iter().map(|z| Complex::new(z.im, T::zero())));
        let v = Tensor::new(&shape, d, Kind::Real).expect("shape");
        self.record(v, &[a], Box::new(SplitReImOp))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.record(v, &[a], Box::new(ReshapeOp))
    }

    /// Mean squared error of `Re(a)` against `target`.
    pub fn mse(&mut self, a: Var, target: &[T]) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if x.len() != target.len() {
            return Err(shape_err("mse", format!("{} values vs {} targets", x.len(), target.len())));
        }
        let n = T::from_usize_lossy(x.len());
        let loss: T = x.data().iter().zip(target).map(|(x, &t)| (x.re - t) * (x.re - t)).sum::<T>() / n;
        Ok(self.record(Tensor::scalar(loss), &[a], Box::new(MseOp { target: target.to_vec() })))
    }

    /// `Re(sum conj(w) * a)`: a random linear functional, used to reduce a
    /// tensor output to a scalar in gradient checks.
    pub fn project(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        same_shape("project", x, weights)?;
        let s: T = x.data().iter().zip(weights.data()).map(|(x, w)| (w.conj() * x).re).sum();
        Ok(self.record(Tensor::scalar(s), &[a], Box::new(ProjectOp { weights: weights.data().to_vec() })))
    }

    pub fn propagate(&mut self, a: Var, plan: &Arc<PropagationPlan<T>>) -> Result<Var, AutodiffError> {
        self.propagation(a, plan, false)
    }

    pub fn adjoint_propagate(&mut self, a: Var, plan: &Arc<PropagationPlan<T>>) -> Result<Var, AutodiffError> {
        self.propagation(a, plan, true)
    }

    fn propagation(&mut self, a: Var, plan: &Arc<PropagationPlan<T>>, adjoint: bool) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let (h, w) = plan.dims();
        if x.len() != h * w {
            return Err(shape_err("propagate", format!("{:?} vs plan {h}x{w}", x.shape())));
        }
        let mut d = x.data().to_vec();
        if adjoint {
            plan.adjoint_in_place(&mut d);
        } else {
            plan.forward_in_place(&mut d);
        }
        let v = Tensor::new(x.shape(), d, Kind::Complex).expect("shape");
        Ok(self.record(v, &[a], Box::new(PropagateOp { plan: Arc::clone(plan), adjoint })))
    }

    /// 2-D convolution of `x[Cin, H, W]` with `k[Cout, Cin/groups, KH, KW]`
    /// (cross-correlation, zero padding).
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize, groups: usize) -> Result<Var, AutodiffError> {
        let (xv, kv) = (self.value(x), self.value(k));
        let geom = ConvGeometry::new(xv.shape(), kv.shape(), stride, padding, groups)?;
        let d = conv2d_forward(&geom, xv.data(), kv.data());
        let v = Tensor::new(&geom.output_shape(), d, combine_kind(xv.kind(), kv.kind())).expect("shape");
        Ok(self.record(v, &[x, k], Box::new(Conv2dOp { geom })))
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.len();
        if xv.shape().first() != Some(&c) {
            return Err(shape_err("channel_bias", format!("{:?} with {} biases", xv.shape(), c)));
        }
        let plane = xv.len() / c;
        let d = xv.data().iter().enumerate().map(|(i, v)| v + bv.data()[i / plane]).collect();
        let v = Tensor::new(xv.shape(), d, combine_kind(xv.kind(), bv.kind())).expect("shape");
        Ok(self.record(v, &[x, b], Box::new(ChannelBiasOp)))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let &[c, h, w] = xv.shape() else {
            return Err(shape_err("upsample2", format!("expected [C,H,W], got {:?}", xv.shape())));
        };
        let mut d = Vec::with_capacity(4 * xv.len());
        for ch in 0..c {
            for r in 0..2 * h {
                let row = &xv.data()[(ch * h + r / 2) * w..(ch * h + r / 2 + 1) * w];
                for col in 0..2 * w {
                    d.push(row[col / 2]);
                }
            }
        }
        let v = Tensor::new(&[c, 2 * h, 2 * w], d, xv.kind()).expect("shape");
        Ok(self.record(v, &[x], Box::new(Upsample2Op)))
    }

    /// Layer normalization across the leading (channel) axis with a
    /// per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, AutodiffError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = gv.len();
        if xv.shape().first() != Some(&c) || bv.len() != c {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with affine {}/{}", xv.shape(), gv.len(), bv.len()),
            ));
        }
        let out = layer_norm_kernel(xv.data(), c, xv.len() / c, gv.data(), bv.data(), eps);
        let kind = if xv.is_real() && gv.is_real() && bv.is_real() { Kind::Real } else { Kind::Complex };
        let v = Tensor::new(xv.shape(), out.output, kind).expect("shape");
        Ok(self.record(v, &[x, gamma, beta], Box::new(LayerNormOp { normalized: out.normalized, inv_std: out.inv_std })))
    }

    /// Samples `f[C, H, W]` at `reference + offset` for every cell of `layout`,
    /// giving `[C, H/cell, W/cell]`. `offsets` is real `[2, H/cell, W/cell]`.
    pub fn deform_sample(&mut self, f: Var, offsets: Var, cell: usize) -> Result<Var, AutodiffError> {
        let (fv, ov) = (self.value(f), self.value(offsets));
        let &[c, h, w] = fv.shape() else {
            return Err(shape_err("deform_sample", format!("expected [C,H,W], got {:?}", fv.shape())));
        };
        let layout = AttentionGeometry { height: h, width: w, cell };
        let (gh, gw) = (layout.grid_height(), layout.grid_width());
        if ov.shape() != [2, gh, gw] {
            return Err(shape_err("deform_sample", format!("offsets {:?}, expected [2, {gh}, {gw}]", ov.shape())));
        }
        let taps: Vec<_> = layout
            .positions(ov.data())
            .into_iter()
            .map(|(r, col)| BilinearTap::new(r, col, h, w))
            .collect();
        let n = taps.len();
        let plane = h * w;
        let kind = fv.kind();
        let mut d = vec![zero(); c * n];
        for (k, tap) in taps.iter().enumerate() {
            let idx = tap.indices(w);
            let wt = tap.weights();
            for ch in 0..c {
                let base = &fv.data()[ch * plane..(ch + 1) * plane];
                d[ch * n + k] = (0..4).fold(zero(), |a, q| a + base[idx[q]] * wt[q]);
            }
        }
        if self.tracking() {
            let bits = bits_of(taps.iter().flat_map(|t| [t.row_free, t.col_free]))
                ^ taps.iter().fold(0u64, |h, t| h.rotate_left(7) ^ (t.r0 * 131 + t.c0) as u64);
            self.note_branch(bits);
        }
        let v = Tensor::new(&[c, gh, gw], d, kind).expect("shape");
        Ok(self.record(v, &[f, offsets], Box::new(DeformSampleOp { layout, taps })))
    }

    /// Relative position bias `[H*W, (H/cell)*(W/cell)]` for queries on the
    /// `height x width` grid and keys at the deformed sample positions.
    pub fn position_bias(&mut self, table: Var, offsets: Var, height: usize, width: usize, cell: usize) -> Result<Var, AutodiffError> {
        let (tv, ov) = (self.value(table), self.value(offsets));
        let &[th, tw] = tv.shape() else {
            return Err(shape_err("position_bias", format!("table must be 2-D, got {:?}", tv.shape())));
        };
        if th < 2 || tw < 2 {
            return Err(shape_err("position_bias", format!("table must be at least 2x2, got {th}x{tw}")));
        }
        let layout = AttentionGeometry { height, width, cell };
        if ov.shape() != [2, layout.grid_height(), layout.grid_width()] {
            return Err(shape_err("position_bias", format!("offsets {:?}", ov.shape())));
        }
        let hmax = T::from_usize_lossy(height - 1);
        let wmax = T::from_usize_lossy(width - 1);
        let keys: Vec<(T, T, bool, bool)> = layout
            .positions(ov.data())
            .into_iter()
            .map(|(r, c)| {
                let fr = r > T::zero() && r < hmax;
                let fc = c > T::zero() && c < wmax;
                (r.max(T::zero()).min(hmax), c.max(T::zero()).min(wmax), fr, fc)
            })
            .collect();
        let nk = keys.len();
        let nq = height * width;
        let mut taps = Vec::with_capacity(nq * nk);
        let mut d = Vec::with_capacity(nq * nk);
        for qr in 0..height {
            for qc in 0..width {
                let (qrf, qcf) = (T::from_usize_lossy(qr), T::from_usize_lossy(qc));
                for &(pr, pc, _, _) in &keys {
                    let tr = PositionBiasOp::<T>::table_coord(qrf, pr, height, th);
                    let tc = PositionBiasOp::<T>::table_coord(qcf, pc, width, tw);
                    let tap = BilinearTap::new(tr, tc, th, tw);
                    let idx = tap.indices(tw);
                    let wt = tap.weights();
                    let b = (0..4).fold(T::zero(), |a, q| a + tv.data()[idx[q]].re * wt[q]);
                    d.push(Complex::new(b, T::zero()));
                    taps.push(tap);
                }
            }
        }
        if self.tracking() {
            let bits = taps.iter().fold(0u64, |h, t| h.rotate_left(5) ^ (t.r0 * 131 + t.c0) as u64);
            self.note_branch(bits);
        }
        let free = keys.iter().map(|k| (k.2, k.3)).collect();
        let v = Tensor::new(&[nq, nk], d, Kind::Real).expect("shape");
        Ok(self.record(v, &[table, offsets], Box::new(PositionBiasOp { layout, taps, free })))
    }

    /// Attention weights `softmax_j(Re<q_i, k_j> * scale + bias_ij)`.
    /// `q` is `[C, NQ...]`, `k` is `[C, NK...]`, `bias` is `[NQ, NK]`.
    pub fn attention_weights(&mut self, q: Var, k: Var, bias: Var, scale: T) -> Result<Var, AutodiffError> {
        let (qv, kv, bv) = (self.value(q), self.value(k), self.value(bias));
        let c = qv.shape()[0];
        if kv.shape()[0] != c {
            return Err(shape_err("attention_weights", format!("q {:?} vs k {:?}", qv.shape(), kv.shape())));
        }
        let nq = qv.len() / c;
        let nk = kv.len() / c;
        if bv.shape() != [nq, nk] {
            return Err(shape_err("attention_weights", format!("bias {:?}, expected [{nq}, {nk}]", bv.shape())));
        }
        let a = attention_weights_kernel(qv.data(), kv.data(), bv.data(), c, nq, nk, scale);
        let v = Tensor::new(&[nq, nk], a, Kind::Real).expect("shape");
        Ok(self.record(v, &[q, k, bias], Box::new(AttentionWeightsOp { scale, nq, nk, channels: c })))
    }

    /// `out[c, i] = sum_j a[i, j] v[c, j]`, shaped `out_shape` (`[C, ...]` with `NQ` positions).
    pub fn attend(&mut self, a: Var, v: Var, out_shape: &[usize]) -> Result<Var, AutodiffError> {
        let (av, vv) = (self.value(a), self.value(v));
        let &[nq, nk] = av.shape() else {
            return Err(shape_err("attend", format!("weights must be 2-D, got {:?}", av.shape())));
        };
        let c = vv.shape()[0];
        if vv.len() != c * nk || out_shape.iter().product::<usize>() != c * nq || out_shape[0] != c {
            return Err(shape_err("attend", format!("weights {:?}, values {:?}, out {out_shape:?}", av.shape(), vv.shape())));
        }
        let mut d = vec![zero(); c * nq];
        for ch in 0..c {
            let vrow = &vv.data()[ch * nk..(ch + 1) * nk];
            for i in 0..nq {
                let arow = &av.data()[i * nk..(i + 1) * nk];
                d[ch * nq + i] = arow.iter().zip(vrow).fold(zero(), |acc, (a, v)| acc + v * a.re);
            }
        }
        let out = Tensor::new(out_shape, d, vv.kind()).expect("shape");
        Ok(self.record(out, &[a, v], Box::new(AttendOp { nq, nk, channels: c })))
    }
}

pub(crate) fn unit_phase<T: Real>(z: Complex<T>) -> Complex<T> {
    let m = z.norm();
    if m < guard() {
        Complex::new(T::one(), T::zero())
    } else {
        z / m
    }
}

/// Softmax attention weights; rows are computed with the max-subtraction trick.
pub(crate) fn attention_weights_kernel<T: Real>(
    q: &[Complex<T>],
    k: &[Complex<T>],
    bias: &[Complex<T>],
    c: usize,
    nq: usize,
    nk: usize,
    scale: T,
) -> Vec<Complex<T>> {
    let mut s = vec![T::zero(); nq * nk];
    for ch in 0..c {
        let qrow = &q[ch * nq..(ch + 1) * nq];
        let krow = &k[ch * nk..(ch + 1) * nk];
        for (i, qv) in qrow.iter().enumerate() {
            for (o, kv) in s[i * nk..(i + 1) * nk].iter_mut().zip(krow) {
                *o += qv.re * kv.re + qv.im * kv.im;
            }
        }
    }
    let mut out = Vec::with_capacity(nq * nk);
    for i in 0..nq {
        let row = &mut s[i * nk..(i + 1) * nk];
        for (o, b) in row.iter_mut().zip(&bias[i * nk..(i + 1) * nk]) {
            *o = *o * scale + b.re;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for o in row.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        out.extend(row.iter().map(|&e| Complex::new(e / sum, T::zero())));
    }
    out
}
