//! Phase-domain complex-valued denoiser.
//!
//! `v -> FEM -> CDAT blocks -> PIRM -> v + residual`, where FEM downsamples by
//! 4 with two stride-2 complex convolutions, each CDAT block is deformable
//! self-attention plus a feed-forward network with residual shortcuts, and
//! PIRM upsamples back to the input grid.
//!
//! The functions here take plain fields and weights; the recorded versions
//! used for training live in [`graph`].

pub mod graph;
mod io;
mod weights;

use num_complex::Complex;

pub use crate::autodiff::AttentionGeometry;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{ComplexField, FeatureMap, Kind, Tensor};
pub use graph::{check_divisible, SIZE_MULTIPLE};
pub use io::{decode, encode, WeightsError, FORMAT_VERSION, MAGIC};
pub use weights::{
    from_named, infer_config, layout, load_weights, load_weights_checked, save_weights, to_named, CdatParams,
    PcdConfig, PcdParams, PcdWeights, COMPLEX_INIT_STD, FFN_EXPANSION, OFFSET_KERNEL, TABLE_INIT_STD,
};

fn constants<T: Real>(tape: &mut Tape<T>, b: &CdatParams<Tensor<T>>) -> CdatParams<Var> {
    b.map("", &mut |_, t| tape.constant(t.clone()))
}

fn field_var<T: Real>(tape: &mut Tape<T>, v: &ComplexField<T>) -> Var {
    let (h, w) = v.dims();
    tape.constant(Tensor::new(&[1, h, w], v.data().to_vec(), Kind::Complex).expect("field shape"))
}

fn to_field<T: Real>(t: &Tensor<T>, pitch: T) -> Result<ComplexField<T>> {
    let s = t.shape();
    ComplexField::new(s[s.len() - 2], s[s.len() - 1], pitch, t.data().to_vec())
}

/// Feature extraction: `H x W` field to a `C x H/4 x W/4` feature map.
pub fn fem_forward<T: Real>(v: &ComplexField<T>, weights: &PcdWeights<T>) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, weights, false);
    let x = field_var(&mut tape, v);
    let f = graph::fem(&mut tape, x, &p)?;
    FeatureMap::from_tensor(tape.value(f))
}

/// Real `[2, h/8, w/8]` offsets `(row, col)` in feature-map pixels.
pub fn compute_offsets<T: Real>(q: &FeatureMap<T>, block: &CdatParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = constants(&mut tape, block);
    let qv = tape.constant(q.to_tensor());
    let o = graph::offsets(&mut tape, qv, &b)?;
    Ok(tape.value(o).clone())
}

/// Bilinear samples of `f` at the reference grid displaced by `offsets`.
pub fn deformable_downsample<T: Real>(f: &FeatureMap<T>, offsets: &Tensor<T>) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.to_tensor());
    let ov = tape.constant(offsets.clone());
    let s = tape.deform_sample(fv, ov, AttentionGeometry::DEFAULT_CELL)?;
    FeatureMap::from_tensor(tape.value(s))
}

/// `N_Q x N_K` real bias read from `table` at each query-to-key displacement.
pub fn relative_position_bias<T: Real>(geometry: &AttentionGeometry, table: &Tensor<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let tv = tape.constant(table.clone());
    let ov = tape.constant(offsets.clone());
    let b = tape.position_bias(tv, ov, geometry.height, geometry.width, geometry.cell)?;
    Ok(tape.value(b).clone())
}

/// Result of one deformable self-attention evaluation.
#[derive(Clone, Debug)]
pub struct CdsaOutput<T: Real> {
    pub output: FeatureMap<T>,
    pub attention: Tensor<T>,
    pub offsets: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn cdsa_forward<T: Real>(f: &FeatureMap<T>, block: &CdatParams<Tensor<T>>) -> Result<FeatureMap<T>> {
    Ok(cdsa_detailed(f, block, None)?.output)
}

/// Deformable self-attention exposing its attention matrix; with
/// `frozen_offsets` the offset network is bypassed.
pub fn cdsa_detailed<T: Real>(
    f: &FeatureMap<T>,
    block: &CdatParams<Tensor<T>>,
    frozen_offsets: Option<&Tensor<T>>,
) -> Result<CdsaOutput<T>> {
    let mut tape = Tape::new();
    let b = constants(&mut tape, block);
    let fv = tape.constant(f.to_tensor());
    let frozen = frozen_offsets.map(|o| tape.constant(o.clone()));
    let r = graph::cdsa(&mut tape, fv, &b, frozen)?;
    Ok(CdsaOutput {
        output: FeatureMap::from_tensor(tape.value(r.output))?,
        attention: tape.value(r.attention).clone(),
        offsets: tape.value(r.offsets).clone(),
        bias: tape.value(r.bias).clone(),
    })
}

pub fn cffn_forward<T: Real>(f: &FeatureMap<T>, block: &CdatParams<Tensor<T>>) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let b = constants(&mut tape, block);
    let fv = tape.constant(f.to_tensor());
    let o = graph::cffn(&mut tape, fv, &b)?;
    FeatureMap::from_tensor(tape.value(o))
}

pub fn cdat_forward<T: Real>(f: &FeatureMap<T>, block: &CdatParams<Tensor<T>>) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let b = constants(&mut tape, block);
    let fv = tape.constant(f.to_tensor());
    let o = graph::cdat(&mut tape, fv, &b)?;
    FeatureMap::from_tensor(tape.value(o))
}

/// Recovery module: `C x H/4 x W/4` features plus the input field `v`.
pub fn pirm_forward<T: Real>(g: &FeatureMap<T>, v: &ComplexField<T>, weights: &PcdWeights<T>) -> Result<ComplexField<T>> {
    let (h, w) = v.dims();
    if g.height() * 4 != h || g.width() * 4 != w {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} do not match a {h}x{w} field",
            g.height(),
            g.width()
        )));
    }
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, weights, false);
    let gv = tape.constant(g.to_tensor());
    let x = field_var(&mut tape, v);
    let o = graph::pirm(&mut tape, gv, x, &p)?;
    to_field(tape.value(o), v.pitch())
}

/// The full denoiser.
pub fn pcd_forward<T: Real>(v: &ComplexField<T>, weights: &PcdWeights<T>) -> Result<ComplexField<T>> {
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, weights, false);
    let x = field_var(&mut tape, v);
    let o = graph::pcd(&mut tape, x, &p)?;
    to_field(tape.value(o), v.pitch())
}

fn pointwise<T: Real>(f: &FeatureMap<T>, kernel: &Tensor<T>) -> Vec<Complex<T>> {
    let (c, n) = (f.channels(), f.height() * f.width());
    let mut out = vec![Complex::new(T::zero(), T::zero()); c * n];
    for o in 0..c {
        let row = &mut out[o * n..(o + 1) * n];
        for i in 0..c {
            let k = kernel.data()[o * c + i];
            for (r, x) in row.iter_mut().zip(&f.data()[i * n..(i + 1) * n]) {
                *r += k * x;
            }
        }
    }
    out
}

/// Dense global self-attention over all `N_Q` positions with the block's
/// query/key/value projections and no bias. Rows are streamed so memory stays
/// `O(N_Q C)` while time is `O(N_Q^2 C)`. Serves as the scaling reference.
pub fn global_attention_reference<T: Real>(f: &FeatureMap<T>, block: &CdatParams<Tensor<T>>) -> Result<FeatureMap<T>> {
    let (c, n) = (f.channels(), f.height() * f.width());
    if block.wq.shape() != [c, c, 1, 1] {
        return Err(Error::ShapeMismatch(format!("{c} channels with projection {:?}", block.wq.shape())));
    }
    let q = pointwise(f, &block.wq);
    let k = pointwise(f, &block.wk);
    let v = pointwise(f, &block.wv);
    // position-major copies for contiguous inner loops
    let transpose = |a: &[Complex<T>]| -> Vec<Complex<T>> {
        let mut t = vec![Complex::new(T::zero(), T::zero()); c * n];
        for ch in 0..c {
            for j in 0..n {
                t[j * c + ch] = a[ch * n + j];
            }
        }
        t
    };
    let (qt, kt, vt) = (transpose(&q), transpose(&k), transpose(&v));
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let mut scores = vec![T::zero(); n];
    let mut out = vec![Complex::new(T::zero(), T::zero()); c * n];
    let mut acc = vec![Complex::new(T::zero(), T::zero()); c];
    for i in 0..n {
        let qi = &qt[i * c..(i + 1) * c];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &kt[j * c..(j + 1) * c];
            let mut dot = T::zero();
            for (a, b) in qi.iter().zip(kj) {
                dot += a.re * b.re + a.im * b.im;
            }
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut sum = T::zero();
        acc.iter_mut().for_each(|a| *a = Complex::new(T::zero(), T::zero()));
        for (j, s) in scores.iter().enumerate() {
            let e = (*s - max).exp();
            sum += e;
            for (a, b) in acc.iter_mut().zip(&vt[j * c..(j + 1) * c]) {
                *a += b * e;
            }
        }
        for (ch, a) in acc.iter().enumerate() {
            out[ch * n + i] = a / sum;
        }
    }
    FeatureMap::new(c, f.height(), f.width(), out)
}
