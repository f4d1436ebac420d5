//! Denoiser forward pass recorded on a tape. Inference and training share
//! this single implementation.

use super::weights::{CdatParams, PcdParams, PcdWeights};
use crate::autodiff::{AttentionGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::LAYER_NORM_EPS;

/// Spatial factor by which the input must be divisible: two stride-2
/// convolutions followed by 8x8 attention cells.
pub const SIZE_MULTIPLE: usize = 32;

/// Puts every weight on the tape, as a trainable leaf or a constant.
pub fn load_params<T: Real>(tape: &mut Tape<T>, weights: &PcdWeights<T>, trainable: bool) -> PcdParams<Var> {
    weights.params.map(|_, t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height % SIZE_MULTIPLE != 0 || width % SIZE_MULTIPLE != 0 || height == 0 || width == 0 {
        let up = |n: usize| n.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
        return Err(Error::Indivisible { height, width, suggested_height: up(height), suggested_width: up(width) });
    }
    Ok(())
}

/// Feature extraction: `[1, H, W]` to `[C, H/4, W/4]`.
pub fn fem<T: Real>(tape: &mut Tape<T>, v: Var, p: &PcdParams<Var>) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let &[_, h, w] = shape.as_slice() else {
        return Err(Error::ShapeMismatch(format!("expected [1, H, W], got {shape:?}")));
    };
    check_divisible(h, w)?;
    let a = tape.conv2d(v, p.fem1, 2, 1, 1)?;
    let a = tape.split_relu(a);
    Ok(tape.conv2d(a, p.fem2, 2, 1, 1)?)
}

/// Offset sub-network: `[C, h, w]` complex queries to `[2, h/8, w/8]` real offsets.
pub fn offsets<T: Real>(tape: &mut Tape<T>, q: Var, b: &CdatParams<Var>) -> Result<Var> {
    let c2 = 2 * tape.value(q).shape()[0];
    let r = tape.split_re_im(q);
    let cell = AttentionGeometry::DEFAULT_CELL;
    let d = tape.conv2d(r, b.offset_dw, cell, 9 / 2, c2)?;
    let n = tape.layer_norm(d, b.offset_ln_gamma, b.offset_ln_beta, T::lit(LAYER_NORM_EPS))?;
    let g = tape.gelu(n);
    Ok(tape.conv2d(g, b.offset_proj, 1, 0, 1)?)
}

/// Intermediate values of one deformable self-attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CdsaVars {
    pub output: Var,
    /// Row-stochastic `[N_Q, N_K]` attention weights.
    pub attention: Var,
    pub offsets: Var,
    pub bias: Var,
}

/// Complex deformable self-attention on `[C, h, w]`. With `frozen_offsets`
/// the offset sub-network is bypassed.
pub fn cdsa<T: Real>(tape: &mut Tape<T>, f: Var, b: &CdatParams<Var>, frozen_offsets: Option<Var>) -> Result<CdsaVars> {
    let shape = tape.value(f).shape().to_vec();
    let &[c, h, w] = shape.as_slice() else {
        return Err(Error::ShapeMismatch(format!("expected [C, h, w], got {shape:?}")));
    };
    let cell = AttentionGeometry::DEFAULT_CELL;
    if h % cell != 0 || w % cell != 0 {
        return Err(Error::ShapeMismatch(format!("feature map {h}x{w} is not divisible by {cell}")));
    }
    let q = tape.conv2d(f, b.wq, 1, 0, 1)?;
    let off = match frozen_offsets {
        Some(o) => o,
        None => offsets(tape, q, b)?,
    };
    let sampled = tape.deform_sample(f, off, cell)?;
    let k = tape.conv2d(sampled, b.wk, 1, 0, 1)?;
    let v = tape.conv2d(sampled, b.wv, 1, 0, 1)?;
    let bias = tape.position_bias(b.bias_table, off, h, w, cell)?;
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let attention = tape.attention_weights(q, k, bias, scale)?;
    let output = tape.attend(attention, v, &shape)?;
    Ok(CdsaVars { output, attention, offsets: off, bias })
}

/// Complex feed-forward network: per-location `C -> 4C -> C` with split-ReLU.
pub fn cffn<T: Real>(tape: &mut Tape<T>, f: Var, b: &CdatParams<Var>) -> Result<Var> {
    let a = tape.conv2d(f, b.ffn_w1, 1, 0, 1)?;
    let a = tape.channel_bias(a, b.ffn_b1)?;
    let a = tape.split_relu(a);
    let a = tape.conv2d(a, b.ffn_w2, 1, 0, 1)?;
    Ok(tape.channel_bias(a, b.ffn_b2)?)
}

/// Transformer block with pre-normalization and residual shortcuts.
pub fn cdat<T: Real>(tape: &mut Tape<T>, f: Var, b: &CdatParams<Var>) -> Result<Var> {
    let eps = T::lit(LAYER_NORM_EPS);
    let n = tape.layer_norm(f, b.ln1_gamma, b.ln1_beta, eps)?;
    let attn = cdsa(tape, n, b, None)?.output;
    let f1 = tape.add(f, attn)?;
    let n = tape.layer_norm(f1, b.ln2_gamma, b.ln2_beta, eps)?;
    let ffn = cffn(tape, n, b)?;
    Ok(tape.add(f1, ffn)?)
}

/// Phase-image recovery: `[C, H/4, W/4]` back to `[1, H, W]`, plus the input.
pub fn pirm<T: Real>(tape: &mut Tape<T>, g: Var, v: Var, p: &PcdParams<Var>) -> Result<Var> {
    let a = tape.upsample2(g)?;
    let a = tape.conv2d(a, p.pirm1, 1, 1, 1)?;
    let a = tape.split_relu(a);
    let a = tape.upsample2(a)?;
    let a = tape.conv2d(a, p.pirm2, 1, 1, 1)?;
    Ok(tape.add(v, a)?)
}

/// Full denoiser on a `[1, H, W]` field.
pub fn pcd<T: Real>(tape: &mut Tape<T>, v: Var, p: &PcdParams<Var>) -> Result<Var> {
    let mut f = fem(tape, v, p)?;
    for b in &p.blocks {
        f = cdat(tape, f, b)?;
    }
    pirm(tape, f, v, p)
}
