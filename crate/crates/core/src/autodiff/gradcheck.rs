//! Central finite-difference verification of backward rules.

use std::fmt;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{AutodiffError, Tape, Var};
use crate::tensor::{Kind, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many real components per leaf (evenly strided);
    /// `None` checks all of them.
    pub max_components: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: FD_STEP, tolerance: FD_TOLERANCE, floor: 1e-6, max_components: None }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub index: usize,
    pub relative_error: f64,
    pub max_abs_analytic: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub leaves: Vec<LeafReport>,
    /// Components skipped because a perturbation crossed a branch point.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance && self.leaves.iter().any(|l| l.checked > 0)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let checked: usize = self.leaves.iter().map(|l| l.checked).sum();
        write!(
            f,
            "{}: max relative error {:.3e} over {} components ({} skipped) -> {}",
            self.name,
            self.max_relative_error(),
            checked,
            self.skipped,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Compares the analytic gradient of `build` with central differences.
///
/// `build` receives a fresh tape and the leaf variables (in the order of
/// `leaves`) and must return a real scalar. Components whose perturbation
/// changes the tape's branch fingerprint are skipped.
pub fn check_gradients<F>(
    name: &str,
    leaves: &[Tensor<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64), AutodiffError> {
        let mut tape = Tape::with_branch_tracking();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape.value(loss).data()[0].re, tape.branch_fingerprint()))
    };

    let mut tape = Tape::with_branch_tracking();
    let vars: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let base_print = tape.branch_fingerprint();
    let grads = tape.backward(loss)?;

    let mut values = leaves.to_vec();
    let mut skipped = 0;
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, (leaf, var)) in leaves.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*var, leaf);
        let parts = if leaf.kind() == Kind::Real { 1 } else { 2 };
        let total = leaf.len() * parts;
        let stride = cfg.max_components.map_or(1, |m| total.div_ceil(m.max(1)));
        let (mut max_diff, mut max_num, mut max_ana, mut checked) = (0.0f64, 0.0f64, 0.0f64, 0);
        for comp in (0..total).step_by(stride) {
            let (elem, imag) = (comp / parts, comp % parts == 1);
            let bump = if imag { Complex::new(0.0, cfg.step) } else { Complex::new(cfg.step, 0.0) };
            let orig = values[li].data()[elem];
            values[li].data_mut()[elem] = orig + bump;
            let (plus, p1) = eval(&values)?;
            values[li].data_mut()[elem] = orig - bump;
            let (minus, p2) = eval(&values)?;
            values[li].data_mut()[elem] = orig;
            if p1 != base_print || p2 != base_print {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[elem];
            let a = if imag { a.im } else { a.re };
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
            max_ana = max_ana.max(a.abs());
            checked += 1;
        }
        reports.push(LeafReport {
            index: li,
            relative_error: max_diff / max_num.max(max_ana).max(cfg.floor),
            max_abs_analytic: max_ana,
            checked,
        });
    }
    Ok(GradCheckReport { name: name.to_string(), leaves: reports, skipped, tolerance: cfg.tolerance })
}

/// Random tensor with i.i.d. uniform components in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], kind: Kind, scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let re = rng.random_range(-scale..scale);
            let im = if kind == Kind::Real { 0.0 } else { rng.random_range(-scale..scale) };
            Complex::new(re, im)
        })
        .collect();
    Tensor::new(shape, data, kind).expect("shape")
}

/// A named differentiable operation with random inputs, used to check every
/// primitive under several seeds.
pub struct GradCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor<f64>>,
    pub build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>>,
}

/// Reduces an arbitrary tensor to a real scalar through a fixed random
/// linear functional so every output component contributes to the check.
fn reduce(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.value(v).shape().to_vec();
    let w = random_tensor(&shape, Kind::Complex, 1.0, &mut rng);
    tape.project(v, &w)
}

/// Cases for every primitive tape operation at small random shapes.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    use std::sync::Arc;

    use crate::propagation::{OpticalConfig, PropagationPlan, Regime};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let c = Kind::Complex;
    let re = Kind::Real;
    let mut cases = Vec::new();
    macro_rules! case {
        ($name:expr, [$($leaf:expr),*], |$t:ident, $v:ident| $body:expr) => {
            cases.push(GradCase {
                name: $name,
                leaves: vec![$($leaf),*],
                build: Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| {
                    let out = $body?;
                    reduce($t, out, seed)
                }),
            });
        };
    }
    case!("add", [random_tensor(&[3, 4], c, 1.0, r), random_tensor(&[3, 4], c, 1.0, r)], |t, v| t.add(v[0], v[1]));
    case!("sub", [random_tensor(&[3, 4], c, 1.0, r), random_tensor(&[3, 4], re, 1.0, r)], |t, v| t.sub(v[0], v[1]));
    case!("mul", [random_tensor(&[5], c, 1.0, r), random_tensor(&[5], c, 1.0, r)], |t, v| t.mul(v[0], v[1]));
    case!("scale_const", [random_tensor(&[6], c, 1.0, r)], |t, v| Ok::<_, AutodiffError>(t.scale_const(v[0], -0.7)));
    case!("scale_by", [random_tensor(&[6], c, 1.0, r), random_tensor(&[1], re, 1.0, r)], |t, v| t.scale_by(v[0], v[1]));
    case!("abs", [random_tensor(&[8], c, 1.0, r)], |t, v| Ok::<_, AutodiffError>(t.abs(v[0])));
    case!("unit_phase", [random_tensor(&[8], c, 1.0, r)], |t, v| Ok::<_, AutodiffError>(t.unit_phase(v[0])));
    case!("split_relu", [random_tensor(&[10], c, 1.0, r)], |t, v| Ok::<_, AutodiffError>(t.split_relu(v[0])));
    case!("gelu", [random_tensor(&[10], re, 2.0, r)], |t, v| Ok::<_, AutodiffError>(t.gelu(v[0])));
    case!("split_re_im", [random_tensor(&[2, 3], c, 1.0, r)], |t, v| Ok::<_, AutodiffError>(t.split_re_im(v[0])));
    case!("reshape", [random_tensor(&[2, 3], c, 1.0, r)], |t, v| Ok::<_, AutodiffError>(t.reshape(v[0], &[3, 2])));
    {
        let target: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
        cases.push(GradCase {
            name: "mse",
            leaves: vec![random_tensor(&[6], re, 1.0, r)],
            build: Box::new(move |t, v| t.mse(v[0], &target)),
        });
    }
    for regime in [Regime::Asm, Regime::IrMid, Regime::IrFar] {
        let z = match regime {
            Regime::Asm => 0.002,
            Regime::IrMid => 0.004,
            Regime::IrFar => 0.02,
        };
        let cfg = OpticalConfig { width: 12, height: 8, distance: z, ..OpticalConfig::default() };
        let plan = Arc::new(PropagationPlan::<f64>::with_regime(&cfg, regime).expect("valid config"));
        let p2 = Arc::clone(&plan);
        let name = match regime {
            Regime::Asm => "propagate_asm",
            Regime::IrMid => "propagate_ir_mid",
            Regime::IrFar => "propagate_ir_far",
        };
        case!(name, [random_tensor(&[8, 12], c, 1.0, r)], |t, v| t.propagate(v[0], &plan));
        case!("adjoint_propagate", [random_tensor(&[8, 12], c, 1.0, r)], |t, v| t.adjoint_propagate(v[0], &p2));
    }
    case!(
        "conv2d",
        [random_tensor(&[4, 7, 6], c, 1.0, r), random_tensor(&[6, 2, 3, 3], c, 1.0, r)],
        |t, v| t.conv2d(v[0], v[1], 2, 1, 2)
    );
    case!(
        "conv2d_real",
        [random_tensor(&[2, 9, 9], re, 1.0, r), random_tensor(&[2, 1, 5, 5], re, 1.0, r)],
        |t, v| t.conv2d(v[0], v[1], 4, 2, 2)
    );
    case!(
        "channel_bias",
        [random_tensor(&[3, 2, 2], c, 1.0, r), random_tensor(&[3], c, 1.0, r)],
        |t, v| t.channel_bias(v[0], v[1])
    );
    case!("upsample2", [random_tensor(&[2, 3, 2], c, 1.0, r)], |t, v| t.upsample2(v[0]));
    case!(
        "layer_norm",
        [random_tensor(&[4, 3, 2], c, 1.0, r), random_tensor(&[4], c, 1.0, r), random_tensor(&[4], c, 1.0, r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
    );
    case!(
        "layer_norm_real",
        [random_tensor(&[5, 2, 2], re, 1.0, r), random_tensor(&[5], re, 1.0, r), random_tensor(&[5], re, 1.0, r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
    );
    case!(
        "deform_sample",
        [random_tensor(&[2, 8, 8], c, 1.0, r), random_tensor(&[2, 2, 2], re, 1.5, r)],
        |t, v| t.deform_sample(v[0], v[1], 4)
    );
    case!(
        "position_bias",
        [random_tensor(&[5, 5], re, 1.0, r), random_tensor(&[2, 2, 2], re, 1.5, r)],
        |t, v| t.position_bias(v[0], v[1], 8, 8, 4)
    );
    case!(
        "attention_weights",
        [random_tensor(&[3, 6], c, 1.0, r), random_tensor(&[3, 4], c, 1.0, r), random_tensor(&[6, 4], re, 0.5, r)],
        |t, v| t.attention_weights(v[0], v[1], v[2], 0.6)
    );
    case!(
        "attend",
        [random_tensor(&[6, 4], re, 1.0, r), random_tensor(&[3, 4], c, 1.0, r)],
        |t, v| t.attend(v[0], v[1], &[3, 2, 3])
    );
    cases
}
