use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::{self, WeightsError};
use crate::scalar::Real;
use crate::tensor::{Kind, Tensor};

/// Architecture hyperparameters of one denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PcdConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Side length of the relative-position bias table.
    pub table_size: usize,
}

impl Default for PcdConfig {
    fn default() -> Self {
        Self { channels: 32, blocks: 1, table_size: 15 }
    }
}

pub const COMPLEX_INIT_STD: f64 = 0.02;
pub const TABLE_INIT_STD: f64 = 0.01;
pub const FFN_EXPANSION: usize = 4;
pub const OFFSET_KERNEL: usize = 9;

/// Parameters of one transformer block, generic over the parameter handle.
#[derive(Clone, Debug, PartialEq)]
pub struct CdatParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub offset_dw: P,
    pub offset_ln_gamma: P,
    pub offset_ln_beta: P,
    pub offset_proj: P,
    pub bias_table: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub ffn_w1: P,
    pub ffn_b1: P,
    pub ffn_w2: P,
    pub ffn_b2: P,
}

/// Parameters of the full denoiser, generic over the parameter handle
/// (`Tensor<T>` for stored weights, `Var` while recording on a tape).
#[derive(Clone, Debug, PartialEq)]
pub struct PcdParams<P> {
    pub fem1: P,
    pub fem2: P,
    pub blocks: Vec<CdatParams<P>>,
    pub pirm1: P,
    pub pirm2: P,
}

impl<P> CdatParams<P> {
    fn entries(&self) -> [(&'static str, &P); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.offset.dw", &self.offset_dw),
            ("attn.offset.ln.gamma", &self.offset_ln_gamma),
            ("attn.offset.ln.beta", &self.offset_ln_beta),
            ("attn.offset.proj", &self.offset_proj),
            ("attn.bias_table", &self.bias_table),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.w2", &self.ffn_w2),
            ("ffn.b2", &self.ffn_b2),
        ]
    }

    pub(crate) fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> CdatParams<Q> {
        let mut g = |name: &str, p: &P| f(&format!("{prefix}{name}"), p);
        CdatParams {
            ln1_gamma: g("ln1.gamma", &self.ln1_gamma),
            ln1_beta: g("ln1.beta", &self.ln1_beta),
            wq: g("attn.wq", &self.wq),
            wk: g("attn.wk", &self.wk),
            wv: g("attn.wv", &self.wv),
            offset_dw: g("attn.offset.dw", &self.offset_dw),
            offset_ln_gamma: g("attn.offset.ln.gamma", &self.offset_ln_gamma),
            offset_ln_beta: g("attn.offset.ln.beta", &self.offset_ln_beta),
            offset_proj: g("attn.offset.proj", &self.offset_proj),
            bias_table: g("attn.bias_table", &self.bias_table),
            ln2_gamma: g("ln2.gamma", &self.ln2_gamma),
            ln2_beta: g("ln2.beta", &self.ln2_beta),
            ffn_w1: g("ffn.w1", &self.ffn_w1),
            ffn_b1: g("ffn.b1", &self.ffn_b1),
            ffn_w2: g("ffn.w2", &self.ffn_w2),
            ffn_b2: g("ffn.b2", &self.ffn_b2),
        }
    }
}

impl<P> PcdParams<P> {
    /// Every parameter with its qualified name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("fem.conv1".to_string(), &self.fem1), ("fem.conv2".to_string(), &self.fem2)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.entries().into_iter().map(|(n, p)| (format!("cdat{i}.{n}"), p)));
        }
        out.push(("pirm.conv1".to_string(), &self.pirm1));
        out.push(("pirm.conv2".to_string(), &self.pirm2));
        out
    }

    /// Applies `f(name, param)` to every parameter, preserving structure.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> PcdParams<Q> {
        PcdParams {
            fem1: f("fem.conv1", &self.fem1),
            fem2: f("fem.conv2", &self.fem2),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("cdat{i}."), &mut f)).collect(),
            pirm1: f("pirm.conv1", &self.pirm1),
            pirm2: f("pirm.conv2", &self.pirm2),
        }
    }

    pub fn len(&self) -> usize {
        4 + 16 * self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Shape and kind of every parameter for a configuration.
pub fn layout(cfg: &PcdConfig) -> PcdParams<(Vec<usize>, Kind)> {
    let c = cfg.channels;
    let cx = (Kind::Complex, Kind::Real);
    let block = || CdatParams {
        ln1_gamma: (vec![c], cx.0),
        ln1_beta: (vec![c], cx.0),
        wq: (vec![c, c, 1, 1], cx.0),
        wk: (vec![c, c, 1, 1], cx.0),
        wv: (vec![c, c, 1, 1], cx.0),
        offset_dw: (vec![2 * c, 1, OFFSET_KERNEL, OFFSET_KERNEL], cx.1),
        offset_ln_gamma: (vec![2 * c], cx.1),
        offset_ln_beta: (vec![2 * c], cx.1),
        offset_proj: (vec![2, 2 * c, 1, 1], cx.1),
        bias_table: (vec![cfg.table_size, cfg.table_size], cx.1),
        ln2_gamma: (vec![c], cx.0),
        ln2_beta: (vec![c], cx.0),
        ffn_w1: (vec![FFN_EXPANSION * c, c, 1, 1], cx.0),
        ffn_b1: (vec![FFN_EXPANSION * c], cx.0),
        ffn_w2: (vec![c, FFN_EXPANSION * c, 1, 1], cx.0),
        ffn_b2: (vec![c], cx.0),
    };
    PcdParams {
        fem1: (vec![c, 1, 3, 3], cx.0),
        fem2: (vec![c, c, 3, 3], cx.0),
        blocks: (0..cfg.blocks).map(|_| block()).collect(),
        pirm1: (vec![c, c, 3, 3], cx.0),
        pirm2: (vec![1, c, 3, 3], cx.0),
    }
}

/// Trainable weights of one denoiser stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PcdWeights<T: Real> {
    pub config: PcdConfig,
    pub params: PcdParams<Tensor<T>>,
}

enum InitRule {
    Ones,
    Zeros,
    Normal(f64),
}

fn init_rule(name: &str) -> InitRule {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "gamma" {
        InitRule::Ones
    } else if matches!(leaf, "beta" | "b1" | "b2") || name == "pirm.conv2" {
        InitRule::Zeros
    } else if leaf == "bias_table" {
        InitRule::Normal(TABLE_INIT_STD)
    } else {
        InitRule::Normal(COMPLEX_INIT_STD)
    }
}

impl<T: Real> PcdWeights<T> {
    /// Random initialization: kernels i.i.d. normal (std 0.02 per component),
    /// bias table std 0.01, layer-norm affines at identity, biases and the
    /// final reconstruction kernel zero, so the denoiser starts as the identity.
    pub fn init(config: PcdConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config).map(|name, (shape, kind)| {
            let n: usize = shape.iter().product();
            let data = match init_rule(name) {
                InitRule::Ones => vec![Complex::new(T::one(), T::zero()); n],
                InitRule::Zeros => vec![Complex::new(T::zero(), T::zero()); n],
                InitRule::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n)
                        .map(|_| {
                            let re = normal.sample(&mut rng);
                            let im = if *kind == Kind::Complex { normal.sample(&mut rng) } else { 0.0 };
                            Complex::new(T::lit(re), T::lit(im))
                        })
                        .collect()
                }
            };
            Tensor::new(shape, data, *kind).expect("layout shape")
        });
        Self { config, params }
    }

    /// Number of real trainable scalars (a complex weight counts twice).
    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.real_dof()).sum()
    }

    /// Number of stored weights, counting a complex weight once.
    pub fn weight_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> PcdWeights<U> {
        PcdWeights { config: self.config, params: self.params.map(|_, t| t.cast()) }
    }

    pub fn is_finite(&self) -> bool {
        self.params.named().iter().all(|(_, t)| t.is_finite())
    }
}

fn stage_prefix(k: usize) -> String {
    format!("stage{k}.")
}

/// Flattens per-stage weights into named `f32` tensors.
pub fn to_named<T: Real>(stages: &[PcdWeights<T>]) -> Vec<(String, Tensor<f32>)> {
    stages
        .iter()
        .enumerate()
        .flat_map(|(k, w)| {
            w.params.named().into_iter().map(move |(n, t)| (format!("{}{n}", stage_prefix(k)), t.cast::<f32>()))
        })
        .collect()
}

/// Rebuilds per-stage weights from named tensors, checking every tensor
/// against the layout implied by `config`.
pub fn from_named<T: Real>(
    tensors: Vec<(String, Tensor<f32>)>,
    config: &PcdConfig,
    stages: usize,
) -> Result<Vec<PcdWeights<T>>, WeightsError> {
    let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (n, t) in tensors {
        by_name.insert(n, t);
    }
    let expected = layout(config);
    let mut out = Vec::with_capacity(stages);
    for k in 0..stages {
        let prefix = stage_prefix(k);
        let mut err = None;
        let params = expected.map(|name, (shape, kind)| {
            let full = format!("{prefix}{name}");
            match by_name.remove(&full) {
                None => {
                    err.get_or_insert(WeightsError::Missing(full));
                    Tensor::zeros(shape, *kind)
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    err.get_or_insert(WeightsError::Dimension {
                        name: full,
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    });
                    Tensor::zeros(shape, *kind)
                }
                Some(t) if t.kind() != *kind => {
                    err.get_or_insert(WeightsError::Kind { name: full, expected: *kind, found: t.kind() });
                    Tensor::zeros(shape, *kind)
                }
                Some(t) => t.cast(),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        out.push(PcdWeights { config: *config, params });
    }
    if let Some(name) = by_name.into_keys().next() {
        return Err(WeightsError::Unknown(name));
    }
    Ok(out)
}

/// Infers the architecture and stage count from stored tensor names and shapes.
pub fn infer_config(tensors: &[(String, Tensor<f32>)]) -> Result<(PcdConfig, usize), WeightsError> {
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let fem = find("stage0.fem.conv1").ok_or_else(|| WeightsError::Missing("stage0.fem.conv1".into()))?;
    let channels = fem.shape().first().copied().unwrap_or(0);
    let mut stages = 0;
    while find(&format!("{}fem.conv1", stage_prefix(stages))).is_some() {
        stages += 1;
    }
    let mut blocks = 0;
    while find(&format!("stage0.cdat{blocks}.ln1.gamma")).is_some() {
        blocks += 1;
    }
    let table_size = match find("stage0.cdat0.attn.bias_table") {
        Some(t) => t.shape().first().copied().unwrap_or(0),
        None => PcdConfig::default().table_size,
    };
    Ok((PcdConfig { channels, blocks, table_size }, stages))
}

/// Writes per-stage weights as a CGHW file.
pub fn save_weights<T: Real>(path: &Path, stages: &[PcdWeights<T>]) -> Result<(), WeightsError> {
    io::write_file(path, &to_named(stages))
}

/// Reads a CGHW file, inferring architecture and stage count.
pub fn load_weights<T: Real>(path: &Path) -> Result<Vec<PcdWeights<T>>, WeightsError> {
    let tensors = io::read_file(path)?;
    let (config, stages) = infer_config(&tensors)?;
    from_named(tensors, &config, stages)
}

/// Reads a CGHW file that must match `config` and contain `stages` stages.
pub fn load_weights_checked<T: Real>(
    path: &Path,
    config: &PcdConfig,
    stages: usize,
) -> Result<Vec<PcdWeights<T>>, WeightsError> {
    from_named(io::read_file(path)?, config, stages)
}
