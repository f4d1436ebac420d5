use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::{Kind, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("operation `{0}` has no backward rule")]
    NoBackwardRule(&'static str),
    #[error("loss must be a real scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values an [`Op`] sees during the backward sweep.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// A recorded differentiable operation.
///
/// Gradients follow the conjugate-cotangent convention: for a real loss `L`
/// and a complex value `z`, the gradient is `dL/dRe(z) + i dL/dIm(z)`
/// (that is, `2 dL/d conj(z)`). For real values it is the ordinary derivative.
pub trait Op<T: Real> {
    fn name(&self) -> &'static str;

    /// Maps the output gradient to one gradient per input (`None` when not needed).
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Rule<T: Real> {
    Leaf,
    Op(Box<dyn Op<T>>),
    Opaque(&'static str),
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Rule<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// reverse topological sweep.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    track_branches: bool,
    branch_hash: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track_branches: false, branch_hash: 0xcbf2_9ce4_8422_2325 }
    }

    /// A tape that fingerprints every branch decision (ReLU signs, clamps,
    /// interpolation cells, magnitude guards). Finite-difference checks compare
    /// fingerprints to detect perturbations that cross a non-smooth point.
    pub fn with_branch_tracking() -> Self {
        Self { track_branches: true, ..Self::new() }
    }

    pub fn branch_fingerprint(&self) -> u64 {
        self.branch_hash
    }

    pub(crate) fn tracking(&self) -> bool {
        self.track_branches
    }

    pub(crate) fn note_branch(&mut self, bits: u64) {
        self.branch_hash = (self.branch_hash ^ bits).wrapping_mul(0x0100_0000_01b3);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), Rule::Leaf, true)
    }

    /// A fixed input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), Rule::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the output of a differentiable operation.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Box<dyn Op<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs.to_vec(), Rule::Op(op), requires_grad)
    }

    /// Records a value computed by an operation without a backward rule.
    /// Differentiating through it is an error.
    pub fn record_opaque(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs.to_vec(), Rule::Opaque(name), requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, inputs: Vec<Var>, rule: Rule<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs, rule, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a real scalar `loss`, returning gradients for every
    /// leaf created with [`leaf`](Self::leaf).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 || !loss_node.value.is_real() {
            return Err(AutodiffError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()).reshaped(loss_node.value.shape()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(mut grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.value.kind() == Kind::Real {
                grad.project_real();
            }
            match &node.rule {
                Rule::Leaf => leaves[idx] = Some(grad),
                Rule::Opaque(name) => return Err(AutodiffError::NoBackwardRule(name)),
                Rule::Op(op) => {
                    let ctx = BackwardCtx {
                        inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                        output: &node.value,
                        needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                    };
                    let input_grads = op.backward(&ctx, &grad);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                    for (input, g) in node.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(
                            g.shape(),
                            self.nodes[input.0].value.shape(),
                            "gradient shape from {}",
                            op.name()
                        );
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape(), like.kind()))
    }
}
