//! Minimal dense-tensor engine with exact reverse-mode gradients.

mod check;
mod graph;
mod squash;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{GradientMap, Graph, ParamId, Var};
pub use squash::SquashKind;
pub use tensor::{Init, Precision, Real, Tensor};

use crate::error::{Error, Result};

/// The core primitive catalogue, for callers that select an operation at
/// runtime. Each variant forwards to the matching [`Graph`] method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv1dValid,
    Relu,
    Add,
    Scale(f64),
    L2Norm { axis: usize },
    Concat { axis: usize },
    Mean { axis: usize },
    ElementwiseMul,
}

impl Primitive {
    fn arity(self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Conv1dValid
            | Primitive::Add
            | Primitive::ElementwiseMul => Some(2),
            Primitive::Relu
            | Primitive::Scale(_)
            | Primitive::L2Norm { .. }
            | Primitive::Mean { .. } => Some(1),
            Primitive::Concat { .. } => None,
        }
    }
}

pub fn apply_primitive<F: Real>(g: &mut Graph<F>, kind: Primitive, inputs: &[Var]) -> Result<Var> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::Contract(format!(
                "{kind:?} takes {n} inputs, got {}",
                inputs.len()
            )));
        }
    }
    match kind {
        Primitive::MatMul => g.matmul(inputs[0], inputs[1]),
        Primitive::Conv1dValid => g.conv1d_valid(inputs[0], inputs[1]),
        Primitive::Relu => Ok(g.relu(inputs[0])),
        Primitive::Add => g.add(inputs[0], inputs[1]),
        Primitive::Scale(c) => Ok(g.scale(inputs[0], c)),
        Primitive::L2Norm { axis } => g.l2_norm(inputs[0], axis),
        Primitive::Concat { axis } => g.concat(inputs, axis),
        Primitive::Mean { axis } => g.mean(inputs[0], axis),
        Primitive::ElementwiseMul => g.elementwise_mul(inputs[0], inputs[1]),
    }
}
