//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
pub mod op_cases;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, scalar_fn, GradCheck};
pub use params::{Bound, NamedTensor, ParamId, ParamStore};
pub(crate) use tape::sigmoid;
pub use tape::{softmax_rows, Gradients, OpRecord, Tape, Var};
pub use tensor::Tensor;

/// `x · Wᵀ (+ b)` for a weight stored as `out × in`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> crate::Result<Var<'t>> {
    let y = x.matmul(weight.t())?;
    match bias {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

/// Value-level sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
