//! Dense tensors and reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::softmax_in_place;

/// Epsilon inside the rmsnorm square root.
pub const RMS_EPS: f64 = 1e-6;

/// SwiGLU feed-forward: `w_down · (silu(w_gate·x) ⊙ (w_up·x))` applied row-wise
/// to `x: [T×d]`. Weights are stored `[out×in]`.
pub fn swiglu_ffn<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
) -> crate::Result<Var> {
    let gate = tape.matmul_t(x, w_gate)?;
    let up = tape.matmul_t(x, w_up)?;
    let act = tape.silu(gate);
    let hidden = tape.mul(act, up)?;
    tape.matmul_t(hidden, w_down)
}

/// Maps borrowed parameter tensors to their leaf on a tape so each tensor
/// enters the graph at most once, and only if it is actually used.
#[derive(Default)]
pub struct ParamBindings {
    vars: std::collections::HashMap<usize, Var>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<'a, F: Scalar>(&mut self, tape: &mut Tape<'a, F>, tensor: &'a Tensor<F>) -> Var {
        let key = tensor as *const Tensor<F> as usize;
        *self.vars.entry(key).or_insert_with(|| tape.param(tensor))
    }

    /// Leaf for `tensor`, if it took part in the forward pass.
    pub fn get<F: Scalar>(&self, tensor: &Tensor<F>) -> Option<Var> {
        self.vars
            .get(&(tensor as *const Tensor<F> as usize))
            .copied()
    }
}
