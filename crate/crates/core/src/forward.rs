//! The explicit forward scheme: each step pushes points through `∇F_ξ`.

use jkoflow_autodiff::Var;

use crate::cloud::PointCloud;
use crate::energy::{gradient_points, Mlp, Potential};
use crate::error::Result;

/// Replaces every point `x` by `∇F(x)`.
pub fn forward_step(f: &dyn Potential, cloud: &PointCloud) -> Result<PointCloud> {
    gradient_points(f, cloud)
}

/// `∇F(x)` on the tape, differentiable with respect to the parameters.
pub fn forward_step_on_tape(f: &dyn Potential, params: &[Var], x: &Var) -> Result<Var> {
    let tape = x.tape();
    let xl = if x.requires_grad() {
        x.clone()
    } else {
        tape.leaf(x.value().clone())
    };
    let s = f.eval_with(params, &xl)?.sum()?;
    Ok(tape.grad(&s, &[&xl], true)?.remove(0))
}

/// `F_ξ` shares the energy network's architecture.
pub type ForwardPotential = Mlp;
