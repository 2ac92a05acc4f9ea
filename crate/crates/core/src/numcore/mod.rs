//! Small differentiable-numerics kernel: one-hidden-layer networks with
//! closed-form input derivatives, a reverse-accumulation tape and Adam.

mod adam;
mod gradcheck;
mod mlp;
mod tape;

pub use adam::{AdamState, ParamSet};
pub use gradcheck::{grad_check, rel_err, GradCheck};
pub use mlp::{sigmoid, softplus, softplus_inv, Mlp1h, MlpVars};
pub use tape::{tril_dim, tril_index, Adjoints, KernelPart, Tape, Var};
