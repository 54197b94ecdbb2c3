//! Automatic differentiation: a scalar reverse-mode tape, forward-mode
//! tangents that nest over it, and the conditioner network.

mod dual;
mod mlp;
mod scalar;
mod tape;

pub use dual::{input_derivative, Dual, ScalarFn};
pub use mlp::{Activation, BatchTrace, Mlp};
pub use scalar::{cumsum, softmax, Scalar};
pub use tape::{gradient, Tape, Var};
