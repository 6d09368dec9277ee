//! Dense double-precision tensors with reverse-mode differentiation.
//!
//! Computations are recorded on a [`Tape`] and differentiated by
//! [`Tape::backward`]. [`LayerSpec`] stacks cover the feed-forward layers used
//! by the refinement network; [`grad_check`] compares analytic gradients with
//! central differences.

mod layers;
mod params;
mod tape;
mod tensor;

pub use layers::{
    backward, forward, grad_check, grad_check_fn, init_layers, relative_error, sgd_step, weight_penalty, Forward, GradReport,
    Gradients, LayerSpec, GRAD_CHECK_FLOOR,
};
pub use params::{ParamEntry, ParamKind, ParamStore};
pub use tape::{apply_running_updates, quat_matrix, Grads, Mode, RunningUpdate, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
