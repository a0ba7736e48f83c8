//! Differentiable building blocks with hand-written backward passes.
//!
//! Layers own their parameters as [`Tensor`]s and accumulate gradients into
//! them during `backward`. Forward passes return a run record holding the
//! intermediates the backward pass needs; a layer is never left holding
//! per-example state, so a frozen instance can be shared across threads for
//! inference.

mod adam;
mod affine;
mod attention;
mod gradcheck;
pub(crate) mod linalg;
mod loss;
mod lstm;
pub(crate) mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState, DecayRule};
pub use affine::Affine;
pub use attention::{AttentionRun, SelfAttention};
pub use gradcheck::{check_gradients, grad_check, relative_error, Coordinates, GradCheckReport};
pub use loss::{cross_entropy, softmax, weighted_cross_entropy, LossOutput};
pub use lstm::{BiLstm, BiLstmRun, LstmCell};
pub use tensor::{Params, Tensor};
