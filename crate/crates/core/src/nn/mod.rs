//! Dense tensors, tape-based reverse-mode gradients, layers and optimizers.

mod kernels;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
mod real;
mod tape;
mod tensor;

pub use layers::{Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use ops::{cross_entropy, layer_norm, matmul, softmax_rows, Target, LOG_FLOOR};
pub use optim::{OptimizerKind, OptimizerState};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};
