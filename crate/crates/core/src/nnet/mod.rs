//! Dense tensors with reverse-mode gradients, the layers the model is made
//! of, the LAMB optimizer and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod weights;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{attention, AttentionMask, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
pub use optim::{lamb_step, lr_at, LambConfig};
pub use tensor::{Real, Tensor};
pub use weights::{Param, Weights};
