//! Tensor arithmetic, the differentiation tape, the layer zoo and
//! checkpointing.

pub mod checkpoint;
pub mod model;
pub mod tape;
pub mod tensor;


pub use checkpoint::{load_checkpoint, save_checkpoint, TrainerCkpt};
pub use model::{
    batched_cross_entropy, conv_forward, select_logits_sum, softmax_cross_entropy, softmax_node,
    BnState, ForwardPass, Model, ParamRole, Parameter,
};
pub use tape::{Grads, Mode, NodeId, StencilKernel, Tape};
pub use tensor::Tensor;
