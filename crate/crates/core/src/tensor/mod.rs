//! Dense 64-bit tensors, computation graphs with reverse-mode
//! differentiation, masked Adam and checkpoint I/O.

mod checkpoint;
mod dense;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_fn, relative_error, RELATIVE_ERROR_FLOOR};
pub use graph::{Graph, Inputs, Node, NodeId, Op, Segment, Values};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, LrSchedule};
pub use params::{BinaryMask, ParamStore};
