//! Minimal neural-network stack: tensors with memory accounting, a
//! reverse-mode autodiff tape, transformer building blocks, sinusoidal
//! positional encodings, AdamW, and checkpoint serialization.

pub mod adam;
pub mod block;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod pe;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, LrSchedule, ParamMap};
pub use block::{multi_head_self_attention, transformer_block, BlockNodes};
pub use graph::{Graph, NnError, NodeId};
pub use pe::sinusoidal_pe;
pub use tensor::{mem, Element, Tensor};
