//! Dense-tensor reverse-mode autodiff, optimizer and checkpoint I/O.

mod checkpoint;
mod graph;
pub mod gradcheck;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, write_checkpoint};
pub use graph::{backward, causal_self_attention, concat_cols, dropout_mask, Gradients, Graph, Var};
pub use optim::{clip_global_norm, warmup_lr, AdamState};
pub use params::{Init, Param, ParamGroup, ParamStore, GROUP_DEFAULT};
