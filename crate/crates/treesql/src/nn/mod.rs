//! Minimal dense-tensor library with reverse-mode differentiation, an
//! AdamW optimizer and a binary checkpoint format. Plain f64 loops; no
//! BLAS. Fast enough for the model sizes this crate trains.

pub mod checkpoint;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_into, save, CheckpointError};
pub use optim::{adamw_step, warmup_linear, OptimError};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
