//! Minimal tensor toolkit: row-major `f32` arrays, dense and 2-D convolution
//! layers, reverse-mode gradients over a per-pass tape, Adam, and a binary
//! checkpoint format.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod layer;
pub mod optim;
pub mod tape;

pub use array::{log_softmax, softmax, NdArray};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use error::{NumericsError, Result};
pub use kernels::ConvSpec;
pub use layer::{forward, LayerHandle, LayerKind, LayerParams, ParamId, ParamStore, RELU_GAIN};
pub use optim::OptimState;
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
