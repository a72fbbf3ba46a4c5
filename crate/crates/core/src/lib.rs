//! Multitask dense-prediction transformer with a shared windowed encoder,
//! mirrored per-task decoders coupled by shared attention, a synthetic
//! six-task dataset, and a CPU training / ablation harness.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradient_audit;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use autograd::{Tape, Var};
pub use config::{ArchConfig, Task};
pub use error::{Error, Result};
pub use model::MultModel;
pub use tensor::Tensor;
