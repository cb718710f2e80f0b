//! Desk-scale multimodal transformer used to exercise the pipeline end to
//! end.
//!
//! A grid of symbol tokens plays the image and a short question names one
//! cell; the model must answer that cell's symbol. Attention hooks apply
//! [`crate::steer::Plan`]s to question rows so masking and reweighting can be
//! measured on a real forward pass.

mod config;
pub mod eval;
pub mod gradcheck;
mod linalg;
mod model;
pub mod task;
pub mod train;

pub use config::{Optimizer, ToyConfig};
pub use model::{ForwardOutput, Hook, ParamLayout, ToyModel};
pub use task::{Sample, TaskKind};
pub use train::{train, TrainReport};
