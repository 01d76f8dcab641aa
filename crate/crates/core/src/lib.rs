//! Iterative query-conditioned dynamic convolution for referring image
//! segmentation, built on a small reverse-mode autodiff engine, with a
//! synthetic shapes benchmark and the tooling to train, evaluate, ablate,
//! audit gradients, and count FLOPs.

pub mod ablate;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod init;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod param;
pub mod tensor;
pub mod train;

pub use autodiff::{BackwardFault, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use head::{SadlrConfig, SadlrHead, UpdateMode};
pub use mask::BinaryMask;
pub use model::Model;
pub use param::{Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
