//! Building blocks for point-supervised X-ray item detection.

pub mod br;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;
