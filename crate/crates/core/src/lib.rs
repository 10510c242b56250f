//! Two-stream gated shape segmentation network with a self-contained
//! reverse-mode autodiff core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod regular_stream;
pub mod shape_stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, StraightThrough, Var};
pub use kernels::conv::ConvSpec;
pub use tensor::{Element, Tensor};
