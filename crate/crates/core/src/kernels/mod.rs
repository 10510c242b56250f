//! Slice-level forward/backward kernels used by the autodiff graph.

pub mod conv;
pub mod filters;
pub mod norm;
pub mod resize;
