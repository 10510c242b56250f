//! Synthetic segmentation data: generation, image gradients and the
//! on-disk dataset layout.

pub mod canny;
pub mod dataset;
pub mod pnm;
pub mod synth;

pub use canny::image_gradient;
pub use dataset::{load_dataset, write_dataset, Manifest};
pub use synth::{generate_dataset, DatasetSpec, SegSample};
