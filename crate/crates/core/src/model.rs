//! The assembled two-stream network.

use crate::error::{Error, Result};
use crate::fusion::{self, CategoricalMap, FusionInputs};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Initializer, ParameterStore};
use crate::regular_stream::{self, BackboneOutput};
use crate::shape_stream::{self, ShapeStreamOutput};
use crate::tensor::Element;

/// Architecture switches. With `shape_stream` off the network is the plain
/// regular stream + ASPP baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub classes: usize,
    pub shape_stream: bool,
    /// Feed image gradients to the fusion module as well.
    pub gradients_input: bool,
}

impl ModelConfig {
    pub fn full(classes: usize) -> Self {
        ModelConfig {
            classes,
            shape_stream: true,
            gradients_input: true,
        }
    }

    pub fn baseline(classes: usize) -> Self {
        ModelConfig {
            classes,
            shape_stream: false,
            gradients_input: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("model", format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.gradients_input && !self.shape_stream {
            return Err(Error::invalid("model", "gradients input requires the shape stream"));
        }
        Ok(())
    }

    fn fusion_inputs(&self) -> FusionInputs {
        FusionInputs {
            classes: self.classes,
            boundary: self.shape_stream,
            image_grad: self.gradients_input,
        }
    }
}

/// Stream-specific seeds keep the regular stream identical across ablations
/// that share a seed.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    regular_stream::init(&mut Initializer::new(stream_seed(seed, 0)), &mut store)?;
    if cfg.shape_stream {
        shape_stream::init(&mut Initializer::new(stream_seed(seed, 1)), &mut store)?;
    }
    fusion::init(&mut Initializer::new(stream_seed(seed, 2)), &mut store, cfg.fusion_inputs())?;
    Ok(store)
}

pub struct ModelOutput {
    pub backbone: BackboneOutput,
    pub shape: Option<ShapeStreamOutput>,
    pub seg: CategoricalMap,
}

impl ModelOutput {
    pub fn boundary(&self) -> Option<Var> {
        self.shape.as_ref().map(|s| s.boundary)
    }
}

/// Full forward pass on one `3×H×W` image with its `1×H×W` gradient map.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    cfg: &ModelConfig,
    image: Var,
    image_grad: Var,
) -> Result<ModelOutput> {
    cfg.validate()?;
    let (h, w) = match *g.shape(image) {
        [_, h, w] => (h, w),
        ref s => return Err(Error::shape("model", format!("image {s:?}"))),
    };
    let backbone = regular_stream::backbone_forward(g, p, image)?;
    let shape = if cfg.shape_stream {
        Some(shape_stream::shape_stream_forward(
            g,
            p,
            backbone.first_conv,
            &backbone.taps,
            image_grad,
        )?)
    } else {
        None
    };
    let seg = fusion::aspp_fuse(
        g,
        p,
        backbone.features,
        backbone.first_conv,
        shape.as_ref().map(|s| s.boundary),
        cfg.gradients_input.then_some(image_grad),
        cfg.classes,
        (h, w),
    )?;
    Ok(ModelOutput { backbone, shape, seg })
}
