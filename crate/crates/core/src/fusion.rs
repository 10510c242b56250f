//! Fusion module: atrous spatial pyramid pooling over the regular-stream
//! features with the boundary map injected twice, at stride 8 inside the
//! pyramid and at full resolution in a small refinement head.
//!
//! The stride-8 class scores are upsampled and a residual is added from a
//! two-layer full-resolution head that sees the reduced pyramid output, the
//! stem features, the boundary map and (optionally) the image gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvSpec;
use crate::layers;
use crate::params::{Bound, Initializer, ParameterStore, StreamTag};
use crate::regular_stream::{self, OUTPUT_STRIDE};
use crate::tensor::Element;

pub const BRANCH_CHANNELS: usize = 64;
pub const ATROUS_RATES: [usize; 3] = [2, 4, 8];
/// Width of the full-resolution refinement head.
pub const DETAIL_CHANNELS: usize = 16;

/// Which optional inputs the fusion module consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionInputs {
    pub classes: usize,
    pub boundary: bool,
    pub image_grad: bool,
}

impl FusionInputs {
    fn pyramid_in(&self) -> usize {
        regular_stream::feature_channels() + self.boundary as usize + self.image_grad as usize
    }

    fn refine_in(&self) -> usize {
        DETAIL_CHANNELS + regular_stream::STEM_CHANNELS + self.boundary as usize + self.image_grad as usize
    }
}

/// Per-pixel class distribution and the logits it came from.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalMap {
    pub logits: Var,
    pub probs: Var,
    pub classes: usize,
}

pub fn init(init: &mut Initializer, store: &mut ParameterStore, inputs: FusionInputs) -> Result<()> {
    if inputs.classes < 2 {
        return Err(Error::invalid("aspp_fuse", format!("need at least 2 classes, got {}", inputs.classes)));
    }
    let tag = StreamTag::Fusion;
    let c_in = inputs.pyramid_in();
    init.conv(store, tag, "fusion.aspp0.conv", BRANCH_CHANNELS, c_in, 1, false)?;
    init.norm(store, tag, "fusion.aspp0.norm", BRANCH_CHANNELS)?;
    for (i, _) in ATROUS_RATES.iter().enumerate() {
        init.conv(store, tag, &format!("fusion.aspp{}.conv", i + 1), BRANCH_CHANNELS, c_in, 3, false)?;
        init.norm(store, tag, &format!("fusion.aspp{}.norm", i + 1), BRANCH_CHANNELS)?;
    }
    init.conv(store, tag, "fusion.pool", BRANCH_CHANNELS, c_in, 1, true)?;
    init.conv(store, tag, "fusion.project.conv", BRANCH_CHANNELS, 5 * BRANCH_CHANNELS, 1, false)?;
    init.norm(store, tag, "fusion.project.norm", BRANCH_CHANNELS)?;
    init.conv(store, tag, "fusion.classifier", inputs.classes, BRANCH_CHANNELS, 1, true)?;
    init.conv(store, tag, "fusion.reduce.conv", DETAIL_CHANNELS, BRANCH_CHANNELS, 1, false)?;
    init.norm(store, tag, "fusion.reduce.norm", DETAIL_CHANNELS)?;
    init.conv(store, tag, "fusion.refine1.conv", DETAIL_CHANNELS, inputs.refine_in(), 3, false)?;
    init.norm(store, tag, "fusion.refine1.norm", DETAIL_CHANNELS)?;
    init.conv(store, tag, "fusion.refine2", inputs.classes, DETAIL_CHANNELS, 3, true)?;
    Ok(())
}

/// Fuses stride-8 `features` and full-resolution `stem` features with the
/// `boundary` map (and optionally image gradients) into a `K×H×W`
/// categorical map.
pub fn aspp_fuse<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    features: Var,
    stem: Var,
    boundary: Option<Var>,
    extra_grad: Option<Var>,
    classes: usize,
    out_hw: (usize, usize),
) -> Result<CategoricalMap> {
    if classes < 2 {
        return Err(Error::invalid("aspp_fuse", format!("need at least 2 classes, got {classes}")));
    }
    let (h, w) = out_hw;
    let (fh, fw) = match *g.shape(features) {
        [_, fh, fw] => (fh, fw),
        ref s => return Err(Error::shape("aspp_fuse", format!("features {s:?}"))),
    };
    if fh * OUTPUT_STRIDE != h || fw * OUTPUT_STRIDE != w {
        return Err(Error::shape(
            "aspp_fuse",
            format!("features {fh}×{fw} are not stride {OUTPUT_STRIDE} of {h}×{w}"),
        ));
    }
    if g.shape(stem) != [regular_stream::STEM_CHANNELS, h, w] {
        return Err(Error::shape("aspp_fuse", format!("stem {:?}", g.shape(stem))));
    }
    let mut pyramid_in = vec![features];
    for (what, v) in [("boundary", boundary), ("image gradient", extra_grad)] {
        if let Some(v) = v {
            if g.shape(v) != [1, h, w] {
                return Err(Error::shape(
                    "aspp_fuse",
                    format!("{what} {:?}, expected [1, {h}, {w}]", g.shape(v)),
                ));
            }
            pyramid_in.push(g.bilinear_resize(v, fh, fw)?);
        }
    }
    let x = g.concat(&pyramid_in)?;

    let mut branches = vec![layers::conv_norm_relu(g, p, "fusion.aspp0", x, ConvSpec::new(1, 1, 0))?];
    for (i, &rate) in ATROUS_RATES.iter().enumerate() {
        branches.push(layers::conv_norm_relu(
            g,
            p,
            &format!("fusion.aspp{}", i + 1),
            x,
            ConvSpec::same(3, rate),
        )?);
    }
    let pooled = g.global_avg_pool(x)?;
    let pooled = layers::conv(g, p, "fusion.pool", pooled, ConvSpec::new(1, 1, 0))?;
    let pooled = g.relu(pooled);
    branches.push(g.broadcast(pooled, fh, fw)?);
    let cat = g.concat(&branches)?;
    let pre_logits = layers::conv_norm_relu(g, p, "fusion.project", cat, ConvSpec::new(1, 1, 0))?;

    let coarse = layers::conv(g, p, "fusion.classifier", pre_logits, ConvSpec::new(1, 1, 0))?;
    let coarse_up = g.bilinear_resize(coarse, h, w)?;
    let reduced = layers::conv_norm_relu(g, p, "fusion.reduce", pre_logits, ConvSpec::new(1, 1, 0))?;
    let mut refine_in = vec![g.bilinear_resize(reduced, h, w)?, stem];
    refine_in.extend(boundary);
    refine_in.extend(extra_grad);
    let refine_in = g.concat(&refine_in)?;
    let refine = layers::conv_norm_relu(g, p, "fusion.refine1", refine_in, ConvSpec::same(3, 1))?;
    let refine = layers::conv(g, p, "fusion.refine2", refine, ConvSpec::same(3, 1))?;
    let logits = g.add(coarse_up, refine)?;
    let probs = g.softmax_channels(logits)?;
    Ok(CategoricalMap {
        logits,
        probs,
        classes,
    })
}
