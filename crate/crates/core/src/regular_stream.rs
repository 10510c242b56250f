//! Regular stream: a small residual backbone at output stride 8.
//!
//! | stage | channels | stride | dilation |
//! |-------|----------|--------|----------|
//! | stem  | 16       | 1      | 1        |
//! | 1     | 16       | 1      | 1        |
//! | 2     | 32       | 2      | 1        |
//! | 3     | 64       | 2      | 1        |
//! | 4     | 128      | 2      | 1        |
//! | 5     | 128      | 1      | 2        |
//!
//! Stages 3, 4 and 5 feed the shape stream gates.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvSpec;
use crate::layers::{self, BlockShape};
use crate::params::{Bound, Initializer, ParameterStore, StreamTag};
use crate::tensor::Element;

pub const STEM_CHANNELS: usize = 16;
pub const STAGE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 128];
pub const STAGE_STRIDES: [usize; 5] = [1, 2, 2, 2, 1];
pub const STAGE_DILATIONS: [usize; 5] = [1, 1, 1, 1, 2];
pub const OUTPUT_STRIDE: usize = 8;
/// Stages (0-based) whose outputs are exposed as taps.
pub const TAP_STAGES: [usize; 3] = [2, 3, 4];

pub fn tap_channels() -> [usize; 3] {
    TAP_STAGES.map(|s| STAGE_CHANNELS[s])
}

pub fn feature_channels() -> usize {
    STAGE_CHANNELS[4]
}

/// Strides of the three taps relative to the input.
pub fn tap_strides() -> [usize; 3] {
    TAP_STAGES.map(|s| STAGE_STRIDES[..=s].iter().product())
}

pub struct BackboneOutput {
    /// Stem output at full resolution.
    pub first_conv: Var,
    pub taps: [Var; 3],
    /// Same node as the last tap.
    pub features: Var,
}

fn block_shape(stage: usize) -> BlockShape {
    BlockShape {
        c_in: if stage == 0 {
            STEM_CHANNELS
        } else {
            STAGE_CHANNELS[stage - 1]
        },
        c_out: STAGE_CHANNELS[stage],
        stride: STAGE_STRIDES[stage],
        dilation: STAGE_DILATIONS[stage],
    }
}

pub fn init(init: &mut Initializer, store: &mut ParameterStore) -> Result<()> {
    let tag = StreamTag::Regular;
    init.conv(store, tag, "regular.stem.conv", STEM_CHANNELS, 3, 3, false)?;
    init.norm(store, tag, "regular.stem.norm", STEM_CHANNELS)?;
    for stage in 0..STAGE_CHANNELS.len() {
        layers::init_residual_block(
            init,
            store,
            tag,
            &format!("regular.stage{}", stage + 1),
            block_shape(stage),
        )?;
    }
    Ok(())
}

/// Fresh regular-stream parameters.
pub fn parameter_init(seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    init(&mut Initializer::new(seed), &mut store)?;
    Ok(store)
}

pub fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::shape(
            "backbone",
            format!("image {h}×{w}: height and width must be positive multiples of {OUTPUT_STRIDE}"),
        ));
    }
    Ok(())
}

pub fn backbone_forward<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    image: Var,
) -> Result<BackboneOutput> {
    match *g.shape(image) {
        [3, h, w] => check_input_extent(h, w)?,
        ref s => {
            return Err(Error::shape(
                "backbone",
                format!("expected a [3, H, W] image, got {s:?}"),
            ))
        }
    }
    let first_conv = layers::conv_norm_relu(g, p, "regular.stem", image, ConvSpec::same(3, 1))?;
    let mut x = first_conv;
    let mut stage_out = Vec::with_capacity(STAGE_CHANNELS.len());
    for stage in 0..STAGE_CHANNELS.len() {
        x = layers::residual_block(
            g,
            p,
            &format!("regular.stage{}", stage + 1),
            x,
            block_shape(stage),
        )?;
        stage_out.push(x);
    }
    let taps = TAP_STAGES.map(|s| stage_out[s]);
    Ok(BackboneOutput {
        first_conv,
        taps,
        features: taps[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(h: usize, w: usize, store: &ParameterStore) -> (Graph<f32>, BackboneOutput) {
        let mut g = Graph::new();
        let mut p = Bound::frozen(store);
        let data = (0..3 * h * w).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        let img = g.leaf(&Tensor::new(&[3, h, w], data).unwrap());
        let out = backbone_forward(&mut g, &mut p, img).unwrap();
        (g, out)
    }

    #[test]
    fn stride_bookkeeping_64() {
        let store = parameter_init(1).unwrap();
        let (g, out) = run(64, 64, &store);
        assert_eq!(g.shape(out.first_conv), &[16, 64, 64]);
        assert_eq!(g.shape(out.taps[0]), &[64, 16, 16]);
        assert_eq!(g.shape(out.taps[1]), &[128, 8, 8]);
        assert_eq!(g.shape(out.taps[2]), &[128, 8, 8]);
        assert_eq!(out.features, out.taps[2]);
        assert_eq!(tap_strides(), [4, 8, 8]);
    }

    #[test]
    fn doubling_input_doubles_taps() {
        let store = parameter_init(1).unwrap();
        let (g1, a) = run(64, 64, &store);
        let (g2, b) = run(128, 128, &store);
        for (ta, tb) in a.taps.iter().zip(&b.taps) {
            let (sa, sb) = (g1.shape(*ta), g2.shape(*tb));
            assert_eq!(sa[0], sb[0]);
            assert_eq!(2 * sa[1], sb[1]);
            assert_eq!(2 * sa[2], sb[2]);
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let store = parameter_init(1).unwrap();
        let mut g = Graph::<f32>::new();
        let mut p = Bound::frozen(&store);
        let img = g.leaf(&Tensor::zeros(&[3, 60, 64]));
        let err = backbone_forward(&mut g, &mut p, img).err().unwrap();
        assert!(err.to_string().contains("multiples of 8"), "{err}");
    }

    #[test]
    fn zero_image_with_zero_final_scales_is_finite() {
        let mut store = parameter_init(3).unwrap();
        for (name, p) in store.iter_mut() {
            if name.ends_with("norm2.scale") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::<f32>::new();
        let mut p = Bound::frozen(&store);
        let img = g.leaf(&Tensor::zeros(&[3, 32, 32]));
        let out = backbone_forward(&mut g, &mut p, img).unwrap();
        assert!(g.value(out.features).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic_and_he_scaled() {
        let a = parameter_init(7).unwrap();
        let b = parameter_init(7).unwrap();
        let c = parameter_init(8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|(_, p)| p.tag == StreamTag::Regular));
        // 128·128·9 = 147k values
        let k = &a.get("regular.stage5.conv2.weight").unwrap().tensor;
        assert!(k.len() >= 10_000);
        let n = k.len() as f64;
        let mean = k.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = k.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (128.0 * 9.0);
        assert!((var - want).abs() < 0.2 * want, "var {var} vs {want}");
        for (name, p) in a.iter() {
            if name.ends_with(".scale") {
                assert!(p.tensor.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with(".shift") || name.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
