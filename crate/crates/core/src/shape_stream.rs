//! Shape stream: a shallow full-resolution branch whose activations are
//! gated by the regular stream through gated convolutional layers (GCLs),
//! ending in a class-agnostic boundary map `s ∈ (0, 1)^{H×W}`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvSpec;
use crate::layers::{self, BlockShape};
use crate::params::{Bound, Initializer, ParameterStore, StreamTag};
use crate::regular_stream;
use crate::tensor::Element;

pub const WIDTH: usize = 16;
pub const NUM_GATES: usize = 3;

/// Paired activations entering one GCL. `r` must already be at the
/// spatial extent of `s`.
#[derive(Clone, Copy, Debug)]
pub struct GclTap {
    pub s: Var,
    pub r: Var,
    pub index: usize,
}

/// Weights of the attention branch of one GCL.
#[derive(Clone, Copy, Debug)]
pub struct GateWeights {
    /// Scale/shift of the normalization applied to `s ∥ r`; `None` skips it.
    pub norm: Option<(Var, Var)>,
    /// `[1, Cs + Cr, 1, 1]`
    pub weight: Var,
    pub bias: Option<Var>,
}

/// `α = σ(C₁ₓ₁(norm(s ∥ r)))`, a `1×H×W` map in (0, 1).
pub fn attention_map<T: Element>(g: &mut Graph<T>, tap: GclTap, gate: &GateWeights) -> Result<Var> {
    let (ss, rs) = (g.shape(tap.s).to_vec(), g.shape(tap.r).to_vec());
    if ss.len() != 3 || rs.len() != 3 || ss[1..] != rs[1..] {
        return Err(Error::shape(
            "attention_map",
            format!(
                "gate {}: shape feature {ss:?} and regular tap {rs:?} must share H×W (upsample the tap first)",
                tap.index
            ),
        ));
    }
    let mut x = g.concat(&[tap.s, tap.r])?;
    if let Some((scale, shift)) = gate.norm {
        x = g.group_norm(x, scale, shift, layers::NORM_GROUPS)?;
    }
    let logit = g.conv2d(x, gate.weight, gate.bias, ConvSpec::new(1, 1, 0))?;
    Ok(g.sigmoid(logit))
}

/// `ŝ = w_tᵀ((s ⊙ α) + s)` per pixel; `mix` is a `[Cs, Cs, 1, 1]` kernel.
pub fn gated_conv<T: Element>(g: &mut Graph<T>, s: Var, alpha: Var, mix: Var) -> Result<Var> {
    let gated = g.mul_channels(s, alpha)?;
    let residual = g.add(gated, s)?;
    g.conv2d(residual, mix, None, ConvSpec::new(1, 1, 0))
}

pub fn init(init: &mut Initializer, store: &mut ParameterStore) -> Result<()> {
    let tag = StreamTag::Shape;
    init.conv(store, tag, "shape.entry", WIDTH, regular_stream::STEM_CHANNELS, 1, true)?;
    for (t, cr) in regular_stream::tap_channels().into_iter().enumerate() {
        let block = BlockShape {
            c_in: WIDTH,
            c_out: WIDTH,
            stride: 1,
            dilation: 1,
        };
        layers::init_residual_block(init, store, tag, &format!("shape.block{}", t + 1), block)?;
        init.norm(store, tag, &format!("shape.gate{}.norm", t + 1), WIDTH + cr)?;
        init.conv(store, tag, &format!("shape.gate{}.attn", t + 1), 1, WIDTH + cr, 1, true)?;
        init.conv(store, tag, &format!("shape.gate{}.mix", t + 1), WIDTH, WIDTH, 1, false)?;
    }
    init.conv(store, tag, "shape.reduce", 1, WIDTH, 1, true)?;
    init.conv(store, tag, "shape.out", 1, 2, 1, true)?;
    Ok(())
}

pub fn parameter_init(seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    init(&mut Initializer::new(seed), &mut store)?;
    Ok(store)
}

pub struct ShapeStreamOutput {
    /// `1×H×W` boundary probabilities.
    pub boundary: Var,
    /// Attention maps of the three GCLs.
    pub gates: [Var; NUM_GATES],
}

pub fn gate_weights<T: Element>(g: &mut Graph<T>, p: &mut Bound<'_, T>, t: usize) -> Result<GateWeights> {
    let norm = (
        p.var(g, &format!("shape.gate{t}.norm.scale"))?,
        p.var(g, &format!("shape.gate{t}.norm.shift"))?,
    );
    Ok(GateWeights {
        norm: Some(norm),
        weight: p.var(g, &format!("shape.gate{t}.attn.weight"))?,
        bias: p.optional(g, &format!("shape.gate{t}.attn.bias"))?,
    })
}

pub fn shape_stream_forward<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    first_conv: Var,
    taps: &[Var; NUM_GATES],
    image_grad: Var,
) -> Result<ShapeStreamOutput> {
    let (_, h, w) = match *g.shape(first_conv) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("shape stream entry", format!("first conv {s:?}"))),
    };
    if g.shape(image_grad) != [1, h, w] {
        return Err(Error::shape(
            "shape stream output",
            format!("image gradient {:?}, expected [1, {h}, {w}]", g.shape(image_grad)),
        ));
    }
    let mut s = layers::conv(g, p, "shape.entry", first_conv, ConvSpec::new(1, 1, 0))?;
    let mut gates = Vec::with_capacity(NUM_GATES);
    for (i, &tap) in taps.iter().enumerate() {
        let t = i + 1;
        let block = BlockShape {
            c_in: WIDTH,
            c_out: WIDTH,
            stride: 1,
            dilation: 1,
        };
        s = layers::residual_block(g, p, &format!("shape.block{t}"), s, block)?;
        let r = g.bilinear_resize(tap, h, w)?;
        let gate = gate_weights(g, p, t)?;
        let alpha = attention_map(g, GclTap { s, r, index: t }, &gate)?;
        let mix = p.var(g, &format!("shape.gate{t}.mix.weight"))?;
        s = gated_conv(g, s, alpha, mix)?;
        gates.push(alpha);
    }
    let reduced = layers::conv(g, p, "shape.reduce", s, ConvSpec::new(1, 1, 0))?;
    let with_grad = g.concat(&[reduced, image_grad])?;
    let out = layers::conv(g, p, "shape.out", with_grad, ConvSpec::new(1, 1, 0))?;
    Ok(ShapeStreamOutput {
        boundary: g.sigmoid(out),
        gates: [gates[0], gates[1], gates[2]],
    })
}
