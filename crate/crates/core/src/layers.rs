//! Building blocks shared by the streams: named conv / norm application and
//! the residual block.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvSpec;
use crate::params::{Bound, Initializer, ParameterStore, StreamTag};
use crate::tensor::Element;

pub const NORM_GROUPS: usize = 8;

pub fn conv<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    name: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = p.var(g, &format!("{name}.weight"))?;
    let b = p.optional(g, &format!("{name}.bias"))?;
    g.conv2d(x, w, b, spec)
}

pub fn norm<T: Element>(g: &mut Graph<T>, p: &mut Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    let scale = p.var(g, &format!("{name}.scale"))?;
    let shift = p.var(g, &format!("{name}.shift"))?;
    g.group_norm(x, scale, shift, NORM_GROUPS)
}

/// conv → norm → relu
pub fn conv_norm_relu<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    name: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let y = conv(g, p, &format!("{name}.conv"), x, spec)?;
    let y = norm(g, p, &format!("{name}.norm"), y)?;
    Ok(g.relu(y))
}

#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl BlockShape {
    fn projects(&self) -> bool {
        self.c_in != self.c_out || self.stride != 1
    }
}

pub fn init_residual_block(
    init: &mut Initializer,
    store: &mut ParameterStore,
    tag: StreamTag,
    name: &str,
    shape: BlockShape,
) -> Result<()> {
    init.conv(store, tag, &format!("{name}.conv1"), shape.c_out, shape.c_in, 3, false)?;
    init.norm(store, tag, &format!("{name}.norm1"), shape.c_out)?;
    init.conv(store, tag, &format!("{name}.conv2"), shape.c_out, shape.c_out, 3, false)?;
    init.norm(store, tag, &format!("{name}.norm2"), shape.c_out)?;
    if shape.projects() {
        init.conv(store, tag, &format!("{name}.proj"), shape.c_out, shape.c_in, 1, false)?;
        init.norm(store, tag, &format!("{name}.proj_norm"), shape.c_out)?;
    }
    Ok(())
}

/// Two 3×3 convs with an identity (or 1×1 projection) shortcut.
pub fn residual_block<T: Element>(
    g: &mut Graph<T>,
    p: &mut Bound<'_, T>,
    name: &str,
    x: Var,
    shape: BlockShape,
) -> Result<Var> {
    let d = shape.dilation;
    let first = ConvSpec::new(shape.stride, d, d);
    let y = conv(g, p, &format!("{name}.conv1"), x, first)?;
    let y = norm(g, p, &format!("{name}.norm1"), y)?;
    let y = g.relu(y);
    let y = conv(g, p, &format!("{name}.conv2"), y, ConvSpec::same(3, d))?;
    let y = norm(g, p, &format!("{name}.norm2"), y)?;
    let shortcut = if shape.projects() {
        let s = conv(g, p, &format!("{name}.proj"), x, ConvSpec::new(shape.stride, 1, 0))?;
        norm(g, p, &format!("{name}.proj_norm"), s)?
    } else {
        x
    };
    let sum = g.add(y, shortcut)?;
    Ok(g.relu(sum))
}
