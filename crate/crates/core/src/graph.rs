//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.
//! Values are stored per node; gradients only exist after `backward`.

use crate::error::{Error, Result};
use crate::kernels::conv::{col2im, im2col, ConvGeom, ConvSpec};
use crate::kernels::filters;
use crate::kernels::norm::{self, GroupNormSaved};
use crate::kernels::resize::Resampler;
use crate::tensor::{numel, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of the straight-through categorical sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StraightThrough {
    /// Hard one-hot forward, tempered-softmax backward.
    #[default]
    Hard,
    /// Tempered softmax in both directions. Used to finite-difference check
    /// graphs that contain the sampler.
    Relaxed,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannels {
        x: Var,
        gate: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    Concat(Vec<Var>),
    Resize {
        x: Var,
        resampler: Resampler<T>,
    },
    GlobalAvgPool(Var),
    Broadcast(Var),
    GaussianBlur {
        x: Var,
        taps: Vec<T>,
    },
    SobelMagnitude {
        x: Var,
        gx: Vec<T>,
        gy: Vec<T>,
    },
    ChannelNorm {
        x: Var,
        scale: T,
    },
    StraightThrough {
        logits: Var,
        soft: Vec<T>,
        tau: T,
    },
    /// Scalar whose gradient w.r.t. `x` was computed during the forward pass.
    Reduce {
        x: Var,
        local: Vec<T>,
    },
    Combine(Vec<(Var, T)>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulChannels { x, gate } => vec![*x, *gate],
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(v) => v.clone(),
            Op::Combine(v) => v.iter().map(|(x, _)| *x).collect(),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::SoftmaxChannels(x)
            | Op::GlobalAvgPool(x)
            | Op::Broadcast(x)
            | Op::Resize { x, .. }
            | Op::GaussianBlur { x, .. }
            | Op::SobelMagnitude { x, .. }
            | Op::ChannelNorm { x, .. }
            | Op::StraightThrough { logits: x, .. }
            | Op::Reduce { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C, H, W], got {shape:?}"))),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tensor as a leaf; it is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent");
        t.requires_grad = n.requires_grad;
        if let Some(Some(g)) = self.grads.get(v.0) {
            t.set_grad(g.clone()).expect("gradient matches node shape");
        }
        t
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Drops computed gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (c_in, h, wd) = chw("conv2d", self.shape(x))?;
        let (c_out, k) = match *self.shape(w) {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {s:?} incompatible with input of {c_in} channels (need [C_out, {c_in}, k, k])"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", self.shape(b)),
                ));
            }
        }
        let out_h = spec.out_extent(h, k)?;
        let out_w = spec.out_extent(wd, k)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("conv2d", "zero-sized output"));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            out_h,
            out_w,
            spec,
        };
        let n = geom.col_cols();
        let mut out = vec![T::zero(); c_out * n];
        if let Some(b) = b {
            for (co, &bv) in self.value(b).iter().enumerate() {
                out[co * n..(co + 1) * n].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let cols = if geom.is_pointwise() {
            T::gemm(c_out, c_in, n, self.value(w), false, self.value(x), false, beta, &mut out);
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); geom.col_rows() * n];
            im2col(&geom, self.value(x), &mut cols);
            T::gemm(c_out, geom.col_rows(), n, self.value(w), false, &cols, false, beta, &mut out);
            cols
        };
        Ok(self.push(
            vec![c_out, out_h, out_w],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).iter().map(|&x| x * k).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, k))
    }

    /// `x[c, i, j] * gate[0, i, j]` for every channel `c`.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (c, h, w) = chw("mul_channels", self.shape(x))?;
        if self.shape(gate) != [1, h, w] {
            return Err(Error::shape(
                "mul_channels",
                format!("gate {:?} for input {:?}", self.shape(gate), self.shape(x)),
            ));
        }
        let plane = h * w;
        let g = self.value(gate);
        let v = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv * g[i % plane])
            .collect();
        let _ = c;
        Ok(self.push(self.shape(x).to_vec(), v, Op::MulChannels { x, gate }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&a| a.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .iter()
            .map(|&a| {
                // split on sign so exp never overflows
                if a >= T::zero() {
                    (T::one() + (-a).exp()).recip()
                } else {
                    let e = a.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        self.push(self.shape(x).to_vec(), v, Op::Sigmoid(x))
    }

    /// Per-pixel softmax over the channel axis of a `K×H×W` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (k, h, w) = chw("softmax_channels", self.shape(x))?;
        if k == 0 {
            return Err(Error::shape("softmax_channels", "no channels"));
        }
        let v = softmax_planes(self.value(x), k, h * w, T::one());
        Ok(self.push(self.shape(x).to_vec(), v, Op::SoftmaxChannels(x)))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (c, h, w) = chw("group_norm", self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "scale {:?} / shift {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (out, saved) = norm::forward(
            self.value(x),
            c,
            h * w,
            groups,
            self.value(gamma),
            self.value(beta),
        );
        Ok(self.push(
            vec![c, h, w],
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let (_, h, w) = chw("concat", self.shape(first))?;
        let mut c_total = 0;
        for &p in parts {
            let (c, ph, pw) = chw("concat", self.shape(p))?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("spatial {ph}×{pw} vs {h}×{w}"),
                ));
            }
            c_total += c;
        }
        let mut v = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![c_total, h, w], v, Op::Concat(parts.to_vec())))
    }

    /// Bilinear resampling to `out_h×out_w` (half-pixel centers).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = chw("bilinear_resize", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "bilinear_resize",
                format!("target {out_h}×{out_w} must be positive"),
            ));
        }
        let resampler = Resampler::new(h, w, out_h, out_w);
        let v = resampler.forward(self.value(x), c);
        Ok(self.push(vec![c, out_h, out_w], v, Op::Resize { x, resampler }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("global_avg_pool", self.shape(x))?;
        let n = T::lit((h * w) as f64);
        let v = self
            .value(x)
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        Ok(self.push(vec![c, 1, 1], v, Op::GlobalAvgPool(x)))
    }

    /// Repeats a `C×1×1` tensor over an `h×w` grid.
    pub fn broadcast(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = match *self.shape(x) {
            [c, 1, 1] => c,
            ref s => return Err(Error::shape("broadcast", format!("expected [C, 1, 1], got {s:?}"))),
        };
        let mut v = Vec::with_capacity(c * h * w);
        for &a in self.value(x) {
            v.extend(std::iter::repeat_n(a, h * w));
        }
        Ok(self.push(vec![c, h, w], v, Op::Broadcast(x)))
    }

    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var> {
        let (_, h, w) = chw("gaussian_blur", self.shape(x))?;
        let taps: Vec<T> = filters::gaussian_taps(sigma)?.into_iter().map(T::lit).collect();
        let v = filters::blur(self.value(x), h, w, &taps);
        Ok(self.push(self.shape(x).to_vec(), v, Op::GaussianBlur { x, taps }))
    }

    pub fn sobel_magnitude(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = chw("sobel_magnitude", self.shape(x))?;
        if h < 3 || w < 3 {
            return Err(Error::shape(
                "sobel_magnitude",
                format!("spatial extent {h}×{w} is below the 3×3 kernel"),
            ));
        }
        let (mag, gx, gy) = filters::sobel_magnitude(self.value(x), h, w);
        Ok(self.push(self.shape(x).to_vec(), mag, Op::SobelMagnitude { x, gx, gy }))
    }

    /// `scale · sqrt(Σ_c x[c]²)` per pixel, giving a `1×H×W` map.
    pub fn channel_norm(&mut self, x: Var, scale: T) -> Result<Var> {
        let (c, h, w) = chw("channel_norm", self.shape(x))?;
        let plane = h * w;
        let xv = self.value(x);
        let v = (0..plane)
            .map(|p| {
                let ss: T = (0..c).map(|ch| xv[ch * plane + p] * xv[ch * plane + p]).sum();
                scale * ss.sqrt()
            })
            .collect();
        Ok(self.push(vec![1, h, w], v, Op::ChannelNorm { x, scale }))
    }

    /// Straight-through categorical sample over channels.
    ///
    /// Forward (hard mode) is the one-hot of `argmax(logits + noise)`, ties
    /// to the lowest channel. Backward is the Jacobian of
    /// `softmax((logits + noise) / tau)`.
    pub fn straight_through(
        &mut self,
        logits: Var,
        tau: f64,
        noise: Option<&[T]>,
        mode: StraightThrough,
    ) -> Result<Var> {
        let (k, h, w) = chw("gumbel_hard_softmax", self.shape(logits))?;
        if !(tau > 0.0) {
            return Err(Error::invalid("gumbel_hard_softmax", format!("tau must be positive, got {tau}")));
        }
        let mut perturbed = self.value(logits).to_vec();
        if let Some(g) = noise {
            if g.len() != perturbed.len() {
                return Err(Error::shape("gumbel_hard_softmax", "noise does not match logits"));
            }
            for (p, &n) in perturbed.iter_mut().zip(g) {
                *p += n;
            }
        }
        let tau_t = T::lit(tau);
        let soft = softmax_planes(&perturbed, k, h * w, tau_t);
        let value = match mode {
            StraightThrough::Relaxed => soft.clone(),
            StraightThrough::Hard => one_hot_argmax(&perturbed, k, h * w),
        };
        Ok(self.push(
            vec![k, h, w],
            value,
            Op::StraightThrough {
                logits,
                soft,
                tau: tau_t,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let local = vec![T::one(); self.value(x).len()];
        self.push(vec![1], vec![s], Op::Reduce { x, local })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.value(x).iter().copied().sum::<T>() / n;
        let local = vec![n.recip(); self.value(x).len()];
        self.push(vec![1], vec![s], Op::Reduce { x, local })
    }

    /// Scalar node with a caller-supplied value and gradient w.r.t. `x`.
    /// Fused losses use this to avoid materialising intermediates.
    pub fn reduce_with_grad(&mut self, x: Var, value: T, local: Vec<T>) -> Result<Var> {
        if local.len() != self.value(x).len() {
            return Err(Error::shape("reduce", "local gradient does not match input"));
        }
        Ok(self.push(vec![1], vec![value], Op::Reduce { x, local }))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("combine", format!("term {:?} is not scalar", self.shape(v))));
            }
            total += w * self.item(v);
        }
        Ok(self.push(vec![1], vec![total], Op::Combine(terms.to_vec())))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already computed; call zero_grad before another pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves and nodes the caller asked about need to stay around;
        // keep everything for simplicity.
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].requires_grad;
        // Accumulation buffer for input `v`, created zeroed on first use.
        fn slot<'a, T: Element>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            } => {
                let n = geom.col_cols();
                let rows = geom.col_rows();
                if let Some(b) = b.filter(|b| tracked(*b)) {
                    let gb = slot(grads, nodes, b);
                    for co in 0..*c_out {
                        gb[co] += g[co * n..(co + 1) * n].iter().copied().sum::<T>();
                    }
                }
                let input: &[T] = if geom.is_pointwise() { &nodes[x.0].value } else { cols };
                if tracked(*w) {
                    // dW = dOut · colsᵀ
                    let gw = slot(grads, nodes, *w);
                    T::gemm(*c_out, n, rows, g, false, input, true, T::one(), gw);
                }
                if tracked(*x) {
                    let wv = &nodes[w.0].value;
                    if geom.is_pointwise() {
                        let gx = slot(grads, nodes, *x);
                        T::gemm(rows, *c_out, n, wv, true, g, false, T::one(), gx);
                    } else {
                        let mut gcols = vec![T::zero(); rows * n];
                        T::gemm(rows, *c_out, n, wv, true, g, false, T::zero(), &mut gcols);
                        col2im(geom, &gcols, slot(grads, nodes, *x));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        for (d, &s) in slot(grads, nodes, v).iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if tracked(v) {
                        let o = &nodes[other.0].value;
                        for ((d, &s), &ov) in slot(grads, nodes, v).iter_mut().zip(g).zip(o) {
                            *d += s * ov;
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if tracked(*x) {
                    for (d, &s) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d += s * *k;
                    }
                }
            }
            Op::MulChannels { x, gate } => {
                let plane = nodes[gate.0].value.len();
                if tracked(*x) {
                    let gv = &nodes[gate.0].value;
                    for (j, (d, &s)) in slot(grads, nodes, *x).iter_mut().zip(g).enumerate() {
                        *d += s * gv[j % plane];
                    }
                }
                if tracked(*gate) {
                    let xv = &nodes[x.0].value;
                    let gg = slot(grads, nodes, *gate);
                    for (j, (&s, &xj)) in g.iter().zip(xv).enumerate() {
                        gg[j % plane] += s * xj;
                    }
                }
            }
            Op::Relu(x) => {
                if tracked(*x) {
                    let xv = &nodes[x.0].value;
                    for ((d, &s), &a) in slot(grads, nodes, *x).iter_mut().zip(g).zip(xv) {
                        if a > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if tracked(*x) {
                    let y = &node.value;
                    for ((d, &s), &yv) in slot(grads, nodes, *x).iter_mut().zip(g).zip(y) {
                        *d += s * yv * (T::one() - yv);
                    }
                }
            }
            Op::SoftmaxChannels(x) => {
                if tracked(*x) {
                    let (k, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                    softmax_planes_adjoint(&node.value, g, k, h * w, T::one(), slot(grads, nodes, *x));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let (c, plane) = (node.shape[0], node.shape[1] * node.shape[2]);
                let gamma_v = nodes[gamma.0].value.clone();
                let mut take = |v: Var| tracked(v).then(|| std::mem::take(slot(grads, nodes, v)));
                let (mut gx, mut gg, mut gb) = (take(*x), take(*gamma), take(*beta));
                norm::backward(
                    g,
                    saved,
                    c,
                    plane,
                    *groups,
                    &gamma_v,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gg {
                    grads[gamma.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[beta.0] = Some(v);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if tracked(p) {
                        for (d, &s) in slot(grads, nodes, p).iter_mut().zip(&g[off..off + n]) {
                            *d += s;
                        }
                    }
                    off += n;
                }
            }
            Op::Resize { x, resampler } => {
                if tracked(*x) {
                    resampler.adjoint(g, slot(grads, nodes, *x), node.shape[0]);
                }
            }
            Op::GlobalAvgPool(x) => {
                if tracked(*x) {
                    let xs = &nodes[x.0].shape;
                    let plane = xs[1] * xs[2];
                    let inv = T::lit(plane as f64).recip();
                    for (j, d) in slot(grads, nodes, *x).iter_mut().enumerate() {
                        *d += g[j / plane] * inv;
                    }
                }
            }
            Op::Broadcast(x) => {
                if tracked(*x) {
                    let plane = node.shape[1] * node.shape[2];
                    for (c, d) in slot(grads, nodes, *x).iter_mut().enumerate() {
                        *d += g[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
                    }
                }
            }
            Op::GaussianBlur { x, taps } => {
                if tracked(*x) {
                    let back = filters::blur_adjoint(g, node.shape[1], node.shape[2], taps);
                    for (d, s) in slot(grads, nodes, *x).iter_mut().zip(back) {
                        *d += s;
                    }
                }
            }
            Op::SobelMagnitude { x, gx, gy } => {
                if tracked(*x) {
                    let back = filters::sobel_magnitude_adjoint(
                        g,
                        &node.value,
                        gx,
                        gy,
                        node.shape[1],
                        node.shape[2],
                    );
                    for (d, s) in slot(grads, nodes, *x).iter_mut().zip(back) {
                        *d += s;
                    }
                }
            }
            Op::ChannelNorm { x, scale } => {
                if tracked(*x) {
                    let plane = node.value.len();
                    let xv = &nodes[x.0].value;
                    let out = &node.value;
                    for (j, d) in slot(grads, nodes, *x).iter_mut().enumerate() {
                        let p = j % plane;
                        // d(scale·‖x‖)/dx = scale² · x / out
                        if out[p] > T::zero() {
                            *d += g[p] * *scale * *scale * xv[j] / out[p];
                        }
                    }
                }
            }
            Op::StraightThrough { logits, soft, tau } => {
                if tracked(*logits) {
                    let (k, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                    softmax_planes_adjoint(soft, g, k, h * w, *tau, slot(grads, nodes, *logits));
                }
            }
            Op::Reduce { x, local } => {
                if tracked(*x) {
                    let s = g[0];
                    for (d, &l) in slot(grads, nodes, *x).iter_mut().zip(local) {
                        *d += s * l;
                    }
                }
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    if tracked(v) {
                        slot(grads, nodes, v)[0] += g[0] * w;
                    }
                }
            }
        }
    }
}

/// Softmax of `x / tau` over `k` planes of `plane` values each.
pub fn softmax_planes<T: Element>(x: &[T], k: usize, plane: usize, tau: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for p in 0..plane {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(x[c * plane + p]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = ((x[c * plane + p] - m) / tau).exp();
            out[c * plane + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * plane + p] /= z;
        }
    }
    out
}

/// Accumulates `J_softmax(x/tau)ᵀ · g` into `grad_x`, given the softmax output `y`.
fn softmax_planes_adjoint<T: Element>(
    y: &[T],
    g: &[T],
    k: usize,
    plane: usize,
    tau: T,
    grad_x: &mut [T],
) {
    for p in 0..plane {
        let dot: T = (0..k).map(|c| y[c * plane + p] * g[c * plane + p]).sum();
        for c in 0..k {
            let j = c * plane + p;
            grad_x[j] += y[j] * (g[j] - dot) / tau;
        }
    }
}

/// One-hot of the per-pixel channel argmax; ties go to the lowest channel.
pub fn one_hot_argmax<T: Element>(x: &[T], k: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for p in 0..plane {
        let mut best = 0;
        for c in 1..k {
            if x[c * plane + p] > x[best * plane + p] {
                best = c;
            }
        }
        out[best * plane + p] = T::one();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_unit_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_twice_input() {
        let mut g = Graph::<f64>::new();
        let data = [0.5, -1.5, 2.0, 3.25];
        let x = g.leaf(&t(&[1, 2, 2], &data).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err(), "second pass without reset");
        g.zero_grad();
        g.backward(s).unwrap();

        let mut g = Graph::<f64>::new();
        let c = g.leaf(&t(&[2], &[1., 2.]));
        let s = g.sum(c);
        assert!(g.backward(s).is_err(), "detached graph");
    }

    #[test]
    fn shared_subgraph_accumulates() {
        // y = x·x + x  → dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1], &[3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::full(&[1, 3, 3], 1.0));
        let w = g.leaf(&Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, w, None, ConvSpec::new(1, 1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 2.0));

        let x = g.leaf(&t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.leaf(&t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, w, None, ConvSpec::new(1, 1, 0)).unwrap();
        assert_eq!(g.value(y), &[5.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[2, 4, 4]));
        let w = g.leaf(&Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, ConvSpec::new(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("kernel"), "{err}");
        let w = g.leaf(&Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, w, None, ConvSpec::new(1, 1, 0)).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3], &[0.0, 2.0, -2.0]).with_grad());
        let y = g.sigmoid(x);
        assert_eq!(g.value(y)[0], 0.5);
        assert!((g.value(y)[1] + g.value(y)[2] - 1.0).abs() < 1e-15);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!((g.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[4, 2, 2]));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.25));

        let a = t(&[3, 1, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 0.0]);
        let b = t(&[3, 1, 2], &[11.0, -7.0, 10.5, -1.0, 13.0, -5.0]);
        let ya = g.leaf(&a);
        let ya = g.softmax_channels(ya).unwrap();
        let yb = g.leaf(&b);
        let yb = g.softmax_channels(yb).unwrap();
        for (p, q) in g.value(ya).iter().zip(g.value(yb)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_is_one_hot() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3, 1, 1], &[3.0, 1.0, 0.0]));
        let y = g.straight_through(x, 1.0, None, StraightThrough::Hard).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0, 0.0]);
        let x = g.leaf(&t(&[3, 1, 1], &[2.0, 2.0, 1.0]));
        let y = g.straight_through(x, 1.0, None, StraightThrough::Hard).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0, 0.0], "ties go low");
        assert!(g.straight_through(x, 0.0, None, StraightThrough::Hard).is_err());
    }

    #[test]
    fn sobel_needs_three_pixels() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[1, 2, 8]));
        assert!(g.sobel_magnitude(x).is_err());
    }

    #[test]
    fn resize_rejects_empty_target() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[1, 2, 2]));
        assert!(g.bilinear_resize(x, 0, 4).is_err());
    }

    #[test]
    fn mul_channels_broadcasts_gate() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let a = g.leaf(&t(&[1, 1, 2], &[0.5, 2.0]));
        let y = g.mul_channels(x, a).unwrap();
        assert_eq!(g.value(y), &[0.5, 4.0, 1.5, 8.0]);
    }
}
