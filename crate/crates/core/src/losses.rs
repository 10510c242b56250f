//! Training objective: β-balanced boundary BCE, segmentation cross-entropy
//! and the dual-task regularizer coupling the two outputs.
//!
//! All reductions are means, so the default weights carry across image
//! sizes. Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before
//! any logarithm; clamped entries pass no gradient.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::fusion::CategoricalMap;
use crate::graph::{Graph, StraightThrough, Var};
use crate::grid::{BinaryMap, LabelMap};
use crate::tensor::Element;

pub const PROB_CLAMP: f64 = 1e-7;

/// Which pixels enter the boundary-agreement term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PositiveSet {
    /// Active in either the predicted or the ground-truth potential.
    #[default]
    Union,
    /// Active in both.
    Intersection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// λ1, boundary BCE weight.
    pub bce_weight: f64,
    /// λ2, segmentation cross-entropy weight.
    pub ce_weight: f64,
    /// λ3, boundary-agreement (ζ vs ζ̂) weight.
    pub reg_boundary_weight: f64,
    /// λ4, boundary-masked cross-entropy weight.
    pub reg_semantic_weight: f64,
    /// Gumbel softmax temperature τ.
    pub tau: f64,
    /// Confidence threshold on the boundary map for the masked CE.
    pub thrs: f64,
    pub zeta_sigma: f64,
    /// Pixels with potential above this count as boundary.
    pub zeta_eps: f64,
    pub positive_set: PositiveSet,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce_weight: 20.0,
            ce_weight: 1.0,
            reg_boundary_weight: 1.0,
            reg_semantic_weight: 1.0,
            tau: 1.0,
            thrs: 0.8,
            zeta_sigma: 1.0,
            zeta_eps: 1e-3,
            positive_set: PositiveSet::Union,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.bce_weight,
            self.ce_weight,
            self.reg_boundary_weight,
            self.reg_semantic_weight,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {weights:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.thrs > 0.0 && self.thrs < 1.0) {
            return Err(Error::Config(format!("thrs must lie in (0, 1), got {}", self.thrs)));
        }
        if !(self.zeta_sigma > 0.0) || !(self.zeta_eps >= 0.0) {
            return Err(Error::Config("zeta_sigma must be positive and zeta_eps non-negative".into()));
        }
        Ok(())
    }
}

/// Loss components (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub ce: f64,
    pub reg_fwd: f64,
    pub reg_bwd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &LossConfig) -> f64 {
        cfg.bce_weight * self.bce
            + cfg.ce_weight * self.ce
            + cfg.reg_boundary_weight * self.reg_fwd
            + cfg.reg_semantic_weight * self.reg_bwd
    }
}

fn clamp_prob<T: Element>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn plane_dims<T: Element>(g: &Graph<T>, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(v) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// `-mean_p [β ŝ log s + (1-β)(1-ŝ) log(1-s)]` with β the non-boundary
/// fraction of `gt`.
pub fn balanced_bce<T: Element>(g: &mut Graph<T>, s: Var, gt: &BinaryMap) -> Result<Var> {
    let (c, h, w) = plane_dims(g, s, "balanced_bce")?;
    if c != 1 || (h, w) != gt.dims() {
        return Err(Error::shape(
            "balanced_bce",
            format!("boundary map {:?} vs target {:?}", g.shape(s), gt.dims()),
        ));
    }
    let n = gt.len();
    if n == 0 {
        return Err(Error::invalid("balanced_bce", "empty map"));
    }
    let nf = T::lit(n as f64);
    let beta = T::lit((n - gt.count()) as f64 / n as f64);
    let one = T::one();
    let mut total = T::zero();
    let mut local = vec![T::zero(); n];
    for (i, (&sv, &target)) in g.value(s).iter().zip(gt.data()).enumerate() {
        let (p, clamped) = clamp_prob(sv);
        let (term, d) = if target {
            (beta * p.ln(), beta / p)
        } else {
            ((one - beta) * (one - p).ln(), -(one - beta) / (one - p))
        };
        total -= term;
        if !clamped {
            local[i] = -d / nf;
        }
    }
    g.reduce_with_grad(s, total / nf, local)
}

/// Mean negative log-likelihood of `labels` under `probs` over the selected
/// non-ignored pixels. `None` when nothing is selected.
fn masked_nll<T: Element>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &LabelMap,
    ignore: u8,
    select: Option<&[bool]>,
    op: &'static str,
) -> Result<Option<Var>> {
    let (k, h, w) = plane_dims(g, probs, op)?;
    if (h, w) != labels.dims() {
        return Err(Error::shape(op, format!("probabilities {h}×{w} vs labels {:?}", labels.dims())));
    }
    let plane = h * w;
    let pv = g.value(probs);
    let mut picked = Vec::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == ignore || select.is_some_and(|m| !m[i]) {
            continue;
        }
        if l as usize >= k {
            return Err(Error::invalid(op, format!("label {l} at pixel {i} outside 0..{k}")));
        }
        picked.push(l as usize * plane + i);
    }
    if picked.is_empty() {
        return Ok(None);
    }
    let nf = T::lit(picked.len() as f64);
    let mut total = T::zero();
    let mut local = vec![T::zero(); pv.len()];
    for &j in &picked {
        let (p, clamped) = clamp_prob(pv[j]);
        total -= p.ln();
        if !clamped {
            local[j] = -(p * nf).recip();
        }
    }
    g.reduce_with_grad(probs, total / nf, local).map(Some)
}

fn zero_loss<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    g.reduce_with_grad(x, T::zero(), vec![T::zero(); n])
}

/// Mean cross-entropy over non-ignored pixels.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, seg: &CategoricalMap, labels: &LabelMap, ignore: u8) -> Result<Var> {
    masked_nll(g, seg.probs, labels, ignore, None, "cross_entropy")?
        .ok_or_else(|| Error::invalid("cross_entropy", "every pixel is ignored"))
}

/// Standard Gumbel(0, 1) samples.
pub fn gumbel_noise<T: Element, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            T::lit(-(-u.ln()).ln())
        })
        .collect()
}

/// Boundary potential ζ of a categorical map: hard (straight-through)
/// assignment, Gaussian smoothing, per-class Sobel magnitude, then
/// `1/√2 · sqrt(Σ_k |∇_k|²)`. Returns a `1×H×W` map.
pub fn boundary_potential<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    cfg: &LossConfig,
    noise: Option<&[T]>,
    mode: StraightThrough,
) -> Result<Var> {
    let hard = g.straight_through(logits, cfg.tau, noise, mode)?;
    let smooth = g.gaussian_blur(hard, cfg.zeta_sigma)?;
    let mag = g.sobel_magnitude(smooth)?;
    g.channel_norm(mag, T::lit(FRAC_1_SQRT_2))
}

/// One-hot encoding of `labels` as a `K×H×W` buffer; ignored pixels are all
/// zero.
pub fn one_hot<T: Element>(labels: &LabelMap, classes: usize, ignore: u8) -> Result<Vec<T>> {
    let plane = labels.len();
    let mut out = vec![T::zero(); classes * plane];
    for (i, &l) in labels.data().iter().enumerate() {
        if l == ignore {
            continue;
        }
        if l as usize >= classes {
            return Err(Error::invalid("one_hot", format!("label {l} outside 0..{classes}")));
        }
        out[l as usize * plane + i] = T::one();
    }
    Ok(out)
}

/// ζ̂: the potential of the ground-truth labels through the same pipeline,
/// noise off.
pub fn gt_boundary_potential<T: Element>(
    labels: &LabelMap,
    classes: usize,
    ignore: u8,
    cfg: &LossConfig,
) -> Result<Vec<T>> {
    let (h, w) = labels.dims();
    let mut g = Graph::<T>::new();
    let onehot = g.constant(&[classes, h, w], one_hot(labels, classes, ignore)?)?;
    let zeta = boundary_potential(&mut g, onehot, cfg, None, StraightThrough::Hard)?;
    Ok(g.value(zeta).to_vec())
}

/// Pixels whose potential cannot be influenced by an ignored pixel: no
/// ignore label within the blur radius plus the Sobel footprint.
pub fn potential_support_mask(labels: &LabelMap, ignore: u8, zeta_sigma: f64) -> Vec<bool> {
    let r = (3.0 * zeta_sigma).ceil() as isize + 1;
    let (h, w) = labels.dims();
    let mut out = vec![true; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if labels.get(y as usize, x as usize) != ignore {
                continue;
            }
            for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                    out[yy as usize * w + xx as usize] = false;
                }
            }
        }
    }
    out
}

/// `mean_{p+} |ζ - ζ̂|`; zero when no pixel is active.
pub fn reg_loss_boundary<T: Element>(
    g: &mut Graph<T>,
    zeta: Var,
    zeta_hat: &[T],
    valid: Option<&[bool]>,
    zeta_eps: f64,
    set: PositiveSet,
) -> Result<Var> {
    let n = g.value(zeta).len();
    if zeta_hat.len() != n || valid.is_some_and(|v| v.len() != n) {
        return Err(Error::shape("reg_loss_boundary", "ζ, ζ̂ and mask must have equal size"));
    }
    let eps = T::lit(zeta_eps);
    let zv = g.value(zeta);
    let active: Vec<usize> = (0..n)
        .filter(|&i| {
            let (a, b) = (zv[i] > eps, zeta_hat[i] > eps);
            let hit = match set {
                PositiveSet::Union => a || b,
                PositiveSet::Intersection => a && b,
            };
            hit && valid.is_none_or(|v| v[i])
        })
        .collect();
    if active.is_empty() {
        return zero_loss(g, zeta);
    }
    let nf = T::lit(active.len() as f64);
    let mut total = T::zero();
    let mut local = vec![T::zero(); n];
    for &i in &active {
        let d = zv[i] - zeta_hat[i];
        total += d.abs();
        local[i] = if d > T::zero() {
            nf.recip()
        } else if d < T::zero() {
            -nf.recip()
        } else {
            T::zero()
        };
    }
    g.reduce_with_grad(zeta, total / nf, local)
}

/// Cross-entropy restricted to pixels where the boundary map exceeds `thrs`.
/// The mask is hard: no gradient reaches `boundary`.
pub fn reg_loss_semantic<T: Element>(
    g: &mut Graph<T>,
    boundary: Var,
    seg: &CategoricalMap,
    labels: &LabelMap,
    ignore: u8,
    thrs: f64,
) -> Result<Var> {
    if g.value(boundary).len() != labels.len() {
        return Err(Error::shape("reg_loss_semantic", "boundary map and labels differ in size"));
    }
    let t = T::lit(thrs);
    let mask: Vec<bool> = g.value(boundary).iter().map(|&s| s > t).collect();
    match masked_nll(g, seg.probs, labels, ignore, Some(&mask), "reg_loss_semantic")? {
        Some(v) => Ok(v),
        None => zero_loss(g, seg.probs),
    }
}

/// Ground truth for one sample.
pub struct LossTargets<'a> {
    pub labels: &'a LabelMap,
    pub gt_boundary: &'a BinaryMap,
    pub ignore: u8,
}

/// Options for the dual-task terms; `None` disables them.
pub struct DualTask<'a, T> {
    pub noise: Option<&'a [T]>,
    pub mode: StraightThrough,
}

/// Weighted objective. The boundary terms need `boundary`; the regularizer
/// runs only when `dual` is given.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    boundary: Option<Var>,
    seg: &CategoricalMap,
    targets: &LossTargets<'_>,
    cfg: &LossConfig,
    dual: Option<DualTask<'_, T>>,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(4);
    let mut parts = LossBreakdown::default();

    let ce = cross_entropy(g, seg, targets.labels, targets.ignore)?;
    parts.ce = g.item(ce).as_f64();
    terms.push((ce, T::lit(cfg.ce_weight)));

    if let Some(s) = boundary {
        let bce = balanced_bce(g, s, targets.gt_boundary)?;
        parts.bce = g.item(bce).as_f64();
        terms.push((bce, T::lit(cfg.bce_weight)));
    }

    if let Some(dual) = dual {
        let zeta = boundary_potential(g, seg.logits, cfg, dual.noise, dual.mode)?;
        let zeta_hat = gt_boundary_potential::<T>(targets.labels, seg.classes, targets.ignore, cfg)?;
        let valid = potential_support_mask(targets.labels, targets.ignore, cfg.zeta_sigma);
        let fwd = reg_loss_boundary(g, zeta, &zeta_hat, Some(&valid), cfg.zeta_eps, cfg.positive_set)?;
        parts.reg_fwd = g.item(fwd).as_f64();
        terms.push((fwd, T::lit(cfg.reg_boundary_weight)));
        if let Some(s) = boundary {
            let bwd = reg_loss_semantic(g, s, seg, targets.labels, targets.ignore, cfg.thrs)?;
            parts.reg_bwd = g.item(bwd).as_f64();
            terms.push((bwd, T::lit(cfg.reg_semantic_weight)));
        }
    }

    let total = g.combine(&terms)?;
    parts.total = g.item(total).as_f64();
    Ok((total, parts))
}
