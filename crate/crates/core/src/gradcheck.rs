//! Central finite-difference checks of every differentiable op and of the
//! complete training objective, in 64-bit.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::synth::derive_seed;
use crate::error::{Error, Result};
use crate::fusion::CategoricalMap;
use crate::graph::{Graph, StraightThrough, Var};
use crate::grid::{BinaryMap, Grid, LabelMap, IGNORE_LABEL};
use crate::kernels::conv::ConvSpec;
use crate::losses::{self, DualTask, LossConfig, LossTargets, PositiveSet};
use crate::metrics::gt_boundary_from_mask;
use crate::model::{self, ModelConfig};
use crate::params::Bound;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so that entries whose true
/// derivative is below it are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const GRAPH_TOLERANCE: f64 = 1e-3;
/// Entries checked per input tensor in the op checks.
const MAX_ENTRIES: usize = 96;
/// Entries checked per parameter tensor in the full-graph check.
const PARAM_ENTRIES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalar objective: the op output itself when scalar, otherwise its inner
/// product with a fixed random tensor.
fn objective(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let r = randn(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let rv = g.leaf(&r);
    let prod = g.mul(out, rv)?;
    Ok(g.sum(prod))
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build<'_>, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars)?;
    let loss = objective(&mut g, out, seed)?;
    Ok(g.item(loss))
}

fn entries(n: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Compares the backward pass of `analytic` with central differences of
/// `numeric` (usually the same function).
pub fn check_against(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    analytic: &Build<'_>,
    numeric: &Build<'_>,
) -> Result<CheckResult> {
    let seed = derive_seed(0x6772_6164, name.len() as u64 ^ name.bytes().map(u64::from).sum::<u64>());
    let inputs: Vec<Tensor<f64>> = inputs.into_iter().map(Tensor::with_grad).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = analytic(&mut g, &vars)?;
    let loss = objective(&mut g, out, seed)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in entries(inputs[k].len(), MAX_ENTRIES, &mut rng) {
            let mut probe = inputs.clone();
            probe[k].data_mut()[i] += STEP;
            let up = evaluate(&probe, numeric, seed)?;
            probe[k].data_mut()[i] -= 2.0 * STEP;
            let down = evaluate(&probe, numeric, seed)?;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grad[i], fd));
            count += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
        entries: count,
    })
}

pub fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build<'_>) -> Result<CheckResult> {
    check_against(name, inputs, build, build)
}

/// Values of `t` pushed at least `margin` away from every point in `kinks`.
fn away_from(mut t: Tensor<f64>, kinks: &[f64], margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = if *v >= k { k + margin } else { k - margin };
            }
        }
    }
    t
}

fn block_labels(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let cuts: Vec<usize> = (0..3).map(|_| rng.random_range(2..h.min(w) - 2)).collect();
    Grid::from_fn(h, w, |y, x| {
        if x == 0 && y < 3 {
            IGNORE_LABEL
        } else {
            (((y > cuts[0]) as usize + 2 * (x > cuts[1]) as usize + (x + y > cuts[2] + 4) as usize) % k) as u8
        }
    })
}

fn seg_of(probs: Var, k: usize) -> CategoricalMap {
    CategoricalMap {
        logits: probs,
        probs,
        classes: k,
    }
}

/// One check per differentiable op, fused loss and composite.
pub fn op_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_917);
    let r = &mut rng;
    let mut out = Vec::new();

    for (label, spec, k) in [
        ("conv2d 3x3 pad 1", ConvSpec::new(1, 1, 1), 3),
        ("conv2d 3x3 stride 2", ConvSpec::new(2, 1, 1), 3),
        ("conv2d 3x3 dilation 2", ConvSpec::new(1, 2, 2), 3),
        ("conv2d 1x1", ConvSpec::new(1, 1, 0), 1),
    ] {
        out.push(check_op(
            label,
            vec![randn(r, &[3, 7, 6], 1.0), randn(r, &[4, 3, k, k], 0.5), randn(r, &[4], 0.5)],
            &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec),
        )?);
    }
    out.push(check_op("add", vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 3, 4], 1.0)], &|g, v| {
        g.add(v[0], v[1])
    })?);
    out.push(check_op("mul", vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 3, 4], 1.0)], &|g, v| {
        g.mul(v[0], v[1])
    })?);
    out.push(check_op("scale", vec![randn(r, &[2, 3, 4], 1.0)], &|g, v| Ok(g.scale(v[0], -1.7)))?);
    out.push(check_op(
        "mul_channels",
        vec![randn(r, &[3, 4, 5], 1.0), uniform(r, &[1, 4, 5], 0.1, 0.9)],
        &|g, v| g.mul_channels(v[0], v[1]),
    )?);
    out.push(check_op("relu", vec![away_from(randn(r, &[2, 5, 5], 1.0), &[0.0], 0.01)], &|g, v| {
        Ok(g.relu(v[0]))
    })?);
    out.push(check_op("sigmoid", vec![randn(r, &[2, 4, 4], 2.0)], &|g, v| Ok(g.sigmoid(v[0])))?);
    out.push(check_op("softmax_channels", vec![randn(r, &[4, 3, 5], 2.0)], &|g, v| {
        g.softmax_channels(v[0])
    })?);
    out.push(check_op(
        "group_norm",
        vec![randn(r, &[16, 3, 4], 1.0), uniform(r, &[16], 0.5, 1.5), randn(r, &[16], 0.3)],
        &|g, v| g.group_norm(v[0], v[1], v[2], 8),
    )?);
    out.push(check_op("concat", vec![randn(r, &[2, 3, 3], 1.0), randn(r, &[1, 3, 3], 1.0)], &|g, v| {
        g.concat(&[v[0], v[1]])
    })?);
    out.push(check_op("bilinear_upsample", vec![randn(r, &[2, 3, 5], 1.0)], &|g, v| {
        g.bilinear_resize(v[0], 7, 12)
    })?);
    out.push(check_op("bilinear_downsample", vec![randn(r, &[2, 8, 8], 1.0)], &|g, v| {
        g.bilinear_resize(v[0], 3, 5)
    })?);
    out.push(check_op("global_avg_pool", vec![randn(r, &[3, 4, 5], 1.0)], &|g, v| {
        g.global_avg_pool(v[0])
    })?);
    out.push(check_op("broadcast", vec![randn(r, &[3, 1, 1], 1.0)], &|g, v| g.broadcast(v[0], 4, 3))?);
    out.push(check_op("gaussian_blur", vec![randn(r, &[2, 9, 11], 1.0)], &|g, v| {
        g.gaussian_blur(v[0], 1.0)
    })?);
    out.push(check_op("sobel_magnitude", vec![randn(r, &[2, 6, 7], 1.0)], &|g, v| {
        g.sobel_magnitude(v[0])
    })?);
    out.push(check_op("channel_norm", vec![randn(r, &[3, 4, 4], 1.0)], &|g, v| {
        g.channel_norm(v[0], 0.7)
    })?);
    out.push(check_op("sum", vec![randn(r, &[2, 3, 3], 1.0)], &|g, v| Ok(g.sum(v[0])))?);
    out.push(check_op("mean", vec![randn(r, &[2, 3, 3], 1.0)], &|g, v| Ok(g.mean(v[0])))?);
    out.push(check_op("combine", vec![randn(r, &[1], 1.0), randn(r, &[1], 1.0)], &|g, v| {
        g.combine(&[(v[0], 20.0), (v[1], 0.5)])
    })?);

    let noise = losses::gumbel_noise::<f64, _>(r, 3 * 5 * 4);
    for tau in [1.0, 0.5] {
        let noise = &noise;
        out.push(check_against(
            &format!("gumbel_hard_softmax tau {tau}"),
            vec![randn(r, &[3, 5, 4], 1.5)],
            &move |g, v| g.straight_through(v[0], tau, Some(noise), StraightThrough::Hard),
            &move |g, v| g.straight_through(v[0], tau, Some(noise), StraightThrough::Relaxed),
        )?);
    }
    let cfg = LossConfig::default();
    out.push(check_op("boundary_potential", vec![randn(r, &[3, 8, 9], 2.0)], &move |g, v| {
        losses::boundary_potential(g, v[0], &cfg, None, StraightThrough::Relaxed)
    })?);

    let gt: BinaryMap = Grid::from_fn(6, 7, |y, x| (x + 2 * y) % 5 == 0);
    out.push(check_op("balanced_bce", vec![uniform(r, &[1, 6, 7], 0.05, 0.95)], &|g, v| {
        losses::balanced_bce(g, v[0], &gt)
    })?);
    let labels = block_labels(6, 7, 3, r);
    out.push(check_op("cross_entropy", vec![uniform(r, &[3, 6, 7], 0.05, 0.95)], &|g, v| {
        losses::cross_entropy(g, &seg_of(v[0], 3), &labels, IGNORE_LABEL)
    })?);
    let zeta_hat: Vec<f64> = (0..42).map(|i| if i % 3 == 0 { 0.0 } else { 0.3 }).collect();
    let zeta = away_from(uniform(r, &[1, 6, 7], 0.0, 0.6), &[0.0, 0.3, cfg.zeta_eps], 0.01);
    out.push(check_op("reg_loss_boundary", vec![zeta], &|g, v| {
        losses::reg_loss_boundary(g, v[0], &zeta_hat, None, cfg.zeta_eps, PositiveSet::Union)
    })?);
    let s = away_from(uniform(r, &[1, 6, 7], 0.0, 1.0), &[cfg.thrs], 0.05);
    out.push(check_op("reg_loss_semantic", vec![uniform(r, &[3, 6, 7], 0.05, 0.95)], &|g, v| {
        let sv = g.leaf(&s);
        losses::reg_loss_semantic(g, sv, &seg_of(v[0], 3), &labels, IGNORE_LABEL, cfg.thrs)
    })?);
    Ok(out)
}

/// Largest gap between sorted boundary values inside (0.2, 0.95); keeps the
/// confidence mask of the semantic term away from any finite-difference
/// crossing.
fn threshold_in_gap(s: &[f64]) -> f64 {
    let mut v: Vec<f64> = s.iter().copied().filter(|x| (0.2..0.95).contains(x)).collect();
    v.push(0.2);
    v.push(0.95);
    v.sort_by(f64::total_cmp);
    let (mut best, mut at) = (0.0, 0.5);
    for pair in v.windows(2) {
        if pair[1] - pair[0] > best {
            best = pair[1] - pair[0];
            at = 0.5 * (pair[0] + pair[1]);
        }
    }
    at
}

/// Gradient of `total_loss` through the whole network with respect to a
/// sample of parameter entries.
pub fn full_graph_check(h: usize, w: usize, classes: usize, seed: u64) -> Result<CheckResult> {
    let mcfg = ModelConfig::full(classes);
    let params = model::init_params(&mcfg, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let image = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
    let image_grad = Tensor::new(&[1, h, w], (0..h * w).map(|_| (rng.random::<f64>() < 0.2) as u8 as f64).collect())?;
    let labels = block_labels(h, w, classes, &mut rng);
    let gt = gt_boundary_from_mask(&labels, 2, IGNORE_LABEL);
    let noise = losses::gumbel_noise::<f64, _>(&mut rng, classes * h * w);

    // smooth instance: every pixel stays in the agreement set
    let mut cfg = LossConfig {
        zeta_eps: 0.0,
        ..LossConfig::default()
    };
    let run = |store: &crate::params::ParameterStore<f64>, cfg: &LossConfig, grads: bool| -> Result<(f64, Vec<f64>, Option<std::collections::BTreeMap<String, Vec<f64>>>)> {
        let mut g = Graph::<f64>::new();
        let mut p = if grads { Bound::new(store) } else { Bound::frozen(store) };
        let img = g.leaf(&image);
        let eg = g.leaf(&image_grad);
        let out = model::forward(&mut g, &mut p, &mcfg, img, eg)?;
        let s = out.boundary().expect("full model has a boundary map");
        let targets = LossTargets {
            labels: &labels,
            gt_boundary: &gt,
            ignore: IGNORE_LABEL,
        };
        let dual = DualTask {
            noise: Some(&noise),
            mode: StraightThrough::Relaxed,
        };
        let (loss, _) = losses::total_loss(&mut g, Some(s), &out.seg, &targets, cfg, Some(dual))?;
        let sv = g.value(s).to_vec();
        let value = g.item(loss);
        if grads {
            g.backward(loss)?;
            Ok((value, sv, Some(p.gradients(&g))))
        } else {
            Ok((value, sv, None))
        }
    };
    let (_, s0, _) = run(&params, &cfg, false)?;
    cfg.thrs = threshold_in_gap(&s0);
    let (_, _, grads) = run(&params, &cfg, true)?;
    let grads = grads.expect("requested");

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).unwrap().tensor.len();
        for i in entries(n, PARAM_ENTRIES, &mut rng) {
            let mut probe = params.clone();
            probe.get_mut(name).unwrap().tensor.data_mut()[i] += STEP;
            let (up, ..) = run(&probe, &cfg, false)?;
            probe.get_mut(name).unwrap().tensor.data_mut()[i] -= 2.0 * STEP;
            let (down, ..) = run(&probe, &cfg, false)?;
            let fd = (up - down) / (2.0 * STEP);
            let analytic = grads.get(name).map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(analytic, fd));
            count += 1;
        }
    }
    Ok(CheckResult {
        name: format!("total_loss {h}x{w} K={classes}"),
        max_rel_err: worst,
        tolerance: GRAPH_TOLERANCE,
        entries: count,
    })
}

pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

/// Every op check plus the full objective on a 16×16, 3-class instance.
pub fn run_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = op_checks()?;
    results.push(full_graph_check(16, 16, 3, 5)?);
    if results.iter().any(|r| !r.max_rel_err.is_finite()) {
        return Err(Error::NonFinite("finite-difference estimate".into()));
    }
    Ok(SuiteReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu forward with sigmoid backward is caught
        let x = Tensor::new(&[1, 1, 3], vec![0.5, -0.7, 1.2]).unwrap();
        let r = check_against("mismatch", vec![x], &|g, v| Ok(g.sigmoid(v[0])), &|g, v| Ok(g.relu(v[0]))).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn gap_threshold() {
        assert_eq!(threshold_in_gap(&[0.3, 0.9]), 0.6);
        assert!((threshold_in_gap(&[]) - 0.575).abs() < 1e-12);
    }
}
