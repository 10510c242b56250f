//! Training, evaluation and single-image inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{self, Section};
use crate::data::dataset::{self, Manifest};
use crate::data::pnm::{self, RgbImage};
use crate::data::synth::{derive_seed, SegSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, StraightThrough};
use crate::grid::{Grid, LabelMap, IGNORE_LABEL};
use crate::losses::{self, DualTask, LossBreakdown, LossConfig, LossTargets, PositiveSet};
use crate::metrics::{CropSpec, EvalReport, Evaluator, DEFAULT_TOLERANCES};
use crate::model::{self, ModelConfig};
use crate::params::{Bound, ParameterStore, StreamTag};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,epoch,lr,bce,ce,reg_fwd,reg_bwd,total";
pub const CHECKPOINT_FILE: &str = "checkpoint.gsck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_LOG_FILE: &str = "eval.csv";
pub const CLASSES_FILE: &str = "classes.csv";
pub const CROP_FILE: &str = "crop.csv";
/// Fraction of samples, taken from the end, held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const FLIP_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub shape_stream: bool,
    pub gradients_input: bool,
    pub dual_task: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        shape_stream: true,
        gradients_input: true,
        dual_task: true,
    };
    pub const BASELINE: Ablation = Ablation {
        shape_stream: false,
        gradients_input: false,
        dual_task: false,
    };
    /// Gated shape stream and gradients without the dual-task terms.
    pub const GCL: Ablation = Ablation {
        shape_stream: true,
        gradients_input: true,
        dual_task: false,
    };

    /// Without the shape stream nothing else can be on.
    pub fn normalized(self) -> Self {
        if self.shape_stream {
            self
        } else {
            Ablation::BASELINE
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tolerances: Vec<f64>,
    pub crop: CropSpec,
    pub crop_factors: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerances: DEFAULT_TOLERANCES.to_vec(),
            crop: CropSpec { base_margin: 6 },
            crop_factors: vec![0, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Use only the first `n` training samples; 0 means all.
    pub train_samples: usize,
    pub flip: bool,
    /// Evaluate every `n` epochs; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub gumbel_noise: bool,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("run"),
            epochs: 30,
            batch_size: 4,
            base_lr: 1e-2,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            train_samples: 0,
            flip: false,
            eval_every: 0,
            gumbel_noise: true,
            loss: LossConfig::default(),
            ablation: Ablation::FULL,
            eval: EvalConfig::default(),
        }
    }
}

pub const SECTIONS: [&str; 6] = ["data", "train", "loss", "ablation", "eval", "dataset"];

impl TrainConfig {
    /// Reads `[data]`, `[train]`, `[loss]`, `[ablation]` and `[eval]`.
    pub fn from_doc(doc: &toml::Table) -> Result<Self> {
        config::check_sections(doc, &SECTIONS)?;
        let d = TrainConfig::default();

        let data = Section::new(doc, "data")?;
        let dataset_dir = data.string("dir")?.map_or(d.dataset_dir.clone(), PathBuf::from);
        data.finish()?;

        let t = Section::new(doc, "train")?;
        let mut cfg = TrainConfig {
            dataset_dir,
            output_dir: t.string("output")?.map_or(d.output_dir.clone(), PathBuf::from),
            epochs: t.usize("epochs", d.epochs)?,
            batch_size: t.usize("batch_size", d.batch_size)?,
            base_lr: t.f64("lr", d.base_lr)?,
            lr_power: t.f64("lr_power", d.lr_power)?,
            momentum: t.f64("momentum", d.momentum)?,
            weight_decay: t.f64("weight_decay", d.weight_decay)?,
            seed: t.u64("seed", d.seed)?,
            train_samples: t.usize("train_samples", d.train_samples)?,
            flip: t.bool("flip", d.flip)?,
            eval_every: t.usize("eval_every", d.eval_every)?,
            gumbel_noise: t.bool("gumbel_noise", d.gumbel_noise)?,
            ..d.clone()
        };
        t.finish()?;

        let l = Section::new(doc, "loss")?;
        let dl = LossConfig::default();
        cfg.loss = LossConfig {
            bce_weight: l.f64("bce_weight", dl.bce_weight)?,
            ce_weight: l.f64("ce_weight", dl.ce_weight)?,
            reg_boundary_weight: l.f64("reg_boundary_weight", dl.reg_boundary_weight)?,
            reg_semantic_weight: l.f64("reg_semantic_weight", dl.reg_semantic_weight)?,
            tau: l.f64("tau", dl.tau)?,
            thrs: l.f64("thrs", dl.thrs)?,
            zeta_sigma: l.f64("zeta_sigma", dl.zeta_sigma)?,
            zeta_eps: l.f64("zeta_eps", dl.zeta_eps)?,
            positive_set: match l.string("positive_set")?.as_deref() {
                None | Some("union") => PositiveSet::Union,
                Some("intersection") => PositiveSet::Intersection,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "loss.positive_set: expected union or intersection, got {other}"
                    )))
                }
            },
        };
        l.finish()?;

        let a = Section::new(doc, "ablation")?;
        cfg.ablation = Ablation {
            shape_stream: a.bool("shape_stream", d.ablation.shape_stream)?,
            gradients_input: a.bool("gradients_input", d.ablation.gradients_input)?,
            dual_task: a.bool("dual_task", d.ablation.dual_task)?,
        }
        .normalized();
        a.finish()?;

        let e = Section::new(doc, "eval")?;
        cfg.eval = EvalConfig {
            tolerances: e.f64_list("tolerances", &d.eval.tolerances)?,
            crop: CropSpec {
                base_margin: e.usize("crop_base_margin", d.eval.crop.base_margin)?,
            },
            crop_factors: e.usize_list("crop_factors", &d.eval.crop_factors)?,
        };
        e.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc = config::parse(text)?;
        for o in overrides {
            config::apply_override(&mut doc, o)?;
        }
        TrainConfig::from_doc(&doc)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(self.lr_power > 0.0) {
            return fail(format!("lr {} and lr_power {} must be positive", self.base_lr, self.lr_power));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.eval.tolerances.iter().any(|t| !(*t >= 0.0)) {
            return fail("eval tolerances must be non-negative".into());
        }
        Ok(())
    }

    /// Canonical text form of the training recipe, stored in checkpoints.
    /// Dataset and output locations are left out so a run can be moved or
    /// repeated elsewhere.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let l = &self.loss;
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let ulist = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        writeln!(
            s,
            "[train]\nepochs = {}\nbatch_size = {}\nlr = {:?}\nlr_power = {:?}\nmomentum = {:?}\nweight_decay = {:?}\nseed = {}\ntrain_samples = {}\nflip = {}\neval_every = {}\ngumbel_noise = {}\n",
            self.epochs,
            self.batch_size,
            self.base_lr,
            self.lr_power,
            self.momentum,
            self.weight_decay,
            self.seed,
            self.train_samples,
            self.flip,
            self.eval_every,
            self.gumbel_noise
        )
        .unwrap();
        writeln!(
            s,
            "[loss]\nbce_weight = {:?}\nce_weight = {:?}\nreg_boundary_weight = {:?}\nreg_semantic_weight = {:?}\ntau = {:?}\nthrs = {:?}\nzeta_sigma = {:?}\nzeta_eps = {:?}\npositive_set = \"{}\"\n",
            l.bce_weight,
            l.ce_weight,
            l.reg_boundary_weight,
            l.reg_semantic_weight,
            l.tau,
            l.thrs,
            l.zeta_sigma,
            l.zeta_eps,
            match l.positive_set {
                PositiveSet::Union => "union",
                PositiveSet::Intersection => "intersection",
            }
        )
        .unwrap();
        writeln!(
            s,
            "[ablation]\nshape_stream = {}\ngradients_input = {}\ndual_task = {}\n",
            self.ablation.shape_stream, self.ablation.gradients_input, self.ablation.dual_task
        )
        .unwrap();
        write!(
            s,
            "[eval]\ntolerances = [{}]\ncrop_base_margin = {}\ncrop_factors = [{}]\n",
            list(&self.eval.tolerances),
            self.eval.crop.base_margin,
            ulist(&self.eval.crop_factors)
        )
        .unwrap();
        s
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            shape_stream: self.ablation.shape_stream,
            gradients_input: self.ablation.gradients_input,
        }
    }
}

/// `base · (1 − t/T)^power`, zero from `t = T` on.
pub fn poly_lr(base: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

/// Indices `(train, validation)`; validation is the last 20% by index.
pub fn split(count: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let val = (count as f64 * VALIDATION_FRACTION).round() as usize;
    let val = val.min(count.saturating_sub(1));
    (0..count - val, count - val..count)
}

/// Number of classes, read back from the classifier kernel.
pub fn checkpoint_classes(params: &ParameterStore) -> Result<usize> {
    params
        .get("fusion.classifier.weight")
        .map(|p| p.tensor.shape()[0])
        .ok_or_else(|| Error::Config("checkpoint has no fusion.classifier.weight".into()))
}

/// Architecture of stored parameters.
pub fn checkpoint_model(params: &ParameterStore) -> Result<ModelConfig> {
    let classes = checkpoint_classes(params)?;
    let shape_stream = params.with_tag(StreamTag::Shape).next().is_some();
    let pyramid_in = params
        .get("fusion.pool.weight")
        .map(|p| p.tensor.shape()[1])
        .ok_or_else(|| Error::Config("checkpoint has no fusion.pool.weight".into()))?;
    let base = crate::regular_stream::feature_channels() + shape_stream as usize;
    Ok(ModelConfig {
        classes,
        shape_stream,
        gradients_input: pyramid_in > base,
    })
}

fn check_finite(what: &str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn input_leaves(g: &mut Graph<f32>, sample: &SegSample) -> (crate::Var, crate::Var) {
    (g.leaf(&sample.image), g.leaf(&sample.image_grad))
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    params: &ParameterStore,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    dual_task: bool,
    sample: &SegSample,
    noise_seed: Option<u64>,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f32>>)> {
    let mut g = Graph::<f32>::new();
    let mut p = Bound::new(params);
    let (img, grad) = input_leaves(&mut g, sample);
    let out = model::forward(&mut g, &mut p, model_cfg, img, grad)?;
    let (h, w) = sample.dims();
    let noise = noise_seed.map(|s| {
        losses::gumbel_noise::<f32, _>(&mut ChaCha8Rng::seed_from_u64(s), model_cfg.classes * h * w)
    });
    let dual = dual_task.then(|| DualTask {
        noise: noise.as_deref(),
        mode: StraightThrough::Hard,
    });
    let targets = LossTargets {
        labels: &sample.labels,
        gt_boundary: &sample.gt_boundary,
        ignore: IGNORE_LABEL,
    };
    let (loss, parts) = losses::total_loss(&mut g, out.boundary(), &out.seg, &targets, loss_cfg, dual)?;
    if !parts.total.is_finite() {
        for (name, v) in [("ce", parts.ce), ("bce", parts.bce), ("reg_fwd", parts.reg_fwd), ("reg_bwd", parts.reg_bwd)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name}")));
            }
        }
        return Err(Error::NonFinite("loss total".into()));
    }
    g.backward(loss)?;
    let grads = p.gradients(&g);
    for (name, gr) in &grads {
        check_finite(&format!("gradient of {name}"), gr)?;
    }
    Ok((parts, grads))
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ v + (g + λ w)`, `w ← w − lr v`.
pub fn sgd_step(
    params: &mut ParameterStore,
    momentum: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Vec<f32>>,
    lr: f64,
    mu: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mu, wd) = (lr as f32, mu as f32, weight_decay as f32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let v = momentum
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        let w = p.tensor.data_mut();
        for ((w, v), &g) in w.iter_mut().zip(v.data_mut()).zip(g) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
        check_finite(&format!("parameter {name}"), w)?;
    }
    Ok(())
}

/// Hard labels (lowest class wins ties) and, when present, the boundary map.
pub fn predict(params: &ParameterStore, model_cfg: &ModelConfig, sample: &SegSample) -> Result<(LabelMap, Option<Vec<f32>>)> {
    let mut g = Graph::<f32>::new();
    let mut p = Bound::frozen(params);
    let (img, grad) = input_leaves(&mut g, sample);
    let out = model::forward(&mut g, &mut p, model_cfg, img, grad)?;
    let (h, w) = sample.dims();
    let plane = h * w;
    let probs = g.value(out.seg.probs);
    let labels = Grid::from_fn(h, w, |y, x| {
        let i = y * w + x;
        let mut best = 0;
        for c in 1..model_cfg.classes {
            if probs[c * plane + i] > probs[best * plane + i] {
                best = c;
            }
        }
        best as u8
    });
    Ok((labels, out.boundary().map(|s| g.value(s).to_vec())))
}

/// Evaluates `params` on `samples`. With `bypass` the ground truth is
/// scored against itself, which checks the harness alone.
pub fn evaluate_samples(
    params: &ParameterStore,
    model_cfg: &ModelConfig,
    samples: &[SegSample],
    eval: &EvalConfig,
    bypass: bool,
) -> Result<EvalReport> {
    let mut ev = Evaluator::new(model_cfg.classes, IGNORE_LABEL, &eval.tolerances, eval.crop, &eval.crop_factors);
    for s in samples {
        let pred = if bypass {
            s.labels.map(|l| if l == IGNORE_LABEL { 0 } else { l })
        } else {
            predict(params, model_cfg, s)?.0
        };
        ev.add(&pred, &s.labels)?;
    }
    Ok(ev.finish())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CLASSES_FILE), &report.classes_csv())?;
    write_file(&dir.join(CROP_FILE), &report.crop_csv())
}

/// Progress callback payload.
#[derive(Clone, Debug)]
pub enum Progress<'a> {
    Step { step: u64, epoch: usize, lr: f64, loss: &'a LossBreakdown },
    Eval { epoch: usize, report: &'a EvalReport },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Validation report after the last epoch (training samples when the
    /// validation split is empty).
    pub report: EvalReport,
    /// Per-step loss breakdowns of this invocation.
    pub history: Vec<LossBreakdown>,
}

fn csv_row(step: u64, epoch: usize, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "{step},{epoch},{lr:e},{:e},{:e},{:e},{:e},{:e}\n",
        b.bce, b.ce, b.reg_fwd, b.reg_bwd, b.total
    )
}

fn eval_row(epoch: usize, r: &EvalReport) -> String {
    let mut s = format!("{epoch},{:.6},{:.6}", r.miou, r.pixel_accuracy);
    for f in &r.mean_f {
        write!(s, ",{f:.6}").unwrap();
    }
    s.push('\n');
    s
}

fn eval_header(r: &EvalReport) -> String {
    let mut s = String::from("epoch,miou,pixel_accuracy");
    for t in &r.tolerances {
        write!(s, ",mean_f_{t}px").unwrap();
    }
    s.push('\n');
    s
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains from scratch or, with `resume`, continues a checkpoint written by
/// the same configuration.
pub fn train(cfg: &TrainConfig, resume: Option<Checkpoint>, mut progress: impl FnMut(Progress<'_>)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, samples) = dataset::load_dataset(&cfg.dataset_dir)?;
    train_on(cfg, &manifest, &samples, resume, &mut progress)
}

/// As [`train`] with the dataset already in memory.
pub fn train_on(
    cfg: &TrainConfig,
    manifest: &Manifest,
    samples: &[SegSample],
    resume: Option<Checkpoint>,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(manifest.classes);
    let (train_range, val_range) = split(samples.len());
    let mut train_idx: Vec<usize> = train_range.collect();
    if cfg.train_samples > 0 {
        train_idx.truncate(cfg.train_samples);
    }
    if train_idx.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let val: &[SegSample] = if val_range.is_empty() || cfg.train_samples > 0 {
        // overfitting runs are judged on what they trained on
        &samples[train_idx[0]..train_idx[train_idx.len() - 1] + 1]
    } else {
        &samples[val_range]
    };

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let eval_path = out.join(EVAL_LOG_FILE);

    let (mut params, mut momentum, start_epoch, mut step) = match resume {
        Some(ck) => {
            if ck.config != cfg.canonical() {
                return Err(Error::Config("checkpoint was written by a different configuration".into()));
            }
            let ck_model = checkpoint_model(&ck.params)?;
            if ck_model != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint model {ck_model:?} does not match dataset/config {model_cfg:?}"
                )));
            }
            if !metrics_path.exists() {
                write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
            }
            (ck.params, ck.momentum, ck.epoch as usize, ck.step)
        }
        None => {
            write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
            let _ = fs::remove_file(&eval_path);
            (model::init_params(&model_cfg, cfg.seed)?, BTreeMap::new(), 0, 0)
        }
    };

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let dual = cfg.ablation.dual_task;
    let mut history = Vec::new();
    let mut report = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(cfg.seed, SHUFFLE_STREAM),
            epoch as u64,
        )));
        let mut rows = String::new();
        for batch in order.chunks(cfg.batch_size) {
            let lr = poly_lr(cfg.base_lr, step, total_steps, cfg.lr_power);
            let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut mean = LossBreakdown::default();
            for (j, &i) in batch.iter().enumerate() {
                let draw = step * cfg.batch_size as u64 + j as u64;
                let flipped;
                let sample = if cfg.flip
                    && ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, FLIP_STREAM), draw)).random::<bool>()
                {
                    flipped = samples[i].flipped(manifest.boundary_radius)?;
                    &flipped
                } else {
                    &samples[i]
                };
                let noise_seed = cfg
                    .gumbel_noise
                    .then(|| derive_seed(derive_seed(cfg.seed, NOISE_STREAM), draw));
                let (parts, grads) = sample_gradients(&params, &model_cfg, &cfg.loss, dual, sample, noise_seed)
                    .map_err(|e| match e {
                        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, step {step}, sample {i})")),
                        other => other,
                    })?;
                for (name, gr) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.iter_mut().zip(&gr).for_each(|(a, g)| *a += g),
                        None => {
                            acc.insert(name, gr);
                        }
                    }
                }
                mean.bce += parts.bce;
                mean.ce += parts.ce;
                mean.reg_fwd += parts.reg_fwd;
                mean.reg_bwd += parts.reg_bwd;
                mean.total += parts.total;
            }
            let n = batch.len() as f64;
            let inv = 1.0 / batch.len() as f32;
            acc.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            for v in [&mut mean.bce, &mut mean.ce, &mut mean.reg_fwd, &mut mean.reg_bwd, &mut mean.total] {
                *v /= n;
            }
            sgd_step(&mut params, &mut momentum, &acc, lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, step {step})")),
                    other => other,
                })?;
            rows.push_str(&csv_row(step, epoch, lr, &mean));
            progress(Progress::Step {
                step,
                epoch,
                lr,
                loss: &mean,
            });
            history.push(mean);
            step += 1;
        }
        append(&metrics_path, &rows)?;

        let done = epoch + 1;
        let last = done == cfg.epochs;
        if last || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let r = evaluate_samples(&params, &model_cfg, val, &cfg.eval, false)?;
            if !eval_path.exists() {
                write_file(&eval_path, &eval_header(&r))?;
            }
            append(&eval_path, &eval_row(done, &r))?;
            write_report(out, &r)?;
            progress(Progress::Eval { epoch: done, report: &r });
            report = Some(r);
        }
        Checkpoint {
            config: cfg.canonical(),
            epoch: done as u64,
            step,
            params: params.clone(),
            momentum: momentum.clone(),
        }
        .save(&out.join(CHECKPOINT_FILE))?;
    }

    let report = match report {
        Some(r) => r,
        None => evaluate_samples(&params, &model_cfg, val, &cfg.eval, false)?,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.canonical(),
            epoch: cfg.epochs as u64,
            step,
            params,
            momentum,
        },
        report,
        history,
    })
}

/// Evaluates a checkpoint on every sample of a dataset directory and writes
/// the CSV reports into `out`.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, eval: &EvalConfig, bypass: bool, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let model_cfg = checkpoint_model(&ck.params)?;
    let (manifest, samples) = dataset::load_dataset(dataset_dir)?;
    if manifest.classes != model_cfg.classes {
        return Err(Error::Dataset(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model_cfg.classes, manifest.classes
        )));
    }
    let report = evaluate_samples(&ck.params, &model_cfg, &samples, eval, bypass)?;
    write_report(out, &report)?;
    Ok(report)
}

pub struct InferOutput {
    pub labels: LabelMap,
    /// Boundary probabilities scaled to 0..=255; `None` for the baseline.
    pub boundary: Option<LabelMap>,
}

/// Predicts one PPM image.
pub fn infer(checkpoint: &Path, image: &Path) -> Result<InferOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let model_cfg = checkpoint_model(&ck.params)?;
    let rgb: RgbImage = pnm::read_ppm(image)?;
    if rgb.height % 8 != 0 || rgb.width % 8 != 0 {
        return Err(Error::shape(
            "infer",
            format!("{}×{} image is not divisible by 8", rgb.height, rgb.width),
        ));
    }
    let blank = Grid::filled(rgb.height, rgb.width, 0u8);
    let sample = SegSample::from_parts(&rgb, blank, 1)?;
    let (labels, boundary) = predict(&ck.params, &model_cfg, &sample)?;
    let boundary = boundary.map(|b| {
        Grid::new(
            rgb.height,
            rgb.width,
            b.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
        )
        .expect("sized from the image")
    });
    Ok(InferOutput { labels, boundary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
        let mid = poly_lr(1.0, 50, 100, 0.9);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn validation_is_the_tail() {
        let (t, v) = split(250);
        assert_eq!((t, v), (0..200, 200..250));
        let (t, v) = split(1);
        assert_eq!((t, v), (0..1, 1..1));
    }

    #[test]
    fn baseline_switches_everything_off() {
        let cfg = TrainConfig::from_text(
            "[ablation]\nshape_stream = false\ndual_task = true\n",
            &["train.epochs=3".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.ablation, Ablation::BASELINE);
        assert_eq!(cfg.epochs, 3);
        let m = cfg.model_config(5);
        assert!(!m.gradients_input);
    }

    #[test]
    fn canonical_text_parses_back() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 9;
        cfg.eval.tolerances = vec![1.0, 2.5];
        cfg.loss.positive_set = PositiveSet::Intersection;
        cfg.ablation = Ablation::GCL;
        let back = TrainConfig::from_text(&cfg.canonical(), &[]).unwrap();
        assert_eq!(back, cfg);
        let moved = TrainConfig {
            dataset_dir: "elsewhere".into(),
            output_dir: "other".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.canonical(), cfg.canonical());
    }

    #[test]
    fn config_errors() {
        assert!(TrainConfig::from_text("[train]\nepochs = 0\n", &[]).is_err());
        assert!(TrainConfig::from_text("[trian]\n", &[]).is_err());
        assert!(TrainConfig::from_text("[loss]\npositive_set = \"all\"\n", &[]).is_err());
        assert!(TrainConfig::from_text("[loss]\nthrs = 1.5\n", &[]).is_err());
    }

    #[test]
    fn checkpoint_model_is_recovered() {
        for m in [ModelConfig::full(4), ModelConfig::baseline(3), ModelConfig {
            classes: 5,
            shape_stream: true,
            gradients_input: false,
        }] {
            let p = model::init_params(&m, 0).unwrap();
            assert_eq!(checkpoint_model(&p).unwrap(), m);
        }
    }

    #[test]
    fn momentum_update() {
        let mut params = ParameterStore::new();
        params.insert("w", StreamTag::Regular, Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut mom = BTreeMap::new();
        let grads: BTreeMap<String, Vec<f32>> = [("w".to_string(), vec![0.5, 0.0])].into();
        sgd_step(&mut params, &mut mom, &grads, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(params.get("w").unwrap().tensor.data(), &[0.95, -1.0]);
        sgd_step(&mut params, &mut mom, &grads, 0.1, 0.9, 0.0).unwrap();
        // v = 0.9 · 0.5 + 0.5
        assert!((params.get("w").unwrap().tensor.data()[0] - (0.95 - 0.095)).abs() < 1e-7);
        let bad: BTreeMap<String, Vec<f32>> = [("w".to_string(), vec![f32::NAN, 0.0])].into();
        let err = sgd_step(&mut params, &mut mom, &bad, 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("parameter w"));
    }
}
