//! Region and boundary quality: per-class IoU, boundary F-score under a
//! pixel tolerance, and mIoU over progressively tighter crops.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, Grid, LabelMap};

/// Tolerances (px) reported by default.
pub const DEFAULT_TOLERANCES: [f64; 4] = [3.0, 5.0, 9.0, 12.0];

/// Boundary extraction radius for metrics.
pub const METRIC_BOUNDARY_RADIUS: usize = 1;

/// Pixel is boundary iff some non-ignored pixel within Chebyshev distance
/// `radius` carries a different label. Ignored pixels are never boundary.
pub fn gt_boundary_from_mask(labels: &LabelMap, radius: usize, ignore: u8) -> BinaryMap {
    let (h, w) = labels.dims();
    let r = radius as isize;
    Grid::from_fn(h, w, |y, x| {
        let l = labels.get(y, x);
        if l == ignore {
            return false;
        }
        let (y, x) = (y as isize, x as isize);
        for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
            for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                let o = labels.get(yy as usize, xx as usize);
                if o != ignore && o != l {
                    return true;
                }
            }
        }
        false
    })
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `mask`; `None` everywhere when the mask is empty.
pub fn squared_distance_transform(mask: &BinaryMap) -> Option<Grid<u64>> {
    if mask.count() == 0 {
        return None;
    }
    let (h, w) = mask.dims();
    const INF: u64 = u64::MAX;
    // column pass: distance along y to the nearest set pixel
    let mut col = vec![INF; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask.get(y, x) {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = (y - l) as u64;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if mask.get(y, x) {
                last = Some(y);
            }
            if let Some(l) = last {
                let d = (l - y) as u64;
                if d < col[y * w + x] {
                    col[y * w + x] = d;
                }
            }
        }
    }
    // row pass: lower envelope of parabolas (q - v)² + f(v)
    let mut out = vec![INF; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let f = |q: usize| col[y * w + q].saturating_mul(col[y * w + q]);
        sites.clear();
        bounds.clear();
        for q in 0..w {
            if col[y * w + q] == INF {
                continue;
            }
            let fq = f(q) as f64 + (q * q) as f64;
            loop {
                match sites.last() {
                    None => {
                        sites.push(q);
                        bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&v) => {
                        let fv = f(v) as f64 + (v * v) as f64;
                        let s = (fq - fv) / (2.0 * (q as f64 - v as f64));
                        if s <= *bounds.last().unwrap() {
                            sites.pop();
                            bounds.pop();
                        } else {
                            sites.push(q);
                            bounds.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if sites.is_empty() {
            continue;
        }
        let mut k = 0;
        for q in 0..w {
            while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
                k += 1;
            }
            let v = sites[k];
            let dq = q.abs_diff(v) as u64;
            out[y * w + q] = dq * dq + f(v);
        }
    }
    Some(Grid::new(h, w, out).expect("sized above"))
}

/// Dataset-accumulable confusion matrix; rows are ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<u64> {
        if !pred.same_dims(gt) {
            return Err(Error::shape(
                "iou",
                format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()),
            ));
        }
        let k = self.classes;
        let mut used = 0;
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            if t == ignore {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::invalid("iou", format!("label pair ({p}, {t}) outside 0..{k}")));
            }
            self.counts[t as usize * k + p as usize] += 1;
            used += 1;
        }
        Ok(used)
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// IoU per class, `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU and their mean over classes present in either map.
pub fn iou_report(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore: u8) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    if cm.add(pred, gt, ignore)? == 0 {
        return Err(Error::invalid("iou", "every pixel is ignored"));
    }
    let per_class = cm.iou();
    Ok(IouReport {
        miou: mean_present(&per_class),
        per_class,
    })
}

/// Boundary pixel counts for one class, summable over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_total: u64,
    pub pred_matched: u64,
    pub gt_total: u64,
    pub gt_matched: u64,
    /// The class occurs (outside void) in the prediction or ground truth.
    pub present: bool,
}

impl BoundaryCounts {
    pub fn merge(&mut self, o: &BoundaryCounts) {
        self.pred_total += o.pred_total;
        self.pred_matched += o.pred_matched;
        self.gt_total += o.gt_total;
        self.gt_matched += o.gt_matched;
        self.present |= o.present;
    }

    pub fn precision(&self) -> Option<f64> {
        (self.pred_total > 0).then(|| self.pred_matched as f64 / self.pred_total as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.gt_total > 0).then(|| self.gt_matched as f64 / self.gt_total as f64)
    }

    /// F-score, `None` for absent classes. Two empty boundary sets agree
    /// perfectly; one empty set scores 0.
    pub fn f_score(&self) -> Option<f64> {
        if !self.present {
            return None;
        }
        Some(match (self.precision(), self.recall()) {
            (None, None) => 1.0,
            (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
            _ => 0.0,
        })
    }
}

fn class_mask(labels: &LabelMap, class: u8, void: Option<&BinaryMap>, ignore: u8) -> LabelMap {
    Grid::from_fn(labels.height(), labels.width(), |y, x| {
        let l = labels.get(y, x);
        if l == ignore || void.is_some_and(|m| m.get(y, x)) {
            ignore
        } else {
            (l == class) as u8
        }
    })
}

fn count_within(from: &BinaryMap, dist_to_other: Option<&Grid<u64>>, tol_sq: f64) -> (u64, u64) {
    let total = from.count() as u64;
    let matched = match dist_to_other {
        None => 0,
        Some(d) => from
            .data()
            .iter()
            .zip(d.data())
            .filter(|(&b, &dsq)| b && (dsq as f64) <= tol_sq)
            .count() as u64,
    };
    (total, matched)
}

/// Boundary match counts per tolerance (outer) and class (inner).
pub fn boundary_counts(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: usize,
    tolerances: &[f64],
    void: Option<&BinaryMap>,
    ignore: u8,
) -> Result<Vec<Vec<BoundaryCounts>>> {
    if !pred.same_dims(gt) || void.is_some_and(|v| !v.same_dims(gt)) {
        return Err(Error::shape("boundary_fscore", "prediction, ground truth and void mask differ in size"));
    }
    if let Some(t) = tolerances.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::invalid("boundary_fscore", format!("tolerance {t} px must be non-negative")));
    }
    let mut out = vec![vec![BoundaryCounts::default(); classes]; tolerances.len()];
    for c in 0..classes {
        let pm = class_mask(pred, c as u8, void, ignore);
        let gm = class_mask(gt, c as u8, void, ignore);
        let present = pm.data().contains(&1) || gm.data().contains(&1);
        let pb = gt_boundary_from_mask(&pm, METRIC_BOUNDARY_RADIUS, ignore);
        let gb = gt_boundary_from_mask(&gm, METRIC_BOUNDARY_RADIUS, ignore);
        let dist_to_gt = squared_distance_transform(&gb);
        let dist_to_pred = squared_distance_transform(&pb);
        for (ti, &tol) in tolerances.iter().enumerate() {
            let tol_sq = tol * tol;
            let (pred_total, pred_matched) = count_within(&pb, dist_to_gt.as_ref(), tol_sq);
            let (gt_total, gt_matched) = count_within(&gb, dist_to_pred.as_ref(), tol_sq);
            out[ti][c] = BoundaryCounts {
                pred_total,
                pred_matched,
                gt_total,
                gt_matched,
                present,
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FScoreReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub counts: Vec<BoundaryCounts>,
}

/// Boundary F-score of one prediction at one tolerance.
pub fn boundary_fscore(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: usize,
    tolerance_px: f64,
    void: Option<&BinaryMap>,
    ignore: u8,
) -> Result<FScoreReport> {
    let counts = boundary_counts(pred, gt, classes, &[tolerance_px], void, ignore)?.remove(0);
    let per_class: Vec<Option<f64>> = counts.iter().map(BoundaryCounts::f_score).collect();
    Ok(FScoreReport {
        mean: mean_present(&per_class),
        per_class,
        counts,
    })
}

/// What a fractional boundary tolerance is relative to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ToleranceBasis {
    #[default]
    Diagonal,
    Width,
    Height,
}

/// Converts a fractional tolerance into pixels for an `h×w` image.
pub fn tolerance_from_fraction(fraction: f64, h: usize, w: usize, basis: ToleranceBasis) -> f64 {
    let len = match basis {
        ToleranceBasis::Diagonal => ((h * h + w * w) as f64).sqrt(),
        ToleranceBasis::Width => w as f64,
        ToleranceBasis::Height => h as f64,
    };
    fraction * len
}

/// Crops for the distance-based evaluation: `base_margin` comes off the
/// left, right and bottom; factor `c` then removes `c` from top and bottom
/// and `2c` from left and right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub base_margin: usize,
}

impl CropSpec {
    /// `(top, bottom, left, right)` margins for factor `c`.
    pub fn margins(&self, c: usize) -> (usize, usize, usize, usize) {
        let b = self.base_margin;
        (c, b + c, b + 2 * c, b + 2 * c)
    }

    pub fn apply<T: Copy>(&self, grid: &Grid<T>, c: usize) -> Result<Grid<T>> {
        let (t, b, l, r) = self.margins(c);
        grid.crop(t, b, l, r).ok_or_else(|| {
            Error::invalid(
                "distance_based_eval",
                format!("crop factor {c} leaves nothing of a {:?} image", grid.dims()),
            )
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPoint {
    pub factor: usize,
    pub miou: f64,
}

/// mIoU on each crop of one prediction.
pub fn distance_based_eval(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: usize,
    ignore: u8,
    crop: CropSpec,
    factors: &[usize],
) -> Result<Vec<CropPoint>> {
    factors
        .iter()
        .map(|&c| {
            let p = crop.apply(pred, c)?;
            let g = crop.apply(gt, c)?;
            Ok(CropPoint {
                factor: c,
                miou: iou_report(&p, &g, classes, ignore)?.miou,
            })
        })
        .collect()
}

/// Full evaluation result over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub tolerances: Vec<f64>,
    /// Indexed `[tolerance][class]`.
    pub per_class_f: Vec<Vec<Option<f64>>>,
    pub mean_f: Vec<f64>,
    pub crop_curve: Vec<CropPoint>,
    pub pixel_accuracy: f64,
}

fn tol_label(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("f_{}px", t as u64)
    } else {
        format!("f_{t}px")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn mean_f_at(&self, tolerance: f64) -> Option<f64> {
        self.tolerances
            .iter()
            .position(|&t| t == tolerance)
            .map(|i| self.mean_f[i])
    }

    /// `class,iou,f_<t>px...` with one row per class and a `mean` row.
    pub fn classes_csv(&self) -> String {
        let mut s = String::from("class,iou");
        for &t in &self.tolerances {
            write!(s, ",{}", tol_label(t)).unwrap();
        }
        s.push('\n');
        for c in 0..self.classes {
            write!(s, "{c},{}", fmt_opt(self.per_class_iou[c])).unwrap();
            for f in &self.per_class_f {
                write!(s, ",{}", fmt_opt(f[c])).unwrap();
            }
            s.push('\n');
        }
        write!(s, "mean,{:.6}", self.miou).unwrap();
        for f in &self.mean_f {
            write!(s, ",{f:.6}").unwrap();
        }
        s.push('\n');
        writeln!(s, "pixel_accuracy,{:.6}", self.pixel_accuracy).unwrap();
        s
    }

    /// `factor,miou`
    pub fn crop_csv(&self) -> String {
        let mut s = String::from("factor,miou\n");
        for p in &self.crop_curve {
            writeln!(s, "{},{:.6}", p.factor, p.miou).unwrap();
        }
        s
    }
}

/// Accumulates predictions into an [`EvalReport`].
pub struct Evaluator {
    classes: usize,
    ignore: u8,
    tolerances: Vec<f64>,
    crop: CropSpec,
    factors: Vec<usize>,
    confusion: ConfusionMatrix,
    crop_confusion: Vec<ConfusionMatrix>,
    boundary: Vec<Vec<BoundaryCounts>>,
}

impl Evaluator {
    pub fn new(classes: usize, ignore: u8, tolerances: &[f64], crop: CropSpec, factors: &[usize]) -> Self {
        Evaluator {
            classes,
            ignore,
            tolerances: tolerances.to_vec(),
            crop,
            factors: factors.to_vec(),
            confusion: ConfusionMatrix::new(classes),
            crop_confusion: factors.iter().map(|_| ConfusionMatrix::new(classes)).collect(),
            boundary: vec![vec![BoundaryCounts::default(); classes]; tolerances.len()],
        }
    }

    /// Void areas come from the ignore label of `gt`.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.confusion.add(pred, gt, self.ignore)?;
        for (cm, &c) in self.crop_confusion.iter_mut().zip(&self.factors) {
            cm.add(&self.crop.apply(pred, c)?, &self.crop.apply(gt, c)?, self.ignore)?;
        }
        let void = gt.map(|l| l == self.ignore);
        let counts = boundary_counts(pred, gt, self.classes, &self.tolerances, Some(&void), self.ignore)?;
        for (acc, new) in self.boundary.iter_mut().zip(&counts) {
            for (a, n) in acc.iter_mut().zip(new) {
                a.merge(n);
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> EvalReport {
        let per_class_iou = self.confusion.iou();
        let per_class_f: Vec<Vec<Option<f64>>> = self
            .boundary
            .iter()
            .map(|row| row.iter().map(BoundaryCounts::f_score).collect())
            .collect();
        let total: u64 = self.confusion.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.confusion.get(c, c)).sum();
        EvalReport {
            classes: self.classes,
            miou: mean_present(&per_class_iou),
            per_class_iou,
            tolerances: self.tolerances.clone(),
            mean_f: per_class_f.iter().map(|f| mean_present(f)).collect(),
            per_class_f,
            crop_curve: self
                .factors
                .iter()
                .zip(&self.crop_confusion)
                .map(|(&factor, cm)| CropPoint {
                    factor,
                    miou: mean_present(&cm.iou()),
                })
                .collect(),
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}
