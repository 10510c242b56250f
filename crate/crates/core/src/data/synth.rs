//! Deterministic layered-shape scenes with thin structures.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Section;
use crate::data::canny::image_gradient;
use crate::data::pnm::RgbImage;
use crate::error::{Error, Result};
use crate::grid::{BinaryMap, Grid, LabelMap, IGNORE_LABEL};
use crate::metrics::gt_boundary_from_mask;
use crate::tensor::Tensor;

/// Radius of the boundary maps used as training targets.
pub const SUPERVISION_RADIUS: usize = 2;
pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    ThinBar,
    Blob,
}

impl ShapeKind {
    /// Class `k ≥ 1` always draws the same kind of shape.
    pub fn of_class(k: usize) -> Self {
        [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::ThinBar, ShapeKind::Blob][(k - 1) % 4]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Standard deviation of per-pixel color noise.
    pub noise: f64,
    pub ignore_border: usize,
    pub boundary_radius: usize,
    /// Probability that a non-bar class appears in a sample.
    pub class_presence: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count: 250,
            height: 64,
            width: 64,
            classes: 5,
            noise: 0.15,
            ignore_border: 2,
            boundary_radius: SUPERVISION_RADIUS,
            class_presence: 0.9,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("generate_dataset", m));
        if self.classes < 4 || self.classes > IGNORE_LABEL as usize {
            return bad(format!(
                "classes must be in 4..=255 (class 3 is the thin-bar class), got {}",
                self.classes
            ));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("{}×{} is not divisible by 8", self.height, self.width));
        }
        if self.height.min(self.width) < MIN_EXTENT {
            return bad(format!(
                "{}×{} canvas is smaller than the {MIN_EXTENT} px the shapes need",
                self.height, self.width
            ));
        }
        if 4 * self.ignore_border >= self.height.min(self.width) {
            return bad(format!("ignore border {} swallows the canvas", self.ignore_border));
        }
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a non-negative number, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.class_presence) {
            return bad(format!("class_presence must lie in [0, 1], got {}", self.class_presence));
        }
        if self.boundary_radius == 0 {
            return bad("boundary_radius must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_section(s: &Section<'_>) -> Result<Self> {
        let d = DatasetSpec::default();
        let spec = DatasetSpec {
            seed: s.u64("seed", d.seed)?,
            count: s.usize("count", d.count)?,
            height: s.usize("height", d.height)?,
            width: s.usize("width", d.width)?,
            classes: s.usize("classes", d.classes)?,
            noise: s.f64("noise", d.noise)?,
            ignore_border: s.usize("ignore_border", d.ignore_border)?,
            boundary_radius: s.usize("boundary_radius", d.boundary_radius)?,
            class_presence: s.f64("class_presence", d.class_presence)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical text form; hashed into the dataset manifest.
    pub fn canonical(&self) -> String {
        format!(
            "seed = {}\ncount = {}\nheight = {}\nwidth = {}\nclasses = {}\nnoise = {:?}\nignore_border = {}\nboundary_radius = {}\nclass_presence = {:?}\n",
            self.seed,
            self.count,
            self.height,
            self.width,
            self.classes,
            self.noise,
            self.ignore_border,
            self.boundary_radius,
            self.class_presence
        )
    }
}

/// Splitmix64 finalizer over a pair; used for all derived seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `3×H×W` in [0, 1], exactly representable in 8 bits.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub gt_boundary: BinaryMap,
    /// `1×H×W` binary edge map.
    pub image_grad: Tensor<f32>,
}

impl SegSample {
    pub fn from_parts(rgb: &RgbImage, labels: LabelMap, boundary_radius: usize) -> Result<Self> {
        if (rgb.height, rgb.width) != labels.dims() {
            return Err(Error::Dataset(format!(
                "image {}×{} vs labels {:?}",
                rgb.height,
                rgb.width,
                labels.dims()
            )));
        }
        let plane = rgb.height * rgb.width;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                data[k * plane + i] = px[k] as f32 / 255.0;
            }
        }
        let image = Tensor::new(&[3, rgb.height, rgb.width], data)?;
        let image_grad = image_gradient(&image)?;
        Ok(SegSample {
            gt_boundary: gt_boundary_from_mask(&labels, boundary_radius, IGNORE_LABEL),
            image,
            labels,
            image_grad,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = self.dims();
        let plane = h * w;
        let d = self.image.data();
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for k in 0..3 {
                data.push((d[k * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage {
            height: h,
            width: w,
            data,
        }
    }

    /// Mirror image; the edge map is recomputed from the flipped image.
    pub fn flipped(&self, boundary_radius: usize) -> Result<Self> {
        let mut rgb = self.to_rgb();
        let w = rgb.width;
        for row in rgb.data.chunks_exact_mut(3 * w) {
            let px: Vec<[u8; 3]> = row.chunks_exact(3).rev().map(|c| [c[0], c[1], c[2]]).collect();
            for (dst, src) in row.chunks_exact_mut(3).zip(px) {
                dst.copy_from_slice(&src);
            }
        }
        SegSample::from_parts(&rgb, self.labels.flip_horizontal(), boundary_radius)
    }
}

struct Shape {
    class: u8,
    kind: ShapeKind,
    color: [f64; 3],
    geom: Geom,
}

enum Geom {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Bar { cy: f64, cx: f64, half_len: f64, half_width: f64, angle: f64 },
    Discs(Vec<(f64, f64, f64)>),
}

impl Geom {
    /// Pixel centers are at half-integer coordinates.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Geom::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Geom::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (py - cy, px - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Geom::Bar { cy, cx, half_len, half_width, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (py - cy, px - cx);
                let along = c * dx + s * dy;
                let across = -s * dx + c * dy;
                along.abs() <= half_len && across.abs() < half_width
            }
            Geom::Discs(ref d) => d.iter().any(|&(cy, cx, r)| (py - cy).powi(2) + (px - cx).powi(2) <= r * r),
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Class base colors: spread around the hue circle, background gray.
fn palette(classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|k| {
            if k == 0 {
                return [0.45, 0.45, 0.45];
            }
            let hue = (k - 1) as f64 / (classes - 1) as f64;
            let value = if k % 2 == 0 { 0.85 } else { 0.65 };
            hsv(hue, 0.7, value)
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn make_shape<R: Rng>(rng: &mut R, class: usize, h: f64, w: f64, base: [f64; 3]) -> Shape {
    let kind = ShapeKind::of_class(class);
    let m = h.min(w);
    let geom = match kind {
        ShapeKind::Rect => {
            let (sh, sw) = (uniform(rng, h / 6.0, h / 2.0), uniform(rng, w / 6.0, w / 2.0));
            let (y0, x0) = (uniform(rng, 0.0, h - sh), uniform(rng, 0.0, w - sw));
            Geom::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        }
        ShapeKind::Ellipse => {
            let (ry, rx) = (uniform(rng, h / 10.0, h / 4.0), uniform(rng, w / 10.0, w / 4.0));
            Geom::Ellipse {
                cy: uniform(rng, ry, h - ry),
                cx: uniform(rng, rx, w - rx),
                ry,
                rx,
                angle: uniform(rng, 0.0, PI),
            }
        }
        ShapeKind::ThinBar => {
            let width = rng.random_range(1..=3) as f64;
            // mostly axis-aligned like poles and wires, sometimes slanted
            let angle = match rng.random_range(0..4) {
                0 | 1 => PI / 2.0,
                2 => 0.0,
                _ => uniform(rng, 0.0, PI),
            };
            Geom::Bar {
                cy: uniform(rng, 0.25 * h, 0.75 * h),
                cx: uniform(rng, 0.25 * w, 0.75 * w),
                half_len: uniform(rng, 0.25 * m, 0.45 * m),
                half_width: width / 2.0,
                angle,
            }
        }
        ShapeKind::Blob => {
            let r_max = (m / 12.0).max(3.0);
            let (cy, cx) = (uniform(rng, 0.15 * h, 0.85 * h), uniform(rng, 0.15 * w, 0.85 * w));
            let discs = (0..3)
                .map(|_| {
                    let r = uniform(rng, 2.0, r_max);
                    (cy + uniform(rng, -r, r), cx + uniform(rng, -r, r), r)
                })
                .collect();
            Geom::Discs(discs)
        }
    };
    let mut color = base;
    for c in &mut color {
        *c = (*c + uniform(rng, -0.06, 0.06)).clamp(0.0, 1.0);
    }
    Shape {
        class: class as u8,
        kind,
        color,
        geom,
    }
}

/// One sample; a function of the dataset settings and the index only.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<SegSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let (h, w) = (spec.height, spec.width);
    let colors = palette(spec.classes);

    let mut shapes = Vec::new();
    let mut bars = Vec::new();
    for k in 1..spec.classes {
        let is_bar = ShapeKind::of_class(k) == ShapeKind::ThinBar;
        if !is_bar && rng.random::<f64>() >= spec.class_presence {
            continue;
        }
        let n = 1 + (rng.random::<f64>() < 0.4) as usize;
        for _ in 0..n {
            let s = make_shape(&mut rng, k, h as f64, w as f64, colors[k]);
            if is_bar { bars.push(s) } else { shapes.push(s) }
        }
    }
    shapes.shuffle(&mut rng);
    // bars paint last so every sample keeps its thin structures
    shapes.extend(bars);

    let mut background = colors[0];
    for c in &mut background {
        *c += uniform(&mut rng, -0.06, 0.06);
    }
    let mut labels = Grid::filled(h, w, 0u8);
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let top = shapes.iter().rev().find(|s| s.geom.contains(y, x));
            let (class, color) = top.map_or((0, background), |s| (s.class, s.color));
            labels.set(y, x, class);
            for k in 0..3 {
                let n: f64 = rng.sample(StandardNormal);
                let v = (color[k] + spec.noise * n).clamp(0.0, 1.0);
                rgb[3 * (y * w + x) + k] = (v * 255.0).round() as u8;
            }
        }
    }
    debug_assert!(shapes.iter().any(|s| s.kind == ShapeKind::ThinBar));
    let b = spec.ignore_border;
    for y in 0..h {
        for x in 0..w {
            if y < b || x < b || y >= h - b || x >= w - b {
                labels.set(y, x, IGNORE_LABEL);
            }
        }
    }
    let img = RgbImage {
        height: h,
        width: w,
        data: rgb,
    };
    SegSample::from_parts(&img, labels, spec.boundary_radius)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_sample(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> DatasetSpec {
        DatasetSpec {
            count,
            seed: 11,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetSpec { seed: 12, ..small(3) }).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn every_class_appears_and_bars_always() {
        let data = generate_dataset(&small(50)).unwrap();
        let k = 5;
        let mut samples_with = vec![0; k];
        for s in &data {
            for c in 0..k {
                if s.labels.data().contains(&(c as u8)) {
                    samples_with[c] += 1;
                }
            }
            assert!(s.labels.data().contains(&3), "thin bar class missing");
            assert!(s.labels.data().iter().any(|&l| l != IGNORE_LABEL));
        }
        for (c, n) in samples_with.iter().enumerate() {
            assert!(*n >= 40, "class {c} in only {n}/50 samples");
        }
    }

    #[test]
    fn border_is_ignored() {
        let s = generate_sample(&small(1), 0).unwrap();
        for x in 0..64 {
            assert_eq!(s.labels.get(0, x), IGNORE_LABEL);
            assert_eq!(s.labels.get(63, x), IGNORE_LABEL);
            if (2..62).contains(&x) {
                assert_ne!(s.labels.get(32, x), IGNORE_LABEL, "{x}");
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        for spec in [
            DatasetSpec { classes: 2, ..small(1) },
            DatasetSpec { height: 60, ..small(1) },
            DatasetSpec { height: 8, width: 8, ..small(1) },
            DatasetSpec { ignore_border: 4, height: 16, width: 16, ..small(1) },
        ] {
            assert!(generate_dataset(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn rgb_round_trip_is_exact() {
        let s = generate_sample(&small(1), 0).unwrap();
        let back = SegSample::from_parts(&s.to_rgb(), s.labels.clone(), SUPERVISION_RADIUS).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = generate_sample(&small(1), 2).unwrap();
        let f = s.flipped(SUPERVISION_RADIUS).unwrap();
        assert_eq!(f.labels, s.labels.flip_horizontal());
        assert_eq!(f.flipped(SUPERVISION_RADIUS).unwrap(), s);
    }
}
