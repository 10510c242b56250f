//! Reference implementations shared by the integration tests. Each one is a
//! direct nested-loop transcription, written without the library kernels.

#![allow(dead_code)]

use gscnn::grid::{BinaryMap, Grid};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Cross-correlation of a `C×H×W` input with a `O×C×k×k` kernel, zero padded.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    o: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let span = dilation * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (w + 2 * pad - span) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ic * h + iy as usize) * w + ix as usize]
                                * wt[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Mirror index with the edge pixel repeated, by walking back and forth.
fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Full 2-D Gaussian blur with a `(2r+1)²` kernel, `r = ceil(3σ)`, applied per
/// channel with mirrored borders.
pub fn gaussian_blur(x: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            total += v;
        }
    }
    let side = (2 * r + 1) as usize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = mirror(y as isize + dy, h);
                        let sx = mirror(xx as isize + dx, w);
                        let kv = kernel[(dy + r) as usize * side + (dx + r) as usize] / total;
                        acc += kv * x[(ch * h + sy) * w + sx];
                    }
                }
                out[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Bilinear resize with pixel centers at `i + 0.5`, source coordinates
/// clamped to the image.
pub fn bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        let p = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        p.clamp(0.0, (src - 1) as f64)
    };
    for ch in 0..c {
        for oy in 0..oh {
            let sy = coord(oy, h, oh);
            let (y0, y1) = (sy.floor() as usize, sy.ceil() as usize);
            let fy = sy - y0 as f64;
            for ox in 0..ow {
                let sx = coord(ox, w, ow);
                let (x0, x1) = (sx.floor() as usize, sx.ceil() as usize);
                let fx = sx - x0 as f64;
                let at = |yy: usize, xx: usize| x[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Squared distance to the nearest set pixel by exhaustive search.
pub fn brute_distance(mask: &BinaryMap) -> Option<Grid<u64>> {
    let (h, w) = mask.dims();
    let set: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .map(|(y, x)| (y as i64, x as i64))
        .collect();
    if set.is_empty() {
        return None;
    }
    Some(Grid::from_fn(h, w, |y, x| {
        set.iter()
            .map(|&(sy, sx)| ((sy - y as i64).pow(2) + (sx - x as i64).pow(2)) as u64)
            .min()
            .unwrap()
    }))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
