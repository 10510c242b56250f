//! Canny-style binary edge map used as the image-gradient input.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kernels::filters::{self, gaussian_taps};
use crate::tensor::Tensor;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SMOOTHING_SIGMA: f64 = 1.0;
pub const HIGH_THRESHOLD: f64 = 0.2;
pub const LOW_THRESHOLD: f64 = 0.1;

/// Below this peak magnitude the image counts as flat.
const FLAT: f64 = 1e-9;

/// Luma → Gaussian(σ=1) → Sobel → non-maximum suppression → hysteresis.
/// Returns a `1×H×W` map with values in {0, 1}.
pub fn image_gradient(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("image_gradient", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0..3).map(|k| LUMA[k] * d[k * plane + i] as f64).sum())
        .collect();
    let smooth = filters::blur(&gray, h, w, &gaussian_taps(SMOOTHING_SIGMA)?);
    let (gx, gy) = filters::sobel_xy(&smooth, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let mut out = vec![0.0f32; plane];
    if peak < FLAT {
        return Tensor::new(&[1, h, w], out);
    }

    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    // Strict on the "before" side, non-strict on the "after" side, so a
    // plateau two pixels wide keeps exactly one of them.
    let mut thin = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m < FLAT {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as isize, x as isize);
            if m > at(yi - dy, xi - dx) && m >= at(yi + dy, xi + dx) {
                thin[i] = m;
            }
        }
    }

    let (high, low) = (HIGH_THRESHOLD * peak, LOW_THRESHOLD * peak);
    let mut queue: VecDeque<usize> = (0..plane).filter(|&i| thin[i] >= high).collect();
    for &i in &queue {
        out[i] = 1.0;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Tensor::new(&[1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Tensor<f32> {
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x);
                for k in 0..3 {
                    data[k * h * w + y * w + x] = v[k];
                }
            }
        }
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = image_gradient(&rgb(16, 16, |_, _| [0.4, 0.2, 0.9])).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_gives_one_column() {
        for dark_left in [true, false] {
            let img = rgb(16, 16, |_, x| {
                let v = ((x >= 8) == dark_left) as u8 as f32;
                [v, 0.5 * v, 0.2]
            });
            let e = image_gradient(&img).unwrap();
            let cols: Vec<Vec<usize>> = (0..16)
                .map(|y| (0..16).filter(|&x| e.data()[y * 16 + x] == 1.0).collect())
                .collect();
            // either pixel next to the step, the same one on every row
            assert!(cols[0] == [7] || cols[0] == [8], "{:?}", cols[0]);
            assert!(cols.iter().all(|c| *c == cols[0]));
            assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
