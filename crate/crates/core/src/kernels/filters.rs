//! Fixed (non-learned) image filters with reflect padding.
//!
//! Padding mirrors about the pixel edge (`d c b a | a b c d`), so each
//! separable pass is mass-preserving for a symmetric normalized kernel.

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Mirrors `i` into `[0, n)` with the edge pixel repeated.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized Gaussian taps over `[-r, r]` with `r = ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(
            "gaussian_blur",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// One 1-D correlation pass over every plane of a `planes×h×w` buffer.
/// `taps` is centered: `taps[t]` multiplies offset `t - taps.len()/2`.
pub fn pass<T: Element>(src: &[T], dst: &mut [T], h: usize, w: usize, taps: &[T], axis: Axis) {
    let r = (taps.len() / 2) as isize;
    let plane = h * w;
    for (sp, dp) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        match axis {
            Axis::Cols => {
                for y in 0..h {
                    let row = &sp[y * w..(y + 1) * w];
                    let out = &mut dp[y * w..(y + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for (t, &k) in taps.iter().enumerate() {
                            acc += k * row[reflect(x as isize + t as isize - r, w)];
                        }
                        *o = acc;
                    }
                }
            }
            Axis::Rows => {
                dp.fill(T::zero());
                for (t, &k) in taps.iter().enumerate() {
                    for y in 0..h {
                        let sy = reflect(y as isize + t as isize - r, h);
                        let srow = &sp[sy * w..(sy + 1) * w];
                        let out = &mut dp[y * w..(y + 1) * w];
                        for (o, &v) in out.iter_mut().zip(srow) {
                            *o += k * v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`pass`]: scatters `grad_out` back through the same taps and
/// padding, accumulating into `grad_in`.
pub fn pass_adjoint<T: Element>(
    grad_out: &[T],
    grad_in: &mut [T],
    h: usize,
    w: usize,
    taps: &[T],
    axis: Axis,
) {
    let r = (taps.len() / 2) as isize;
    let plane = h * w;
    for (gp, ip) in grad_out.chunks_exact(plane).zip(grad_in.chunks_exact_mut(plane)) {
        match axis {
            Axis::Cols => {
                for y in 0..h {
                    let g = &gp[y * w..(y + 1) * w];
                    let row = &mut ip[y * w..(y + 1) * w];
                    for (x, &gv) in g.iter().enumerate() {
                        for (t, &k) in taps.iter().enumerate() {
                            row[reflect(x as isize + t as isize - r, w)] += k * gv;
                        }
                    }
                }
            }
            Axis::Rows => {
                for (t, &k) in taps.iter().enumerate() {
                    for y in 0..h {
                        let sy = reflect(y as isize + t as isize - r, h);
                        let g = &gp[y * w..(y + 1) * w];
                        let row = &mut ip[sy * w..(sy + 1) * w];
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o += k * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Separable blur: columns then rows.
pub fn blur<T: Element>(src: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let mut tmp = vec![T::zero(); src.len()];
    let mut out = vec![T::zero(); src.len()];
    pass(src, &mut tmp, h, w, taps, Axis::Cols);
    pass(&tmp, &mut out, h, w, taps, Axis::Rows);
    out
}

pub fn blur_adjoint<T: Element>(grad_out: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let mut tmp = vec![T::zero(); grad_out.len()];
    let mut out = vec![T::zero(); grad_out.len()];
    pass_adjoint(grad_out, &mut tmp, h, w, taps, Axis::Rows);
    pass_adjoint(&tmp, &mut out, h, w, taps, Axis::Cols);
    out
}

/// Smoothing half of the Sobel pair, normalized to unit sum.
pub fn sobel_smooth<T: Element>() -> [T; 3] {
    [T::lit(0.25), T::lit(0.5), T::lit(0.25)]
}

/// Differencing half of the Sobel pair. Together with [`sobel_smooth`] a
/// unit step produces a response of 1 on both adjacent pixels.
pub fn sobel_diff<T: Element>() -> [T; 3] {
    [T::lit(-1.0), T::zero(), T::one()]
}

pub const SOBEL_EPS: f64 = 1e-12;

/// Horizontal and vertical Sobel responses of every plane.
pub fn sobel_xy<T: Element>(src: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let (sm, df) = (sobel_smooth::<T>(), sobel_diff::<T>());
    let mut tmp = vec![T::zero(); src.len()];
    let mut gx = vec![T::zero(); src.len()];
    let mut gy = vec![T::zero(); src.len()];
    pass(src, &mut tmp, h, w, &df, Axis::Cols);
    pass(&tmp, &mut gx, h, w, &sm, Axis::Rows);
    pass(src, &mut tmp, h, w, &sm, Axis::Cols);
    pass(&tmp, &mut gy, h, w, &df, Axis::Rows);
    (gx, gy)
}

/// `sqrt(gx² + gy² + eps)` per pixel.
pub fn sobel_magnitude<T: Element>(src: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (gx, gy) = sobel_xy(src, h, w);
    let eps = T::lit(SOBEL_EPS);
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b + eps).sqrt())
        .collect();
    (mag, gx, gy)
}

/// Backward of [`sobel_magnitude`] given the upstream gradient.
pub fn sobel_magnitude_adjoint<T: Element>(
    grad_out: &[T],
    mag: &[T],
    gx: &[T],
    gy: &[T],
    h: usize,
    w: usize,
) -> Vec<T> {
    let (sm, df) = (sobel_smooth::<T>(), sobel_diff::<T>());
    let n = grad_out.len();
    let dgx: Vec<T> = (0..n).map(|i| grad_out[i] * gx[i] / mag[i]).collect();
    let dgy: Vec<T> = (0..n).map(|i| grad_out[i] * gy[i] / mag[i]).collect();
    let mut tmp = vec![T::zero(); n];
    let mut out = vec![T::zero(); n];
    pass_adjoint(&dgx, &mut tmp, h, w, &sm, Axis::Rows);
    pass_adjoint(&tmp, &mut out, h, w, &df, Axis::Cols);
    tmp.fill(T::zero());
    pass_adjoint(&dgy, &mut tmp, h, w, &df, Axis::Rows);
    pass_adjoint(&tmp, &mut out, h, w, &sm, Axis::Cols);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_repeats_edge() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn gaussian_taps_normalized() {
        let taps = gaussian_taps(1.0).unwrap();
        assert_eq!(taps.len(), 7);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(gaussian_taps(0.0).is_err());
        assert!(gaussian_taps(-1.0).is_err());
    }

    #[test]
    fn pass_adjoint_matches_dense_transpose() {
        let (h, w) = (4, 5);
        let taps = [0.2f64, -0.7, 0.4, 0.1, 0.9];
        for axis in [Axis::Rows, Axis::Cols] {
            let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 1.3).sin()).collect();
            let y: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).cos()).collect();
            let mut ax = vec![0.0; h * w];
            pass(&x, &mut ax, h, w, &taps, axis);
            let mut aty = vec![0.0; h * w];
            pass_adjoint(&y, &mut aty, h, w, &taps, axis);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{axis:?}");
        }
    }
}
