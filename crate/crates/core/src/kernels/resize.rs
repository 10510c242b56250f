//! Bilinear resampling, half-pixel (align-corners = false) convention.

use crate::tensor::Element;

/// Sampling taps along one axis: `(lo, hi, weight_of_hi)` per output index.
pub fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub struct Resampler<T> {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    rows: Vec<(usize, usize, T)>,
    cols: Vec<(usize, usize, T)>,
}

impl<T: Element> Resampler<T> {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let conv = |v: Vec<(usize, usize, f64)>| {
            v.into_iter()
                .map(|(a, b, f)| (a, b, T::lit(f)))
                .collect::<Vec<_>>()
        };
        Resampler {
            src_h,
            src_w,
            dst_h,
            dst_w,
            rows: conv(axis_taps(src_h, dst_h)),
            cols: conv(axis_taps(src_w, dst_w)),
        }
    }

    pub fn forward(&self, src: &[T], channels: usize) -> Vec<T> {
        let (sp, dp) = (self.src_h * self.src_w, self.dst_h * self.dst_w);
        let mut out = vec![T::zero(); channels * dp];
        for c in 0..channels {
            let s = &src[c * sp..(c + 1) * sp];
            let o = &mut out[c * dp..(c + 1) * dp];
            for (y, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                let r0 = &s[y0 * self.src_w..(y0 + 1) * self.src_w];
                let r1 = &s[y1 * self.src_w..(y1 + 1) * self.src_w];
                for (x, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    o[y * self.dst_w + x] = top + (bot - top) * fy;
                }
            }
        }
        out
    }

    pub fn adjoint(&self, grad_out: &[T], grad_in: &mut [T], channels: usize) {
        let (sp, dp) = (self.src_h * self.src_w, self.dst_h * self.dst_w);
        let one = T::one();
        for c in 0..channels {
            let g = &grad_out[c * dp..(c + 1) * dp];
            let gi = &mut grad_in[c * sp..(c + 1) * sp];
            for (y, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (x, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let v = g[y * self.dst_w + x];
                    let top = v * (one - fy);
                    let bot = v * fy;
                    gi[y0 * self.src_w + x0] += top * (one - fx);
                    gi[y0 * self.src_w + x1] += top * fx;
                    gi[y1 * self.src_w + x0] += bot * (one - fx);
                    gi[y1 * self.src_w + x1] += bot * fx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_taps() {
        for (i, &(lo, hi, f)) in axis_taps(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert_eq!(f, 0.0);
            assert!(hi == lo + 1 || hi == 4);
        }
    }

    #[test]
    fn downsample_by_eight_averages_center_pair() {
        let taps = axis_taps(64, 8);
        assert_eq!(taps[0], (3, 4, 0.5));
        assert_eq!(taps[7], (59, 60, 0.5));
    }
}
