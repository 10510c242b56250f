use crate::error::{Error, Result};
use crate::tensor::Element;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride-1 geometry that keeps the spatial extent for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
        }
        let padded = input + 2 * self.padding;
        let span = self.dilation * (kernel - 1) + 1;
        if kernel == 0 || span > padded {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kernel} with dilation {} spans {span} px, padded input is {padded} px",
                    self.dilation
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Geometry of one conv call, resolved.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output indices whose tap `offset` lands inside `[0, len)`.
    fn valid(&self, out_len: usize, len: usize, offset: isize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        // smallest o with o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        // largest o with o*s + offset <= len - 1
        let hi_num = len as isize - 1 - offset;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.min(out_len as isize) as usize;
        let hi = ((hi + 1).max(0) as usize).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Unfolds `input` (`c_in×h×w`) into `cols` (`c_in·k·k × out_h·out_w`).
pub fn im2col<T: Element>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let (k, s, d, p) = (g.k, g.spec.stride, g.spec.dilation, g.spec.padding as isize);
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let off_y = (ki * d) as isize - p;
            let (y_lo, y_hi) = g.valid(g.out_h, g.h, off_y);
            for kj in 0..k {
                let off_x = (kj * d) as isize - p;
                let (x_lo, x_hi) = g.valid(g.out_w, g.w, off_x);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                if x_lo >= x_hi || y_lo >= y_hi {
                    dst.fill(T::zero());
                    continue;
                }
                dst[..y_lo * g.out_w].fill(T::zero());
                dst[y_hi * g.out_w..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = (oy * s) as isize + off_y;
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    drow[..x_lo].fill(T::zero());
                    drow[x_hi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = (x_lo as isize + off_x) as usize;
                        drow[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            drow[ox] = src[((ox * s) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `grad_input`.
pub fn col2im<T: Element>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let (k, s, d, p) = (g.k, g.spec.stride, g.spec.dilation, g.spec.padding as isize);
    let n_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let off_y = (ki * d) as isize - p;
            let (y_lo, y_hi) = g.valid(g.out_h, g.h, off_y);
            for kj in 0..k {
                let off_x = (kj * d) as isize - p;
                let (x_lo, x_hi) = g.valid(g.out_w, g.w, off_x);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in y_lo..y_hi {
                    let iy = ((oy * s) as isize + off_y) as usize;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in x_lo..x_hi {
                        dst[((ox * s) as isize + off_x) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        let spec = ConvSpec::new(2, 1, 1);
        assert_eq!(spec.out_extent(64, 3).unwrap(), 32);
        assert_eq!(ConvSpec::same(3, 8).out_extent(8, 3).unwrap(), 8);
        assert_eq!(ConvSpec::new(1, 2, 0).out_extent(5, 3).unwrap(), 1);
        assert!(ConvSpec::new(1, 3, 0).out_extent(5, 3).is_err());
        assert!(ConvSpec::new(0, 1, 0).out_extent(5, 3).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 6,
            k: 3,
            out_h: 3,
            out_w: 3,
            spec: ConvSpec::new(2, 1, 1),
        };
        assert_eq!(g.spec.out_extent(5, 3).unwrap(), 3);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        col2im(&g, &y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
