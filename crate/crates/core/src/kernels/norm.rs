//! Group normalization over `C×H×W` activations.

use crate::tensor::Element;

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct GroupNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn forward<T: Element>(
    x: &[T],
    c: usize,
    plane: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormSaved<T>) {
    let per = c / groups;
    let n = per * plane;
    let nf = T::lit(n as f64);
    let eps = T::lit(GROUP_NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * n..(g + 1) * n;
        let xs = &x[span.clone()];
        let mean = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = (var + eps).sqrt().recip();
        rstds.push(rstd);
        for (i, &v) in xs.iter().enumerate() {
            xhat[g * n + i] = (v - mean) * rstd;
        }
        for ch in g * per..(g + 1) * per {
            let (ga, be) = (gamma[ch], beta[ch]);
            for i in ch * plane..(ch + 1) * plane {
                out[i] = xhat[i] * ga + be;
            }
        }
    }
    (out, GroupNormSaved { xhat, rstd: rstds })
}

/// Accumulates input, scale and shift gradients.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Element>(
    grad_out: &[T],
    saved: &GroupNormSaved<T>,
    c: usize,
    plane: usize,
    groups: usize,
    gamma: &[T],
    grad_x: Option<&mut [T]>,
    grad_gamma: Option<&mut [T]>,
    grad_beta: Option<&mut [T]>,
) {
    if let Some(gg) = grad_gamma {
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            gg[ch] += grad_out[r.clone()]
                .iter()
                .zip(&saved.xhat[r])
                .map(|(&a, &b)| a * b)
                .sum::<T>();
        }
    }
    if let Some(gb) = grad_beta {
        for ch in 0..c {
            gb[ch] += grad_out[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
        }
    }
    if let Some(gx) = grad_x {
        let per = c / groups;
        let n = per * plane;
        let nf = T::lit(n as f64);
        let mut dxhat = vec![T::zero(); n];
        for g in 0..groups {
            let mut sum = T::zero();
            let mut sum_x = T::zero();
            for ch in g * per..(g + 1) * per {
                for i in ch * plane..(ch + 1) * plane {
                    let d = grad_out[i] * gamma[ch];
                    dxhat[i - g * n] = d;
                    sum += d;
                    sum_x += d * saved.xhat[i];
                }
            }
            let k = saved.rstd[g] / nf;
            for i in 0..n {
                let idx = g * n + i;
                gx[idx] += k * (nf * dxhat[i] - sum - saved.xhat[idx] * sum_x);
            }
        }
    }
}
