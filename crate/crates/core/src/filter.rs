//! Separable Gaussian "valid" window filtering on x-fastest 3D arrays, its
//! adjoint, and windowed SSIM with an analytic gradient.
//!
//! 2D images use dims `[w, h, 1]`; a window axis of length 1 is the identity.

use crate::error::{Error, Result};
use crate::reduce::pairwise_sum;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const WINDOW_2D: [usize; 3] = [11, 11, 1];
pub const WINDOW_3D: [usize; 3] = [7, 7, 7];

/// Normalized 1D Gaussian taps of odd length `n`.
pub fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window sizes clipped to the largest odd length that fits each axis.
pub fn fit_window(dims: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    let mut out = [1; 3];
    for k in 0..3 {
        let mut n = window[k].min(dims[k]).max(1);
        if n.is_multiple_of(2) {
            n -= 1;
        }
        out[k] = n;
    }
    out
}

/// Gaussian window filter with "valid" output extent.
#[derive(Debug, Clone)]
pub struct WindowFilter {
    dims: [usize; 3],
    out_dims: [usize; 3],
    taps: [Vec<f64>; 3],
}

impl WindowFilter {
    pub fn new(dims: [usize; 3], window: [usize; 3], sigma: f64) -> Self {
        let win = fit_window(dims, window);
        let taps = win.map(|n| gaussian_kernel(n, sigma));
        let out_dims = [0, 1, 2].map(|k| dims[k] + 1 - win[k]);
        Self { dims, out_dims, taps }
    }

    pub fn out_dims(&self) -> [usize; 3] {
        self.out_dims
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        debug_assert_eq!(data.len(), self.dims.iter().product::<usize>());
        let mut cur = data.to_vec();
        let mut dims = self.dims;
        for axis in 0..3 {
            if self.taps[axis].len() > 1 {
                let (next, nd) = correlate_axis(&cur, dims, axis, &self.taps[axis]);
                cur = next;
                dims = nd;
            }
        }
        cur
    }

    /// Transpose of [`apply`](Self::apply): spreads output-space values back
    /// onto the input grid.
    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.out_len());
        let mut cur = grad.to_vec();
        let mut dims = self.out_dims;
        for axis in (0..3).rev() {
            if self.taps[axis].len() > 1 {
                let (next, nd) = scatter_axis(&cur, dims, axis, &self.taps[axis]);
                cur = next;
                dims = nd;
            }
        }
        cur
    }
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

fn correlate_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut od = dims;
    od[axis] = dims[axis] + 1 - taps.len();
    let is = strides(dims);
    let os = strides(od);
    let mut out = vec![0.0; od.iter().product()];
    for k in 0..od[2] {
        for j in 0..od[1] {
            for i in 0..od[0] {
                let base = i * is[0] + j * is[1] + k * is[2];
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    acc += w * data[base + t * is[axis]];
                }
                out[i * os[0] + j * os[1] + k * os[2]] = acc;
            }
        }
    }
    (out, od)
}

fn scatter_axis(grad: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut id = dims;
    id[axis] = dims[axis] + taps.len() - 1;
    let is = strides(id);
    let gs = strides(dims);
    let mut out = vec![0.0; id.iter().product()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let g = grad[i * gs[0] + j * gs[1] + k * gs[2]];
                let base = i * is[0] + j * is[1] + k * is[2];
                for (t, w) in taps.iter().enumerate() {
                    out[base + t * is[axis]] += w * g;
                }
            }
        }
    }
    (out, id)
}

/// Mean SSIM and, if requested, its gradient with respect to `a`.
#[derive(Debug, Clone)]
pub struct SsimEval {
    pub value: f64,
    pub grad_a: Option<Vec<f64>>,
}

/// Mean windowed SSIM of `a` against `b` on a shared grid. The dynamic range
/// is `L = max(max a, max b, 1e-6)`.
pub fn ssim_windowed(a: &[f64], b: &[f64], dims: [usize; 3], window: [usize; 3], want_grad: bool) -> Result<SsimEval> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::input(format!(
            "ssim shape mismatch: {} and {} values for dims {:?}",
            a.len(),
            b.len(),
            dims
        )));
    }
    if n == 0 {
        return Err(Error::input("ssim of empty arrays"));
    }
    let (amax_idx, amax) = argmax(a);
    let bmax = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = amax.max(bmax).max(1e-6);
    let range_from_a = amax >= bmax && amax >= 1e-6;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let f = WindowFilter::new(dims, window, SSIM_SIGMA);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = f.apply(a);
    let mu_b = f.apply(b);
    let e_aa = f.apply(&aa);
    let e_bb = f.apply(&bb);
    let e_ab = f.apply(&ab);

    let m = f.out_len();
    let mut map = vec![0.0; m];
    let mut d_mu = vec![0.0; if want_grad { m } else { 0 }];
    let mut d_eaa = d_mu.clone();
    let mut d_eab = d_mu.clone();
    let mut d_c1 = d_mu.clone();
    let mut d_c2 = d_mu.clone();
    for p in 0..m {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let num1 = 2.0 * ma * mb + c1;
        let den1 = ma * ma + mb * mb + c1;
        let num2 = 2.0 * (e_ab[p] - ma * mb) + c2;
        let den2 = (e_aa[p] - ma * ma) + (e_bb[p] - mb * mb) + c2;
        let s = (num1 * num2) / (den1 * den2);
        map[p] = s;
        if want_grad {
            d_mu[p] = s * (2.0 * mb / num1 - 2.0 * ma / den1 - 2.0 * mb / num2 + 2.0 * ma / den2);
            d_eab[p] = s * 2.0 / num2;
            d_eaa[p] = -s / den2;
            d_c1[p] = s * (1.0 / num1 - 1.0 / den1);
            d_c2[p] = s * (1.0 / num2 - 1.0 / den2);
        }
    }
    let value = pairwise_sum(&map) / m as f64;
    if !want_grad {
        return Ok(SsimEval { value, grad_a: None });
    }
    let inv_m = 1.0 / m as f64;
    let g_mu = f.adjoint(&d_mu);
    let g_eaa = f.adjoint(&d_eaa);
    let g_eab = f.adjoint(&d_eab);
    let mut grad: Vec<f64> = (0..n)
        .map(|i| inv_m * (g_mu[i] + 2.0 * a[i] * g_eaa[i] + b[i] * g_eab[i]))
        .collect();
    if range_from_a {
        // C1 and C2 scale with the dynamic range, which follows max(a)
        let dl = 2.0 * range * (SSIM_K1 * SSIM_K1 * pairwise_sum(&d_c1) + SSIM_K2 * SSIM_K2 * pairwise_sum(&d_c2));
        grad[amax_idx] += inv_m * dl;
    }
    Ok(SsimEval {
        value,
        grad_a: Some(grad),
    })
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in xs.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
