//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls into the crate's numeric
//! kernels.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Row-major `h x w` grid.
pub type Grid = Vec<f64>;

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Orthonormal DCT-II as the plain quadruple sum.
pub fn brute_dct(x: &[f64], h: usize, w: usize) -> Grid {
    let alpha = |k: usize, n: usize| {
        if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    let mut out = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[y * w + xx]
                        * (PI * (2 * y + 1) as f64 * v as f64 / (2.0 * h as f64)).cos()
                        * (PI * (2 * xx + 1) as f64 * u as f64 / (2.0 * w as f64)).cos();
                }
            }
            out[v * w + u] = alpha(v, h) * alpha(u, w) * s;
        }
    }
    out
}

/// Corner-aligned bilinear resampling, evaluated pixel by pixel.
pub fn bilinear(x: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Grid {
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        if dst == 1 {
            0.0
        } else {
            i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
        }
    };
    let mut out = vec![0.0; th * tw];
    for i in 0..th {
        let py = coord(i, h, th);
        let y0 = py.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = py - y0 as f64;
        for j in 0..tw {
            let px = coord(j, w, tw);
            let x0 = px.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = px - x0 as f64;
            let at = |y: usize, xx: usize| x[y * w + xx];
            out[i * tw + j] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
        }
    }
    out
}

pub fn gray(r: &[f64], g: &[f64], b: &[f64]) -> Grid {
    r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
}

/// `F - Upscale(Gray(I))` computed entirely in the spatial domain.
pub fn first_difference(f: &[f64], fh: usize, fw: usize, rgb: [&[f64]; 3], h: usize, w: usize) -> Grid {
    let up = bilinear(&gray(rgb[0], rgb[1], rgb[2]), h, w, fh, fw);
    f.iter().zip(&up).map(|(a, b)| a - b).collect()
}

/// `F - mean_s Upscale(P_s)` computed entirely in the spatial domain.
pub fn inner_difference(f: &[f64], fh: usize, fw: usize, prev: &[Grid], h: usize, w: usize) -> Grid {
    let mut mean = vec![0.0; fh * fw];
    for p in prev {
        for (m, v) in mean.iter_mut().zip(bilinear(p, h, w, fh, fw)) {
            *m += v / prev.len() as f64;
        }
    }
    f.iter().zip(&mean).map(|(a, b)| a - b).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative agreement used for gradient checks; the denominator is floored
/// so components that vanish analytically are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Matrix product of row-major `a: (n, k)` and `b: (k, m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
        }
    }
    out
}
