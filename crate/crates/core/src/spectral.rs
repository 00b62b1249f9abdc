//! Spectral and resampling primitives behind the difference maps.
//!
//! The DCT is the orthonormal type-II transform applied separably along
//! rows and columns; its inverse is the matching type-III transform.
//! Bilinear upscaling is corner-aligned so the four corner samples of the
//! source are reproduced exactly. Grayscale uses ITU-R 601 luma weights.
//!
//! Every operation exists twice: on [`SpatialMap`] in `f64`, used for
//! inspection and exact checks, and on batched tensors (the [`tensor`]
//! submodule) for the differentiable model path. Both routes share the
//! basis matrices built here.

use crate::error::{contract, Error, Result};

/// ITU-R BT.601 luma weights for (R, G, B).
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Resolution { height, width }
    }

    pub fn square(side: usize) -> Self {
        Resolution::new(side, side)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// True when both dimensions are at least those of `other`.
    pub fn covers(&self, other: Resolution) -> bool {
        self.height >= other.height && self.width >= other.width
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A real-valued grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    resolution: Resolution,
    values: Vec<f64>,
}

/// DCT-II coefficients of a [`SpatialMap`], same shape as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMap {
    resolution: Resolution,
    coefficients: Vec<f64>,
}

impl SpatialMap {
    pub fn new(resolution: Resolution, values: Vec<f64>) -> Result<Self> {
        if resolution.height == 0 || resolution.width == 0 {
            return Err(contract(format!("empty resolution {resolution}")));
        }
        if values.len() != resolution.area() {
            return Err(contract(format!(
                "{} values do not fill a {resolution} map",
                values.len()
            )));
        }
        Ok(SpatialMap { resolution, values })
    }

    pub fn filled(resolution: Resolution, value: f64) -> Result<Self> {
        SpatialMap::new(resolution, vec![value; resolution.area()])
    }

    pub fn from_fn(resolution: Resolution, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..resolution.height)
            .flat_map(|y| (0..resolution.width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        SpatialMap::new(resolution, values)
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.resolution.width + x]
    }

    pub fn max_abs_diff(&self, other: &SpatialMap) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "{what} has non-finite value at index {pos}"
            )));
        }
        Ok(())
    }
}

impl SpectralMap {
    pub fn new(resolution: Resolution, coefficients: Vec<f64>) -> Result<Self> {
        let spatial = SpatialMap::new(resolution, coefficients)?;
        Ok(SpectralMap {
            resolution: spatial.resolution,
            coefficients: spatial.values,
        })
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.coefficients[v * self.resolution.width + u]
    }
}

/// Orthonormal DCT-II basis as an `n x n` row-major matrix; row `k` holds
/// the k-th basis vector, so `C x` transforms and `C^T y` inverts.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf);
            m[k * n + i] = alpha * angle.cos();
        }
    }
    m
}

/// Corner-aligned linear interpolation weights, `dst x src` row-major.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        let pos = if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[i * src + lo] += 1.0 - frac;
        if frac > 0.0 {
            m[i * src + hi] += frac;
        }
    }
    m
}

/// `left * x * right^T` for a row-major `rows x cols` grid.
fn separable(
    x: &[f64],
    rows: usize,
    cols: usize,
    left: &[f64],
    out_rows: usize,
    right: &[f64],
    out_cols: usize,
) -> Vec<f64> {
    // x * right^T : rows x out_cols
    let mut tmp = vec![0.0; rows * out_cols];
    for r in 0..rows {
        for oc in 0..out_cols {
            tmp[r * out_cols + oc] = (0..cols).map(|c| x[r * cols + c] * right[oc * cols + c]).sum();
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for or in 0..out_rows {
        for oc in 0..out_cols {
            out[or * out_cols + oc] = (0..rows).map(|r| left[or * rows + r] * tmp[r * out_cols + oc]).sum();
        }
    }
    out
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

pub fn dct2d(map: &SpatialMap) -> Result<SpectralMap> {
    map.ensure_finite("dct2d input")?;
    let Resolution { height, width } = map.resolution;
    let coefficients = separable(
        &map.values,
        height,
        width,
        &dct_matrix(height),
        height,
        &dct_matrix(width),
        width,
    );
    Ok(SpectralMap {
        resolution: map.resolution,
        coefficients,
    })
}

pub fn idct2d(spec: &SpectralMap) -> Result<SpatialMap> {
    if let Some(pos) = spec.coefficients.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "idct2d input has non-finite coefficient at index {pos}"
        )));
    }
    let Resolution { height, width } = spec.resolution;
    let ch = transpose(&dct_matrix(height), height, height);
    let cw = transpose(&dct_matrix(width), width, width);
    let values = separable(&spec.coefficients, height, width, &ch, height, &cw, width);
    Ok(SpatialMap {
        resolution: spec.resolution,
        values,
    })
}

pub fn bilinear_upscale(map: &SpatialMap, target: Resolution) -> Result<SpatialMap> {
    let src = map.resolution;
    if !target.covers(src) {
        return Err(contract(format!(
            "cannot upscale {src} to smaller target {target}"
        )));
    }
    if target == src {
        return Ok(map.clone());
    }
    let values = separable(
        &map.values,
        src.height,
        src.width,
        &bilinear_matrix(src.height, target.height),
        target.height,
        &bilinear_matrix(src.width, target.width),
        target.width,
    );
    SpatialMap::new(target, values)
}

pub fn to_grayscale(channels: &[SpatialMap]) -> Result<SpatialMap> {
    if channels.len() != 3 {
        return Err(contract(format!(
            "grayscale conversion needs 3 channels, got {}",
            channels.len()
        )));
    }
    let res = channels[0].resolution;
    if channels.iter().any(|c| c.resolution != res) {
        return Err(contract("color channels disagree in resolution"));
    }
    let values = (0..res.area())
        .map(|i| {
            GRAY_WEIGHTS
                .iter()
                .zip(channels)
                .map(|(w, c)| w * c.values[i])
                .sum()
        })
        .collect();
    SpatialMap::new(res, values)
}

fn spectral_sub(a: &SpectralMap, b: &SpectralMap) -> Result<SpectralMap> {
    if a.resolution != b.resolution {
        return Err(contract(format!(
            "spectral difference of {} and {} maps",
            a.resolution, b.resolution
        )));
    }
    let coefficients = a
        .coefficients
        .iter()
        .zip(&b.coefficients)
        .map(|(x, y)| x - y)
        .collect();
    Ok(SpectralMap {
        resolution: a.resolution,
        coefficients,
    })
}

/// Difference map of a first-block feature map against the upscaled gray
/// version of the low-quality input image.
pub fn difference_map_first(feature: &SpatialMap, low_quality: &[SpatialMap]) -> Result<SpatialMap> {
    let gray = to_grayscale(low_quality)?;
    let reference = bilinear_upscale(&gray, feature.resolution)?;
    let diff = spectral_sub(&dct2d(feature)?, &dct2d(&reference)?)?;
    idct2d(&diff)
}

/// Difference map of an inner-block feature map against every map of the
/// previous block, averaged over the previous block's channels.
pub fn difference_map_inner(feature: &SpatialMap, previous: &[SpatialMap]) -> Result<SpatialMap> {
    if previous.is_empty() {
        return Err(contract("previous feature stack is empty"));
    }
    let target = feature.resolution;
    let own = dct2d(feature)?;
    let mut acc = vec![0.0; target.area()];
    for prev in previous {
        let up = dct2d(&bilinear_upscale(prev, target)?)?;
        let diff = spectral_sub(&own, &up)?;
        for (a, d) in acc.iter_mut().zip(&diff.coefficients) {
            *a += d;
        }
    }
    let s = previous.len() as f64;
    acc.iter_mut().for_each(|a| *a /= s);
    idct2d(&SpectralMap::new(target, acc)?)
}

/// Batched, differentiable versions operating on the last two tensor axes.
pub mod tensor {
    use super::{bilinear_matrix, dct_matrix, Resolution, GRAY_WEIGHTS};
    use crate::error::{contract, Result};
    use candle_core::{DType, Device, Tensor};

    fn matrix(values: Vec<f64>, rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, (rows, cols), device)?.to_dtype(dtype)?)
    }

    /// `left * x * right^T` over the trailing `(h, w)` axes of `x`.
    fn separable(x: &Tensor, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rank = dims.len();
        if rank < 2 {
            return Err(contract("separable transform needs at least 2 axes"));
        }
        let (h, w) = (dims[rank - 2], dims[rank - 1]);
        let (oh, ow) = (left.dim(0)?, right.dim(0)?);
        let lead: usize = dims[..rank - 2].iter().product();
        let y = x.contiguous()?.reshape((lead * h, w))?.matmul(&right.t()?)?;
        let y = y
            .reshape((lead, h, ow))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((lead * ow, h))?
            .matmul(&left.t()?)?;
        let y = y.reshape((lead, ow, oh))?.transpose(1, 2)?.contiguous()?;
        let mut out_dims = dims[..rank - 2].to_vec();
        out_dims.extend([oh, ow]);
        Ok(y.reshape(out_dims)?)
    }

    fn spatial(x: &Tensor) -> Result<Resolution> {
        let dims = x.dims();
        if dims.len() < 2 {
            return Err(contract("tensor has no spatial axes"));
        }
        Ok(Resolution::new(dims[dims.len() - 2], dims[dims.len() - 1]))
    }

    pub fn dct2d(x: &Tensor) -> Result<Tensor> {
        let r = spatial(x)?;
        let (dt, dev) = (x.dtype(), x.device());
        let ch = matrix(dct_matrix(r.height), r.height, r.height, dt, dev)?;
        let cw = matrix(dct_matrix(r.width), r.width, r.width, dt, dev)?;
        separable(x, &ch, &cw)
    }

    pub fn idct2d(x: &Tensor) -> Result<Tensor> {
        let r = spatial(x)?;
        let (dt, dev) = (x.dtype(), x.device());
        let ch = matrix(dct_matrix(r.height), r.height, r.height, dt, dev)?.t()?;
        let cw = matrix(dct_matrix(r.width), r.width, r.width, dt, dev)?.t()?;
        separable(x, &ch.contiguous()?, &cw.contiguous()?)
    }

    pub fn bilinear_upscale(x: &Tensor, target: Resolution) -> Result<Tensor> {
        let src = spatial(x)?;
        if !target.covers(src) {
            return Err(contract(format!("cannot upscale {src} to smaller target {target}")));
        }
        if src == target {
            return Ok(x.clone());
        }
        let (dt, dev) = (x.dtype(), x.device());
        let uh = matrix(bilinear_matrix(src.height, target.height), target.height, src.height, dt, dev)?;
        let uw = matrix(bilinear_matrix(src.width, target.width), target.width, src.width, dt, dev)?;
        separable(x, &uh, &uw)
    }

    /// `(b, 3, h, w)` color batch to `(b, 1, h, w)` luma.
    pub fn to_grayscale(x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(contract(format!("grayscale conversion needs 3 channels, got {c}")));
        }
        let w = Tensor::new(&GRAY_WEIGHTS, x.device())?
            .to_dtype(x.dtype())?
            .reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_mul(&w)?.sum_keepdim(1)?)
    }

    /// First-block difference maps: `features` is `(b, t, h, w)`, the
    /// low-quality batch `(b, 3, h0, w0)`. Output matches `features`.
    pub fn difference_map_first(features: &Tensor, low_quality: &Tensor) -> Result<Tensor> {
        let target = spatial(features)?;
        let reference = bilinear_upscale(&to_grayscale(low_quality)?, target)?;
        let diff = dct2d(features)?.broadcast_sub(&dct2d(&reference)?)?;
        idct2d(&diff)
    }

    /// Inner-block difference maps: `features` is `(b, t, h, w)`, `previous`
    /// is `(b, s, h', w')` at a resolution no larger than `features`.
    pub fn difference_map_inner(features: &Tensor, previous: &Tensor) -> Result<Tensor> {
        let (_, s, _, _) = previous.dims4()?;
        if s == 0 {
            return Err(contract("previous feature stack is empty"));
        }
        let target = spatial(features)?;
        let up = dct2d(&bilinear_upscale(previous, target)?)?;
        // mean_s (D(F) - D(U(F_s))) == D(F) - mean_s D(U(F_s))
        let diff = dct2d(features)?.broadcast_sub(&up.mean_keepdim(1)?)?;
        idct2d(&diff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> SpatialMap {
        SpatialMap::new(Resolution::new(h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn constant_map_is_dc_only() {
        let m = SpatialMap::filled(Resolution::square(4), 2.5).unwrap();
        let s = dct2d(&m).unwrap();
        assert!((s.get(0, 0) - 4.0 * 2.5).abs() < 1e-12);
        for (i, c) in s.coefficients().iter().enumerate().skip(1) {
            assert!(c.abs() < 1e-12, "coefficient {i} = {c}");
        }
    }

    #[test]
    fn zero_coefficients_invert_to_zero() {
        let s = SpectralMap::new(Resolution::square(3), vec![0.0; 9]).unwrap();
        assert!(idct2d(&s).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dc_coefficient_inverts_to_ones() {
        let n = 5;
        let mut c = vec![0.0; n * n];
        c[0] = n as f64;
        let m = idct2d(&SpectralMap::new(Resolution::square(n), c).unwrap()).unwrap();
        assert!(m.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = map(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(dct2d(&m), Err(Error::NumericDomain(_))));
        let s = SpectralMap::new(Resolution::new(1, 2), vec![f64::INFINITY, 0.0]).unwrap();
        assert!(matches!(idct2d(&s), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn corner_aligned_upscale() {
        let m = map(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let up = bilinear_upscale(&m, Resolution::new(2, 3)).unwrap();
        assert_eq!(up.values(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        assert_eq!(bilinear_upscale(&m, Resolution::new(2, 2)).unwrap(), m);
        assert!(matches!(
            bilinear_upscale(&m, Resolution::new(1, 4)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn upscale_preserves_constants() {
        let m = SpatialMap::filled(Resolution::new(3, 2), -0.75).unwrap();
        let up = bilinear_upscale(&m, Resolution::new(7, 9)).unwrap();
        assert!(up.values().iter().all(|v| (v + 0.75).abs() < 1e-12));
    }

    #[test]
    fn grayscale_weights() {
        assert!((GRAY_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = Resolution::square(2);
        let one = SpatialMap::filled(r, 1.0).unwrap();
        let zero = SpatialMap::filled(r, 0.0).unwrap();
        let red = to_grayscale(&[one.clone(), zero.clone(), zero.clone()]).unwrap();
        assert!(red.values().iter().all(|v| (v - 0.299).abs() < 1e-12));
        let green = to_grayscale(&[zero.clone(), one.clone(), zero.clone()]).unwrap();
        assert!(green.values().iter().all(|v| (v - 0.587).abs() < 1e-12));
        let black = to_grayscale(&[zero.clone(), zero.clone(), zero.clone()]).unwrap();
        assert!(black.values().iter().all(|v| *v == 0.0));
        let v = SpatialMap::filled(r, 0.4).unwrap();
        let gray = to_grayscale(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert!(gray.values().iter().all(|x| (x - 0.4).abs() < 1e-12));
        assert!(matches!(to_grayscale(&[one.clone(), zero]), Err(Error::Contract(_))));
    }

    #[test]
    fn self_difference_is_zero() {
        let lq: Vec<SpatialMap> = (0..3)
            .map(|c| SpatialMap::from_fn(Resolution::square(2), |y, x| (c + y * 2 + x) as f64 * 0.1).unwrap())
            .collect();
        let reference = bilinear_upscale(&to_grayscale(&lq).unwrap(), Resolution::square(4)).unwrap();
        let h = difference_map_first(&reference, &lq).unwrap();
        assert!(h.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn antisymmetric_previous_pair_returns_feature() {
        let f = SpatialMap::from_fn(Resolution::square(4), |y, x| (y as f64 - x as f64) * 0.3).unwrap();
        let p = SpatialMap::from_fn(Resolution::square(2), |y, x| (y * 2 + x) as f64).unwrap();
        let neg = SpatialMap::new(p.resolution(), p.values().iter().map(|v| -v).collect()).unwrap();
        let h = difference_map_inner(&f, &[p, neg]).unwrap();
        assert!(h.max_abs_diff(&f) < 1e-12);
        assert!(matches!(difference_map_inner(&f, &[]), Err(Error::Contract(_))));
    }
}
