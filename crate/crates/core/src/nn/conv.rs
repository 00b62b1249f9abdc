//! Stride-1 "same" convolutions lowered to im2col + matmul.
//!
//! The unfold and fold kernels are custom ops that are each other's
//! backward pass.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    kernel: usize,
    height: usize,
    width: usize,
}

/// `(b, c, h, w)` image to a `(c * k * k, b * h * w)` column matrix.
#[derive(Debug, Clone, Copy)]
struct Unfold(Geometry);

/// Adjoint of [`Unfold`]: scatters columns back onto the image.
#[derive(Debug, Clone, Copy)]
struct Fold(Geometry);

/// Calls `f(col_row, col_offset, src_offset, len)` for every contiguous
/// run shared by a column-matrix row and the zero-padded source image.
fn for_each_run(g: Geometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let Geometry { batch, channels, kernel: k, height: h, width: w } = g;
    let p = k / 2;
    let hw = h * w;
    for c in 0..channels {
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                // output x in [x0, x1) reads source x + dx - p
                let x0 = p.saturating_sub(dx);
                let x1 = (w + p).saturating_sub(dx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for b in 0..batch {
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let src = ((b * channels + c) * h + sy - p) * w + x0 + dx - p;
                        f(row, b * hw + y * w + x0, src, x1 - x0);
                    }
                }
            }
        }
    }
}

fn unfold<T: Copy + Default>(src: &[T], g: Geometry) -> Vec<T> {
    let cols = g.batch * g.height * g.width;
    let mut out = vec![T::default(); g.channels * g.kernel * g.kernel * cols];
    for_each_run(g, |row, col, from, len| {
        let at = row * cols + col;
        out[at..at + len].copy_from_slice(&src[from..from + len]);
    });
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: Geometry) -> Vec<T> {
    let cols = g.batch * g.height * g.width;
    let mut out = vec![T::default(); g.batch * g.channels * g.height * g.width];
    for_each_run(g, |row, col, to, len| {
        let at = row * cols + col;
        for (o, v) in out[to..to + len].iter_mut().zip(&src[at..at + len]) {
            *o += *v;
        }
    });
    out
}

pub(crate) fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("custom op expects a contiguous input"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if layout.shape().dims4()? != (g.batch, g.channels, g.height, g.width) {
            bail!("im2col geometry mismatch");
        }
        let shape = Shape::from((g.channels * g.kernel * g.kernel, g.batch * g.height * g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout)?, g)),
            _ => bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout)?, g)),
            _ => bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// Fused im2col convolution. The backward pass computes the input
/// gradient as a convolution of the output gradient with the flipped,
/// channel-transposed kernel, which avoids materialising a column-sized
/// gradient.
#[derive(Debug, Clone, Copy)]
struct Conv(Geometry);

/// `(o, b, n)` to `(b, o, n)`.
fn swap_leading<T: Copy + Default>(src: &[T], o: usize, b: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::default(); o * b * n];
    for (oi, block) in src.chunks_exact(b * n).enumerate() {
        for (bi, run) in block.chunks_exact(n).enumerate() {
            out[(bi * o + oi) * n..(bi * o + oi + 1) * n].copy_from_slice(run);
        }
    }
    out
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d_same"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (o, _, _, _) = wl.shape().dims4()?;
        let ckk = g.channels * g.kernel * g.kernel;
        let n = g.height * g.width;
        let cols = match xs {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, xl)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, xl)?, g)),
            _ => bail!("conv2d supports f32 and f64"),
        };
        let (start, _) = wl
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("conv weight must be contiguous".into()))?;
        let wm = Layout::contiguous_with_offset((o, ckk), start);
        let y = ws.matmul(&cols, (1, o, g.batch * n, ckk), &wm, &Layout::contiguous((ckk, g.batch * n)))?;
        let out = match y {
            CpuStorage::F32(v) => CpuStorage::F32(swap_leading(&v, o, g.batch, n)),
            CpuStorage::F64(v) => CpuStorage::F64(swap_leading(&v, o, g.batch, n)),
            _ => unreachable!(),
        };
        Ok((out, Shape::from((g.batch, o, g.height, g.width))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.0;
        let (o, c, k, _) = w.dims4()?;
        let gm = grad.transpose(0, 1)?.contiguous()?.reshape((o, g.batch * g.height * g.width))?;
        let cols = x.detach().contiguous()?.apply_op1(Unfold(g))?;
        let dw = cols.matmul(&gm.t()?)?.t()?.reshape((o, c, k, k))?;
        let rev = Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, w.device())?;
        let flipped = w
            .detach()
            .transpose(0, 1)?
            .contiguous()?
            .index_select(&rev, 2)?
            .index_select(&rev, 3)?;
        let dg = Geometry { channels: o, ..g };
        let dx = grad.contiguous()?.apply_op2_no_bwd(&flipped, &Conv(dg))?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Cross-correlation of `x: (b, c, h, w)` with `weight: (o, c, k, k)`,
/// stride 1, zero padding `k / 2` (k odd). Output `(b, o, h, w)`.
pub fn conv2d_same(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (_, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != kw || kh % 2 == 0 {
        return Err(contract(format!(
            "conv weight {:?} does not fit input with {c} channels",
            weight.dims()
        )));
    }
    let g = Geometry {
        batch: b,
        channels: c,
        kernel: kh,
        height: h,
        width: w,
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Conv(g))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive(x: &[f64], w: &[f64], b: usize, c: usize, o: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; b * o * h * wd];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let sy = y as isize + dy as isize - p;
                                    let sx = xx as isize + dx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    s += x[((bi * c + ci) * h + sy as usize) * wd + sx as usize]
                                        * w[((oi * c + ci) * k + dy) * k + dx];
                                }
                            }
                        }
                        out[((bi * o + oi) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let dev = Device::Cpu;
        for &(b, c, o, h, w, k) in &[(2, 3, 4, 5, 6, 3), (1, 2, 2, 4, 4, 1), (3, 1, 2, 3, 3, 5)] {
            let x = Tensor::randn(0f64, 1.0, (b, c, h, w), &dev).unwrap();
            let wt = Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap();
            let got = conv2d_same(&x, &wt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = naive(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                &wt.flatten_all().unwrap().to_vec1().unwrap(),
                b, c, o, h, w, k,
            );
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (1, 2, 4, 4), &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &dev).unwrap();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            conv2d_same(x, w).unwrap().mul(&probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let l = conv2d_same(&x, &w).unwrap().mul(&probe).unwrap().sum_all().unwrap();
        let grads = l.backward().unwrap();
        for var in [&x, &w] {
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eps = 1e-6;
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let shape = var.shape().clone();
                let tp = Tensor::from_vec(plus, shape.clone(), &dev).unwrap();
                let tm = Tensor::from_vec(minus, shape, &dev).unwrap();
                let (lp, lm) = if std::ptr::eq(var, &x) {
                    (loss(&tp, &w), loss(&tm, &w))
                } else {
                    (loss(&x, &tp), loss(&x, &tm))
                };
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
            }
        }
        assert_eq!(x.dtype(), DType::F64);
    }
}
