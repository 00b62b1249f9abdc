//! x2 nearest-neighbour upsampling and 2x2 sum pooling as custom ops;
//! each is the other's adjoint.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor};

use super::conv::contiguous;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Unpool2;

#[derive(Debug, Clone, Copy)]
pub(crate) struct SumPool2;

fn unpool<T: Copy + Default>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * 4 * h * w];
    for (plane, s) in src.chunks_exact(h * w).enumerate().take(planes) {
        let o = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            let row = &mut o[2 * y * 2 * w..(2 * y + 1) * 2 * w];
            for (x, v) in s[y * w..(y + 1) * w].iter().enumerate() {
                row[2 * x] = *v;
                row[2 * x + 1] = *v;
            }
            o.copy_within(2 * y * 2 * w..(2 * y + 1) * 2 * w, (2 * y + 1) * 2 * w);
        }
    }
    out
}

fn sum_pool<T: Copy + Default + std::ops::Add<Output = T>>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::default(); planes * oh * ow];
    for (plane, s) in src.chunks_exact(h * w).enumerate().take(planes) {
        let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let top = &s[2 * y * w..(2 * y + 1) * w];
            let bottom = &s[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                o[y * ow + x] = top[2 * x] + top[2 * x + 1] + bottom[2 * x] + bottom[2 * x + 1];
            }
        }
    }
    out
}

impl CustomOp1 for Unpool2 {
    fn name(&self) -> &'static str {
        "unpool2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unpool(contiguous(v, layout)?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(unpool(contiguous(v, layout)?, b * c, h, w)),
            _ => bail!("unpool2 supports f32 and f64"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sum_pool2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            bail!("cannot 2x2-pool a {h}x{w} map");
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(sum_pool(contiguous(v, layout)?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(sum_pool(contiguous(v, layout)?, b * c, h, w)),
            _ => bail!("sum_pool2 supports f32 and f64"),
        };
        Ok((out, Shape::from((b, c, h / 2, w / 2))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unpool2)?))
    }
}
