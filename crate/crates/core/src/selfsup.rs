//! Cut-paste self-supervision: a patch cut from a high-quality image is
//! pasted at a random location, and the discriminator regresses its
//! normalised bounding box.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{contract, Error, Result};

/// Normalised `(x1, y1, x2, y2)` box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if ok(self.x1, self.x2) && ok(self.y1, self.y2) {
            Ok(())
        } else {
            Err(contract(format!("malformed bounding box {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchAnnotation {
    pub bbox: BBox,
    pub source_image_id: usize,
    /// `(height, width)` in pixels.
    pub patch_size: (usize, usize),
    /// Top-left `(y, x)` of the pasted region in the target.
    pub origin: (usize, usize),
    /// Top-left `(y, x)` of the patch in the source image.
    pub source_origin: (usize, usize),
}

/// Patch side lengths as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchSizeRange {
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for PatchSizeRange {
    fn default() -> Self {
        PatchSizeRange {
            min_fraction: 1.0 / 8.0,
            max_fraction: 1.0 / 3.0,
        }
    }
}

impl PatchSizeRange {
    /// Inclusive pixel bounds for a side of length `side`.
    pub fn pixel_bounds(&self, side: usize) -> (usize, usize) {
        let lo = ((side as f64 * self.min_fraction).ceil() as usize).max(1);
        let hi = ((side as f64 * self.max_fraction).floor() as usize).max(lo);
        (lo, hi)
    }
}

/// Pastes a random patch of a random pool image onto `target`.
pub fn paste_random_patch(
    target: &Image,
    hq_pool: &[Image],
    range: PatchSizeRange,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, PatchAnnotation)> {
    if hq_pool.is_empty() {
        return Err(Error::Data("patch source pool is empty".into()));
    }
    let res = target.resolution;
    let (lo_h, hi_h) = range.pixel_bounds(res.height);
    let (lo_w, hi_w) = range.pixel_bounds(res.width);
    if hi_h > res.height || hi_w > res.width {
        return Err(contract(format!(
            "patch up to {hi_h}x{hi_w} does not fit a {res} image"
        )));
    }
    let source_image_id = rng.random_range(0..hq_pool.len());
    let source = &hq_pool[source_image_id];
    if source.resolution.height < hi_h || source.resolution.width < hi_w {
        return Err(contract("patch does not fit the source image"));
    }
    let ph = rng.random_range(lo_h..=hi_h);
    let pw = rng.random_range(lo_w..=hi_w);
    let sy = rng.random_range(0..=source.resolution.height - ph);
    let sx = rng.random_range(0..=source.resolution.width - pw);
    let ty = rng.random_range(0..=res.height - ph);
    let tx = rng.random_range(0..=res.width - pw);
    let mut out = target.clone();
    for c in 0..3 {
        for dy in 0..ph {
            for dx in 0..pw {
                out.set(c, ty + dy, tx + dx, source.at(c, sy + dy, sx + dx));
            }
        }
    }
    let bbox = BBox {
        x1: tx as f64 / res.width as f64,
        y1: ty as f64 / res.height as f64,
        x2: (tx + pw) as f64 / res.width as f64,
        y2: (ty + ph) as f64 / res.height as f64,
    };
    Ok((
        out,
        PatchAnnotation {
            bbox,
            source_image_id,
            patch_size: (ph, pw),
            origin: (ty, tx),
            source_origin: (sy, sx),
        },
    ))
}

/// Smooth-L1 with threshold 1, summed over the four coordinates.
pub fn smooth_l1(pred: [f64; 4], target: [f64; 4]) -> f64 {
    pred.iter()
        .zip(&target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

pub fn sp_loss(pred: [f64; 4], annotation: &PatchAnnotation) -> Result<f64> {
    annotation.bbox.validate()?;
    Ok(smooth_l1(pred, annotation.bbox.as_array()))
}

/// Batched loss on `(b, 4)` predictions: per-image smooth-L1 sum, averaged
/// over the batch.
pub fn sp_loss_tensor(pred: &Tensor, annotations: &[PatchAnnotation]) -> Result<Tensor> {
    let (b, k) = pred.dims2()?;
    if k != 4 || b != annotations.len() || b == 0 {
        return Err(contract(format!(
            "{b}x{k} predictions for {} annotations",
            annotations.len()
        )));
    }
    for a in annotations {
        a.bbox.validate()?;
    }
    let target: Vec<f32> = annotations
        .iter()
        .flat_map(|a| a.bbox.as_array().map(|v| v as f32))
        .collect();
    let target = Tensor::from_vec(target, (b, 4), pred.device())?.to_dtype(pred.dtype())?;
    let d = (pred - target)?.abs()?;
    let quad = (d.sqr()? * 0.5)?;
    let lin = (&d - 0.5)?;
    let small = d.lt(1.0)?;
    Ok(small.where_cond(&quad, &lin)?.sum(1)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Resolution;
    use rand::SeedableRng;

    fn ann(b: [f64; 4]) -> PatchAnnotation {
        PatchAnnotation {
            bbox: BBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3] },
            source_image_id: 0,
            patch_size: (1, 1),
            origin: (0, 0),
            source_origin: (0, 0),
        }
    }

    #[test]
    fn smooth_l1_values() {
        let t = [0.1, 0.2, 0.5, 0.6];
        assert_eq!(sp_loss(t, &ann(t)).unwrap(), 0.0);
        let plus = sp_loss([0.2, 0.2, 0.5, 0.6], &ann(t)).unwrap();
        let minus = sp_loss([0.0, 0.2, 0.5, 0.6], &ann(t)).unwrap();
        assert!((plus - 0.005).abs() < 1e-9);
        assert!((minus - plus).abs() < 1e-12);
        assert!(matches!(sp_loss(t, &ann([0.5, 0.2, 0.4, 0.6])), Err(Error::Contract(_))));
    }

    #[test]
    fn tensor_loss_matches_scalar() {
        let t = [0.1, 0.2, 0.5, 0.6];
        let p = Tensor::new(&[[0.3f64, 0.1, 0.9, 0.6], [0.1, 0.2, 0.5, 0.6]], &candle_core::Device::Cpu).unwrap();
        let got: f64 = sp_loss_tensor(&p, &[ann(t), ann(t)]).unwrap().to_scalar().unwrap();
        let want = (smooth_l1([0.3, 0.1, 0.9, 0.6], t) + 0.0) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn empty_pool_and_oversized_patch() {
        let target = Image::filled(Resolution::square(8), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            paste_random_patch(&target, &[], PatchSizeRange::default(), &mut rng),
            Err(Error::Data(_))
        ));
        let huge = PatchSizeRange { min_fraction: 1.5, max_fraction: 2.0 };
        assert!(matches!(
            paste_random_patch(&target, &[target.clone()], huge, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
