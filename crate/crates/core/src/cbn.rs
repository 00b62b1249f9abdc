//! Conditional batch normalisation: standardisation followed by a
//! per-class scale and shift.
//!
//! Class ids are zero-based throughout the crate.

use candle_core::{Device, Tensor, Var};

use crate::error::{contract, Error, Result};
use crate::nn::{channel_stats, Init, Kind, Mode, Registry, RunningStats, DTYPE};

pub const CBN_EPS: f64 = 1e-5;

/// Which conditional layer of which block a table belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub position: u8,
}

/// Per-class scale and shift tables, each `(num_classes, channels)`.
#[derive(Debug, Clone)]
pub struct CbnParams {
    pub gamma: Var,
    pub beta: Var,
    pub layer: LayerId,
}

/// Statistics used for one standardisation, each `(1, c, 1, 1)`.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub epsilon: f64,
}

pub fn cbn_init(num_classes: usize, channels: usize, layer: LayerId) -> Result<CbnParams> {
    if num_classes == 0 || channels == 0 {
        return Err(contract(format!(
            "conditional norm needs positive sizes, got {num_classes} classes x {channels} channels"
        )));
    }
    let dev = Device::Cpu;
    CbnParams::from_tables(
        Tensor::ones((num_classes, channels), DTYPE, &dev)?,
        Tensor::zeros((num_classes, channels), DTYPE, &dev)?,
        layer,
    )
}

impl CbnParams {
    pub fn from_tables(gamma: Tensor, beta: Tensor, layer: LayerId) -> Result<Self> {
        if gamma.shape() != beta.shape() || gamma.rank() != 2 {
            return Err(contract(format!(
                "gamma {:?} and beta {:?} must be equal 2-D tables",
                gamma.dims(),
                beta.dims()
            )));
        }
        Ok(CbnParams {
            gamma: Var::from_tensor(&gamma)?,
            beta: Var::from_tensor(&beta)?,
            layer,
        })
    }

    fn register(reg: &mut Registry, name: &str, num_classes: usize, channels: usize, layer: LayerId) -> Result<Self> {
        let fresh = cbn_init(num_classes, channels, layer)?;
        let gamma = reg.adopt(&format!("{name}.gamma"), fresh.gamma, Kind::Trainable);
        let beta = reg.adopt(&format!("{name}.beta"), fresh.beta, Kind::Trainable);
        Ok(CbnParams { gamma, beta, layer })
    }

    pub fn num_classes(&self) -> usize {
        self.gamma.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims()[1]
    }

    pub(crate) fn check_classes(&self, classes: &[usize]) -> Result<()> {
        let size = self.num_classes();
        match classes.iter().find(|&&c| c >= size) {
            Some(&label) => Err(Error::LabelDomain {
                label,
                size,
                space: "high-quality",
            }),
            None => Ok(()),
        }
    }

    /// Rows of both tables for each requested class, `(n, channels)`.
    pub fn rows(&self, classes: &[usize]) -> Result<(Tensor, Tensor)> {
        self.check_classes(classes)?;
        let idx = Tensor::from_vec(
            classes.iter().map(|&c| c as u32).collect::<Vec<_>>(),
            classes.len(),
            self.gamma.device(),
        )?;
        Ok((
            self.gamma.as_tensor().index_select(&idx, 0)?,
            self.beta.as_tensor().index_select(&idx, 0)?,
        ))
    }
}

/// The class-`class_id` row of the scale and shift tables.
pub fn select_class_params(params: &CbnParams, class_id: usize) -> Result<(Tensor, Tensor)> {
    let (g, b) = params.rows(&[class_id])?;
    Ok((g.squeeze(0)?, b.squeeze(0)?))
}

/// Batch statistics of `(b, c, h, w)` over batch and spatial axes.
pub fn norm_stats(x: &Tensor, epsilon: f64) -> Result<NormStats> {
    let (mu, sigma) = channel_stats(x)?;
    Ok(NormStats { mu, sigma, epsilon })
}

fn affine(y: &Tensor, classes: &[usize], params: &CbnParams) -> Result<Tensor> {
    let (b, c, _, _) = y.dims4()?;
    if classes.len() != b {
        return Err(contract(format!("{} class ids for a batch of {b}", classes.len())));
    }
    if c != params.channels() {
        return Err(contract(format!(
            "input has {c} channels, conditional norm expects {}",
            params.channels()
        )));
    }
    let (gamma, beta) = params.rows(classes)?;
    Ok(y
        .broadcast_mul(&gamma.reshape((b, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((b, c, 1, 1))?)?)
}

/// `gamma[c] * (x - mu) / (sigma + eps) + beta[c]` with batch statistics;
/// `classes[i]` conditions sample `i`.
pub fn cbn_forward(x: &Tensor, classes: &[usize], params: &CbnParams, eps: f64) -> Result<Tensor> {
    params.check_classes(classes)?;
    let stats = norm_stats(x, eps)?;
    let y = x.broadcast_sub(&stats.mu)?.broadcast_div(&(stats.sigma + eps)?)?;
    affine(&y, classes, params)
}

/// Conditional batch-norm layer with running statistics for inference.
#[derive(Debug, Clone)]
pub struct ConditionalBatchNorm {
    pub params: CbnParams,
    stats: RunningStats,
}

impl ConditionalBatchNorm {
    pub fn new(
        reg: &mut Registry,
        init: &Init,
        name: &str,
        num_classes: usize,
        channels: usize,
        layer: LayerId,
    ) -> Result<Self> {
        Ok(ConditionalBatchNorm {
            params: CbnParams::register(reg, name, num_classes, channels, layer)?,
            stats: RunningStats::new(reg, init, name, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, classes: &[usize], mode: Mode) -> Result<Tensor> {
        self.params.check_classes(classes)?;
        let y = self.stats.standardize(x, mode, CBN_EPS)?;
        affine(&y, classes, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    const LAYER: LayerId = LayerId { block: 1, position: 1 };

    #[test]
    fn init_is_identity_and_deterministic() {
        let p = cbn_init(3, 4, LAYER).unwrap();
        assert_eq!(p.gamma.dims(), &[3, 4]);
        assert!(p.gamma.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 1.0));
        assert!(p.beta.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        let q = cbn_init(3, 4, LAYER).unwrap();
        assert_eq!(
            p.gamma.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            q.gamma.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(matches!(cbn_init(0, 4, LAYER), Err(Error::Contract(_))));
        assert!(matches!(cbn_init(2, 0, LAYER), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_evaluated_two_point_channel() {
        let dev = Device::Cpu;
        let p = CbnParams::from_tables(
            Tensor::new(&[[3.0f64]], &dev).unwrap(),
            Tensor::new(&[[1.0f64]], &dev).unwrap(),
            LAYER,
        )
        .unwrap();
        let x = Tensor::new(&[0.0f64, 2.0], &dev).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let y = cbn_forward(&x, &[0], &p, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((y[0] + 2.0).abs() < 1e-9 && (y[1] - 4.0).abs() < 1e-9, "{y:?}");
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let dev = Device::Cpu;
        let p = CbnParams::from_tables(
            Tensor::new(&[[2.0f32, 2.0], [5.0, 5.0]], &dev).unwrap(),
            Tensor::new(&[[0.5f32, -0.5], [7.0, 8.0]], &dev).unwrap(),
            LAYER,
        )
        .unwrap();
        let x = Tensor::full(3.0f32, (1, 2, 3, 3), &dev).unwrap();
        let y = cbn_forward(&x, &[1], &p, CBN_EPS).unwrap();
        let v = y.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v[..9].iter().all(|a| (a - 7.0).abs() < 1e-5));
        assert!(v[9..].iter().all(|a| (a - 8.0).abs() < 1e-5));
    }

    #[test]
    fn select_rows_and_label_errors() {
        let dev = Device::Cpu;
        let p = CbnParams::from_tables(
            Tensor::new(&[[1.0f32, 0.0], [0.0, 1.0]], &dev).unwrap(),
            Tensor::new(&[[0.1f32, 0.2], [0.3, 0.4]], &dev).unwrap(),
            LAYER,
        )
        .unwrap();
        let (g, b) = select_class_params(&p, 1).unwrap();
        assert_eq!(g.to_vec1::<f32>().unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.to_vec1::<f32>().unwrap(), vec![0.3, 0.4]);
        assert_eq!(g.argmax(0).unwrap().to_scalar::<u32>().unwrap(), 1);
        let (g0, _) = select_class_params(&p, 0).unwrap();
        assert_eq!(g0.argmax(0).unwrap().to_scalar::<u32>().unwrap(), 0);
        assert!(matches!(
            select_class_params(&p, 2),
            Err(Error::LabelDomain { label: 2, size: 2, .. })
        ));
        let x = Tensor::zeros((1, 2, 2, 2), DType::F32, &dev).unwrap();
        assert!(matches!(cbn_forward(&x, &[5], &p, CBN_EPS), Err(Error::LabelDomain { .. })));
    }
}
