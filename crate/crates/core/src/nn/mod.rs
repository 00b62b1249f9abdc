//! Layer plumbing shared by the three networks: named parameter
//! registries, seeded initialisation, convolution/linear layers,
//! batch statistics, spectral normalisation and the Adam optimiser.

mod conv;
mod optim;
mod resample;

pub use conv::conv2d_same;
pub use optim::{Adam, AdamConfig};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

pub const DTYPE: DType = DType::F32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat and power-iteration updates.
    Train,
    /// Frozen running statistics, no state updates.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub var: Var,
    pub kind: Kind,
}

/// Named variables of one network, in creation order.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    prefix: String,
    entries: Vec<Entry>,
}

impl Registry {
    pub fn new(prefix: impl Into<String>) -> Self {
        Registry {
            prefix: prefix.into(),
            entries: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: &str, tensor: Tensor, kind: Kind) -> Result<Var> {
        Ok(self.adopt(name, Var::from_tensor(&tensor)?, kind))
    }

    pub(crate) fn adopt(&mut self, name: &str, var: Var, kind: Kind) -> Var {
        self.entries.push(Entry {
            name: format!("{}.{}", self.prefix, name),
            var: var.clone(),
            kind,
        });
        var
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.filter(Kind::Trainable)
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.filter(Kind::Buffer)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    fn filter(&self, kind: Kind) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| (e.name.clone(), e.var.clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == Kind::Trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }
}

/// Seeded source of initial weights.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub device: Device,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            rng,
            device: Device::Cpu,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                (z * std) as f32
            })
            .collect();
        Ok(Tensor::from_vec(values, shape, &self.device)?)
    }

    pub fn uniform_unit(&mut self, n: usize) -> Result<Tensor> {
        let values: Vec<f32> = (0..n).map(|_| self.rng.random_range(-1.0f32..1.0)).collect();
        Ok(Tensor::from_vec(values, n, &self.device)?)
    }

    pub fn constant(&self, shape: &[usize], value: f32) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &self.device)?)
    }
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    sn: Option<SpectralNorm>,
}

impl Conv2d {
    /// Xavier-uniform weights scaled by `gain`, zero bias.
    pub fn new(
        reg: &mut Registry,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        Self::build(reg, init, name, (in_channels, out_channels, kernel), gain, true)
    }

    /// As [`Conv2d::new`] without a bias, for layers feeding a batch norm
    /// (which would cancel it).
    pub fn unbiased(
        reg: &mut Registry,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        Self::build(reg, init, name, (in_channels, out_channels, kernel), gain, false)
    }

    fn build(
        reg: &mut Registry,
        init: &mut Init,
        name: &str,
        (in_channels, out_channels, kernel): (usize, usize, usize),
        gain: f64,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let fan_out = (out_channels * kernel * kernel) as f64;
        let bound = gain * (6.0 / (fan_in + fan_out)).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let w = (init.uniform_unit(n)? * bound)?.reshape((out_channels, in_channels, kernel, kernel))?;
        let weight = reg.add(&format!("{name}.weight"), w, Kind::Trainable)?;
        let bias = if bias {
            Some(reg.add(&format!("{name}.bias"), init.constant(&[out_channels], 0.0)?, Kind::Trainable)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, sn: None })
    }

    pub fn spectral(mut self, reg: &mut Registry, init: &mut Init, name: &str) -> Result<Self> {
        self.sn = Some(SpectralNorm::new(reg, init, name, &self.weight)?);
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = match &self.sn {
            Some(sn) => sn.normalize(&self.weight, mode)?,
            None => self.weight.as_tensor().clone(),
        };
        let y = conv2d_same(x, &w)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
    sn: Option<SpectralNorm>,
}

impl Linear {
    pub fn new(
        reg: &mut Registry,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (init.uniform_unit(in_dim * out_dim)? * bound)?.reshape((out_dim, in_dim))?;
        let weight = reg.add(&format!("{name}.weight"), w, Kind::Trainable)?;
        let bias = if bias {
            Some(reg.add(&format!("{name}.bias"), init.constant(&[out_dim], 0.0)?, Kind::Trainable)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            sn: None,
        })
    }

    pub fn spectral(mut self, reg: &mut Registry, init: &mut Init, name: &str) -> Result<Self> {
        self.sn = Some(SpectralNorm::new(reg, init, name, &self.weight)?);
        Ok(self)
    }

    pub fn weight(&self, mode: Mode) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(&self.weight, mode),
            None => Ok(self.weight.as_tensor().clone()),
        }
    }

    /// `x: (n, in)` to `(n, out)`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = x.matmul(&self.weight(mode)?.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }

    pub fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }
}

/// Power-iteration spectral normalisation of a weight viewed as an
/// `(out, rest)` matrix. The left singular vector estimate persists
/// across steps as a buffer.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    u: Var,
}

const SN_WARM_START_ITERS: usize = 20;
const SN_EPS: f64 = 1e-12;

fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.sqr()?.sum_all()?.sqrt()?;
    Ok(v.broadcast_div(&(norm + SN_EPS)?)?)
}

impl SpectralNorm {
    fn new(reg: &mut Registry, init: &mut Init, name: &str, weight: &Var) -> Result<Self> {
        let out = weight.dim(0)?;
        let wm = weight.as_tensor().flatten_from(1)?;
        let mut u = l2_normalize(&init.normal(&[out], 1.0)?)?;
        for _ in 0..SN_WARM_START_ITERS {
            let v = l2_normalize(&wm.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
            u = l2_normalize(&wm.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        }
        let u = reg.add(&format!("{name}.sn_u"), u, Kind::Buffer)?;
        Ok(SpectralNorm { u })
    }

    /// Current estimate of the top singular value (no gradient).
    pub fn sigma_estimate(&self, weight: &Tensor) -> Result<f32> {
        let wm = weight.detach().flatten_from(1)?;
        let u = self.u.as_tensor().unsqueeze(1)?;
        let v = l2_normalize(&wm.t()?.matmul(&u)?)?;
        Ok(u.t()?.matmul(&wm.matmul(&v)?)?.flatten_all()?.to_vec1::<f32>()?[0])
    }

    fn normalize(&self, weight: &Var, mode: Mode) -> Result<Tensor> {
        let shape = weight.shape().clone();
        let wm = weight.as_tensor().flatten_from(1)?;
        let detached = wm.detach();
        let mut u = self.u.as_tensor().unsqueeze(1)?;
        let mut v = l2_normalize(&detached.t()?.matmul(&u)?)?;
        if mode == Mode::Train {
            u = l2_normalize(&detached.matmul(&v)?)?;
            v = l2_normalize(&detached.t()?.matmul(&u)?)?;
            self.u.set(&u.squeeze(1)?)?;
        }
        let sigma = u.t()?.matmul(&wm.matmul(&v)?)?.reshape(())?;
        Ok(wm.broadcast_div(&sigma)?.reshape(shape)?)
    }
}

/// Numerical floor inside the square root so a constant channel keeps a
/// finite gradient; the documented stabiliser is the additive `eps`.
const VAR_FLOOR: f64 = 1e-12;

/// Per-channel statistics of `(b, c, h, w)` over batch and spatial axes,
/// returned as `(1, c, 1, 1)` mean and standard deviation.
pub fn channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = x.dims4()?;
    let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    let std = (var + VAR_FLOOR)?.sqrt()?;
    Ok((mean.reshape((1, c, 1, 1))?, std.reshape((1, c, 1, 1))?))
}

/// Running mean/std buffers of a normalisation layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Var,
    pub std: Var,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(reg: &mut Registry, init: &Init, name: &str, channels: usize) -> Result<Self> {
        Ok(RunningStats {
            mean: reg.add(&format!("{name}.running_mean"), init.constant(&[channels], 0.0)?, Kind::Buffer)?,
            std: reg.add(&format!("{name}.running_std"), init.constant(&[channels], 1.0)?, Kind::Buffer)?,
            momentum: 0.1,
        })
    }

    /// `(x - mu) / (sigma + eps)` with batch statistics in training mode
    /// (updating the running values) and running statistics otherwise.
    pub fn standardize(&self, x: &Tensor, mode: Mode, eps: f64) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, std) = match mode {
            Mode::Train => {
                let (mean, std) = channel_stats(x)?;
                let m = self.momentum;
                let new_mean = ((self.mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let new_std = ((self.std.as_tensor() * (1.0 - m))? + (std.detach().flatten_all()? * m)?)?;
                self.mean.set(&new_mean)?;
                self.std.set(&new_std)?;
                (mean, std)
            }
            Mode::Eval => (
                self.mean.as_tensor().reshape((1, c, 1, 1))?,
                self.std.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&(std + eps)?)?)
    }
}

/// Plain batch normalisation with a learned per-channel affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    stats: RunningStats,
    eps: f64,
}

impl BatchNorm {
    pub fn new(reg: &mut Registry, init: &Init, name: &str, channels: usize, eps: f64) -> Result<Self> {
        Ok(BatchNorm {
            gamma: reg.add(&format!("{name}.gamma"), init.constant(&[channels], 1.0)?, Kind::Trainable)?,
            beta: reg.add(&format!("{name}.beta"), init.constant(&[channels], 0.0)?, Kind::Trainable)?,
            stats: RunningStats::new(reg, init, name, channels)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let y = self.stats.standardize(x, mode, self.eps)?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Nearest-neighbour x2 upsampling of `(b, c, h, w)`.
pub fn unpool2(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(resample::Unpool2)?)
}

/// 2x2 average pooling of `(b, c, h, w)` with even `h`, `w`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    Ok(x.contiguous()?.apply_op1(resample::SumPool2)?.affine(0.25, 0.0)?)
}

/// Squared L2 norm of a gradient tensor as `f64`.
pub fn grad_norm_sq(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?)
}
