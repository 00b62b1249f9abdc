//! The transfer generator: low-quality image in, high-quality-like image
//! out, through `M` residual blocks that each double the resolution and
//! condition on a high-quality class.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::cbn::{ConditionalBatchNorm, LayerId};
use crate::ctf::GlhTrace;
use crate::error::{contract, Result};
use crate::nn::{gaussian, unpool2, Conv2d, Init, Linear, Mode, Registry};
use crate::spectral::{tensor as spectral, Resolution};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransferGeneratorConfig {
    pub lq_resolution: Resolution,
    pub stem_channels: usize,
    /// Output width `t_m` of each block; its length is `M`.
    pub block_channels: Vec<usize>,
    pub noise_dim: usize,
    pub hq_classes: usize,
    pub lq_classes: usize,
}

impl TransferGeneratorConfig {
    pub fn blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn block_input_resolution(&self, m: usize) -> Resolution {
        let f = 1 << m;
        Resolution::new(self.lq_resolution.height * f, self.lq_resolution.width * f)
    }

    pub fn hq_resolution(&self) -> Resolution {
        self.block_input_resolution(self.blocks())
    }
}

/// One residual block: noise map concatenated to the input, then
/// CBN, ReLU, conv, CBN, ReLU, x2 unpool, conv, plus an upscaled shortcut.
#[derive(Debug, Clone)]
pub struct ResUnpoolBlock {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub noise_dim: usize,
    input_resolution: Resolution,
    noise_embed: Linear,
    pub cbn1: ConditionalBatchNorm,
    conv1: Conv2d,
    pub cbn2: ConditionalBatchNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResUnpoolBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        init: &mut Init,
        index: usize,
        in_channels: usize,
        out_channels: usize,
        noise_dim: usize,
        input_resolution: Resolution,
        classes: usize,
    ) -> Result<Self> {
        let p = format!("block{index}");
        let gain = 2f64.sqrt();
        let noise_embed = Linear::new(reg, init, &format!("{p}.noise_embed"), noise_dim, input_resolution.area(), true)?;
        let cbn1 = ConditionalBatchNorm::new(reg, init, &format!("{p}.cbn1"), classes, in_channels + 1, LayerId { block: index, position: 1 })?;
        let conv1 = Conv2d::unbiased(reg, init, &format!("{p}.conv1"), in_channels + 1, out_channels, 3, gain)?;
        let cbn2 = ConditionalBatchNorm::new(reg, init, &format!("{p}.cbn2"), classes, out_channels, LayerId { block: index, position: 2 })?;
        let conv2 = Conv2d::new(reg, init, &format!("{p}.conv2"), out_channels, out_channels, 3, gain)?;
        let shortcut = if in_channels != out_channels {
            Some(Conv2d::new(reg, init, &format!("{p}.shortcut"), in_channels, out_channels, 1, 1.0)?)
        } else {
            None
        };
        Ok(ResUnpoolBlock {
            index,
            in_channels,
            out_channels,
            noise_dim,
            input_resolution,
            noise_embed,
            cbn1,
            conv1,
            cbn2,
            conv2,
            shortcut,
        })
    }

    pub fn output_resolution(&self) -> Resolution {
        Resolution::new(self.input_resolution.height * 2, self.input_resolution.width * 2)
    }

    /// `x: (b, s, h, w)`, `noise: (b, noise_dim)` to `F_m: (b, t, 2h, 2w)`.
    pub fn forward(&self, x: &Tensor, noise: &Tensor, classes: &[usize], mode: Mode) -> Result<Tensor> {
        let (b, s, h, w) = x.dims4()?;
        let res = Resolution::new(h, w);
        if s != self.in_channels || res != self.input_resolution {
            return Err(contract(format!(
                "block {} expects {} channels at {}, got {s} at {res}",
                self.index, self.in_channels, self.input_resolution
            )));
        }
        if noise.dims() != [b, self.noise_dim] {
            return Err(contract(format!(
                "block {} noise must be ({b}, {}), got {:?}",
                self.index,
                self.noise_dim,
                noise.dims()
            )));
        }
        let noise_map = self.noise_embed.forward(noise, mode)?.reshape((b, 1, h, w))?;
        let y = Tensor::cat(&[x, &noise_map], 1)?;
        let y = self.cbn1.forward(&y, classes, mode)?.relu()?;
        let y = self.conv1.forward(&y, mode)?;
        let y = self.cbn2.forward(&y, classes, mode)?.relu()?;
        let y = self.conv2.forward(&unpool2(&y)?, mode)?;
        let mut skip = spectral::bilinear_upscale(x, self.output_resolution())?;
        if let Some(proj) = &self.shortcut {
            skip = proj.forward(&skip, mode)?;
        }
        Ok((y + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransferGenerator {
    pub config: TransferGeneratorConfig,
    stem: Conv2d,
    pub blocks: Vec<ResUnpoolBlock>,
    head: Conv2d,
    pub registry: Registry,
}

impl TransferGenerator {
    pub fn new(init: &mut Init, config: TransferGeneratorConfig) -> Result<Self> {
        if config.blocks() == 0 {
            return Err(contract("transfer generator needs at least one block"));
        }
        let mut reg = Registry::new("glh");
        let stem = Conv2d::new(&mut reg, init, "stem", 3, config.stem_channels, 3, 1.0)?;
        let mut blocks = Vec::with_capacity(config.blocks());
        let mut in_ch = config.stem_channels;
        for (m, &out_ch) in config.block_channels.iter().enumerate() {
            blocks.push(ResUnpoolBlock::new(
                &mut reg,
                init,
                m + 1,
                in_ch,
                out_ch,
                config.noise_dim,
                config.block_input_resolution(m),
                config.hq_classes,
            )?);
            in_ch = out_ch;
        }
        let head = Conv2d::new(&mut reg, init, "head", in_ch, 3, 3, 1.0)?;
        Ok(TransferGenerator {
            config,
            stem,
            blocks,
            head,
            registry: reg,
        })
    }

    /// One `(b, noise_dim)` standard-normal draw per block.
    pub fn sample_noises(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<Vec<Tensor>> {
        let dev = candle_core::Device::Cpu;
        (0..self.blocks.len())
            .map(|_| gaussian(rng, &[batch, self.config.noise_dim], &dev))
            .collect()
    }

    /// Translates `(b, 3, h0, w0)` low-quality images conditioned on
    /// high-quality classes; returns the `[-1, 1]` image and the trace.
    pub fn forward(
        &self,
        low_quality: &Tensor,
        lq_labels: &[usize],
        classes: &[usize],
        noises: &[Tensor],
        mode: Mode,
    ) -> Result<(Tensor, GlhTrace)> {
        let (b, c, h, w) = low_quality.dims4()?;
        if c != 3 || Resolution::new(h, w) != self.config.lq_resolution {
            return Err(contract(format!(
                "transfer generator expects (b, 3, {}), got {:?}",
                self.config.lq_resolution,
                low_quality.dims()
            )));
        }
        if lq_labels.len() != b || classes.len() != b || noises.len() != self.blocks.len() {
            return Err(contract("label, class or noise count does not match the batch"));
        }
        if let Some(&label) = lq_labels.iter().find(|&&l| l >= self.config.lq_classes) {
            return Err(crate::Error::LabelDomain {
                label,
                size: self.config.lq_classes,
                space: "low-quality",
            });
        }
        let mut x = self.stem.forward(low_quality, mode)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for (block, noise) in self.blocks.iter().zip(noises) {
            x = block.forward(&x, noise, classes, mode)?;
            features.push(x.clone());
        }
        let image = self.head.forward(&x.relu()?, mode)?.tanh()?;
        let trace = GlhTrace {
            features,
            cbn2: self.blocks.iter().map(|b| b.cbn2.params.clone()).collect(),
            classes: classes.to_vec(),
            lq_labels: lq_labels.to_vec(),
            lq_classes: self.config.lq_classes,
        };
        Ok((image, trace))
    }
}
