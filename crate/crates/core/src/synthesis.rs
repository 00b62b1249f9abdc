//! The synthesis generator: noise plus one conditional transferring
//! feature per resolution in, high-quality image out.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::cbn::{ConditionalBatchNorm, LayerId, CBN_EPS};
use crate::ctf::CtfTensor;
use crate::error::{contract, Result};
use crate::nn::{gaussian, unpool2, BatchNorm, Conv2d, Init, Linear, Mode, Registry};
use crate::spectral::Resolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Bn,
    Cbn,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthesisGeneratorConfig {
    pub noise_dim: usize,
    /// Resolution of the first feature map, before any block.
    pub base_resolution: Resolution,
    pub base_channels: usize,
    pub block_channels: Vec<usize>,
    /// Expected channel count of `CTF_m` for each block.
    pub ctf_channels: Vec<usize>,
    pub norm: NormMode,
    pub hq_classes: usize,
}

impl SynthesisGeneratorConfig {
    pub fn block_output_resolution(&self, m: usize) -> Resolution {
        let f = 1 << (m + 1);
        Resolution::new(self.base_resolution.height * f, self.base_resolution.width * f)
    }

    pub fn hq_resolution(&self) -> Resolution {
        self.block_output_resolution(self.block_channels.len() - 1)
    }
}

#[derive(Debug, Clone)]
enum Norm {
    Plain(BatchNorm),
    Conditional(ConditionalBatchNorm),
}

impl Norm {
    fn new(reg: &mut Registry, init: &Init, name: &str, cfg: &SynthesisGeneratorConfig, channels: usize, layer: LayerId) -> Result<Self> {
        Ok(match cfg.norm {
            NormMode::Bn => Norm::Plain(BatchNorm::new(reg, init, name, channels, CBN_EPS)?),
            NormMode::Cbn => Norm::Conditional(ConditionalBatchNorm::new(reg, init, name, cfg.hq_classes, channels, layer)?),
        })
    }

    fn forward(&self, x: &Tensor, classes: &[usize], mode: Mode) -> Result<Tensor> {
        match self {
            Norm::Plain(bn) => bn.forward(x, mode),
            Norm::Conditional(cbn) => cbn.forward(x, classes, mode),
        }
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    norm1: Norm,
    conv1: Conv2d,
    norm2: Norm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl UpBlock {
    fn forward(&self, x: &Tensor, classes: &[usize], mode: Mode) -> Result<Tensor> {
        let y = self.norm1.forward(x, classes, mode)?.relu()?;
        let y = self.conv1.forward(&unpool2(&y)?, mode)?;
        let y = self.norm2.forward(&y, classes, mode)?.relu()?;
        let y = self.conv2.forward(&y, mode)?;
        let mut skip = unpool2(x)?;
        if let Some(proj) = &self.shortcut {
            skip = proj.forward(&skip, mode)?;
        }
        Ok((y + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisGenerator {
    pub config: SynthesisGeneratorConfig,
    fc: Linear,
    blocks: Vec<UpBlock>,
    fusion: Vec<Conv2d>,
    head_norm: Norm,
    head: Conv2d,
    pub registry: Registry,
}

impl SynthesisGenerator {
    pub fn new(init: &mut Init, config: SynthesisGeneratorConfig) -> Result<Self> {
        let m = config.block_channels.len();
        if m == 0 || config.ctf_channels.len() != m {
            return Err(contract("synthesis generator needs one feature width per block"));
        }
        let mut reg = Registry::new("ga");
        let gain = 2f64.sqrt();
        let base = config.base_resolution;
        let fc = Linear::new(&mut reg, init, "fc", config.noise_dim, config.base_channels * base.area(), true)?;
        let mut blocks = Vec::with_capacity(m);
        let mut fusion = Vec::with_capacity(m);
        let mut in_ch = config.base_channels;
        for (i, (&out_ch, &ctf_ch)) in config.block_channels.iter().zip(&config.ctf_channels).enumerate() {
            let p = format!("block{}", i + 1);
            blocks.push(UpBlock {
                norm1: Norm::new(&mut reg, init, &format!("{p}.norm1"), &config, in_ch, LayerId { block: i + 1, position: 1 })?,
                conv1: Conv2d::unbiased(&mut reg, init, &format!("{p}.conv1"), in_ch, out_ch, 3, gain)?,
                norm2: Norm::new(&mut reg, init, &format!("{p}.norm2"), &config, out_ch, LayerId { block: i + 1, position: 2 })?,
                conv2: Conv2d::new(&mut reg, init, &format!("{p}.conv2"), out_ch, out_ch, 3, gain)?,
                shortcut: if in_ch != out_ch {
                    Some(Conv2d::new(&mut reg, init, &format!("{p}.shortcut"), in_ch, out_ch, 1, 1.0)?)
                } else {
                    None
                },
            });
            // the last fusion output only feeds the head norm
            let fuse = if i + 1 == m { Conv2d::unbiased } else { Conv2d::new };
            fusion.push(fuse(&mut reg, init, &format!("fusion{}", i + 1), out_ch + ctf_ch, out_ch, 3, 1.0)?);
            in_ch = out_ch;
        }
        let head_norm = Norm::new(&mut reg, init, "head_norm", &config, in_ch, LayerId { block: m + 1, position: 1 })?;
        let head = Conv2d::new(&mut reg, init, "head", in_ch, 3, 3, 1.0)?;
        Ok(SynthesisGenerator {
            config,
            fc,
            blocks,
            fusion,
            head_norm,
            head,
            registry: reg,
        })
    }

    pub fn sample_noise(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<Tensor> {
        gaussian(rng, &[batch, self.config.noise_dim], &candle_core::Device::Cpu)
    }

    fn check_ctfs(&self, ctfs: &[CtfTensor], batch: usize) -> Result<()> {
        if ctfs.len() != self.blocks.len() {
            return Err(contract(format!(
                "{} conditional features for {} blocks",
                ctfs.len(),
                self.blocks.len()
            )));
        }
        for (m, ctf) in ctfs.iter().enumerate() {
            let (b, c, h, w) = ctf.tensor.dims4()?;
            let want = self.config.block_output_resolution(m);
            if b != batch || c != self.config.ctf_channels[m] || Resolution::new(h, w) != want {
                return Err(contract(format!(
                    "feature {} is {:?}, expected ({batch}, {}, {want})",
                    m + 1,
                    ctf.tensor.dims(),
                    self.config.ctf_channels[m]
                )));
            }
        }
        Ok(())
    }

    /// `noise: (b, noise_dim)` to a `(b, 3, H, W)` image in `[-1, 1]`.
    pub fn forward(&self, noise: &Tensor, ctfs: &[CtfTensor], classes: &[usize], mode: Mode) -> Result<Tensor> {
        let (b, d) = noise.dims2()?;
        if d != self.config.noise_dim || classes.len() != b {
            return Err(contract("noise or class batch does not match the generator"));
        }
        if let Some(&label) = classes.iter().find(|&&c| c >= self.config.hq_classes) {
            return Err(crate::Error::LabelDomain {
                label,
                size: self.config.hq_classes,
                space: "high-quality",
            });
        }
        self.check_ctfs(ctfs, b)?;
        let base = self.config.base_resolution;
        let mut x = self
            .fc
            .forward(noise, mode)?
            .reshape((b, self.config.base_channels, base.height, base.width))?;
        for ((block, fuse), ctf) in self.blocks.iter().zip(&self.fusion).zip(ctfs) {
            let y = block.forward(&x, classes, mode)?;
            x = fuse.forward(&Tensor::cat(&[&y, &ctf.tensor], 1)?, mode)?;
        }
        let x = self.head_norm.forward(&x, classes, mode)?.relu()?;
        Ok(self.head.forward(&x, mode)?.tanh()?)
    }
}
