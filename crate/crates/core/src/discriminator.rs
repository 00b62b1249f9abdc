//! Shared discriminator with a class-projection adversarial head and a
//! bounding-box regression head, plus the hinge losses.

use candle_core::{Tensor, Var, D};

use crate::error::{contract, Result};
use crate::nn::{avg_pool2, Conv2d, Init, Linear, Mode, Registry, SpectralNorm};
use crate::spectral::Resolution;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: Resolution,
    /// Width of each residual block; every block but the last halves the
    /// resolution.
    pub channels: Vec<usize>,
    pub hq_classes: usize,
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    downsample: bool,
    first: bool,
}

impl DownBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let pre = if self.first { x.clone() } else { x.relu()? };
        let mut y = self.conv2.forward(&self.conv1.forward(&pre, mode)?.relu()?, mode)?;
        if self.downsample {
            y = avg_pool2(&y)?;
        }
        let skip = match (&self.shortcut, self.first) {
            // pool before projecting on the raw image
            (Some(proj), true) => proj.forward(&avg_pool2(x)?, mode)?,
            (Some(proj), false) => {
                let s = proj.forward(x, mode)?;
                if self.downsample {
                    avg_pool2(&s)?
                } else {
                    s
                }
            }
            (None, _) => {
                if self.downsample {
                    avg_pool2(x)?
                } else {
                    x.clone()
                }
            }
        };
        Ok((y + skip)?)
    }
}

/// Per-image outputs. `adv_score = linear_term + projection_term`.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub adv_score: Tensor,
    pub linear_term: Tensor,
    pub projection_term: Tensor,
    /// `(b, 4)` normalised `(x1, y1, x2, y2)` in `[0, 1]`.
    pub bbox_pred: Tensor,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    blocks: Vec<DownBlock>,
    adv_head: Linear,
    class_embed: Linear,
    sp_head: Linear,
    pub registry: Registry,
}

impl Discriminator {
    pub fn new(init: &mut Init, config: DiscriminatorConfig) -> Result<Self> {
        if config.channels.is_empty() {
            return Err(contract("discriminator needs at least one block"));
        }
        let mut reg = Registry::new("dlh");
        let gain = 2f64.sqrt();
        let n = config.channels.len();
        let mut blocks = Vec::with_capacity(n);
        let mut in_ch = 3;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let p = format!("block{}", i + 1);
            let downsample = i + 1 < n;
            let conv1 = Conv2d::new(&mut reg, init, &format!("{p}.conv1"), in_ch, out_ch, 3, gain)?
                .spectral(&mut reg, init, &format!("{p}.conv1"))?;
            let conv2 = Conv2d::new(&mut reg, init, &format!("{p}.conv2"), out_ch, out_ch, 3, gain)?
                .spectral(&mut reg, init, &format!("{p}.conv2"))?;
            let shortcut = if in_ch != out_ch || downsample {
                Some(
                    Conv2d::new(&mut reg, init, &format!("{p}.shortcut"), in_ch, out_ch, 1, 1.0)?
                        .spectral(&mut reg, init, &format!("{p}.shortcut"))?,
                )
            } else {
                None
            };
            blocks.push(DownBlock {
                conv1,
                conv2,
                shortcut,
                downsample,
                first: i == 0,
            });
            in_ch = out_ch;
        }
        let adv_head = Linear::new(&mut reg, init, "adv_head", in_ch, 1, true)?.spectral(&mut reg, init, "adv_head")?;
        let class_embed = Linear::new(&mut reg, init, "class_embed", config.hq_classes, in_ch, false)?
            .spectral(&mut reg, init, "class_embed")?;
        let sp_head = Linear::new(&mut reg, init, "sp_head", in_ch, 4, true)?.spectral(&mut reg, init, "sp_head")?;
        Ok(Discriminator {
            config,
            blocks,
            adv_head,
            class_embed,
            sp_head,
            registry: reg,
        })
    }

    /// Sum-pooled trunk features `(b, f)`.
    pub fn features(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || Resolution::new(h, w) != self.config.resolution {
            return Err(contract(format!(
                "discriminator expects (b, 3, {}), got {:?}",
                self.config.resolution,
                images.dims()
            )));
        }
        let mut x = images.clone();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        Ok(x.relu()?.sum((2, 3))?)
    }

    pub fn forward(&self, images: &Tensor, classes: &[usize], mode: Mode) -> Result<DiscOutput> {
        let b = images.dim(0)?;
        if classes.len() != b {
            return Err(contract(format!("{} classes for {b} images", classes.len())));
        }
        if let Some(&label) = classes.iter().find(|&&c| c >= self.config.hq_classes) {
            return Err(crate::Error::LabelDomain {
                label,
                size: self.config.hq_classes,
                space: "high-quality",
            });
        }
        let feats = self.features(images, mode)?;
        let linear_term = self.adv_head.forward(&feats, mode)?.squeeze(1)?;
        // embedding weight is (f, classes); column c embeds class c
        let one_hot = crate::ctf::one_hot(classes, self.config.hq_classes)?;
        let class_vecs = self.class_embed.forward(&one_hot, mode)?;
        let projection_term = (class_vecs * &feats)?.sum(D::Minus1)?;
        let adv_score = (&linear_term + &projection_term)?;
        let bbox_pred = (self.sp_head.forward(&feats, mode)?.neg()?.exp()? + 1.0)?.recip()?;
        Ok(DiscOutput {
            adv_score,
            linear_term,
            projection_term,
            bbox_pred,
        })
    }

    /// Every spectrally normalised weight with its power-iteration state.
    pub fn spectral_layers(&self) -> Vec<(Var, SpectralNorm)> {
        let mut out = Vec::new();
        let mut push = |w: &Var, sn: Option<&SpectralNorm>| {
            if let Some(sn) = sn {
                out.push((w.clone(), sn.clone()));
            }
        };
        for b in &self.blocks {
            push(&b.conv1.weight, b.conv1.spectral_norm());
            push(&b.conv2.weight, b.conv2.spectral_norm());
            if let Some(s) = &b.shortcut {
                push(&s.weight, s.spectral_norm());
            }
        }
        push(&self.adv_head.weight, self.adv_head.spectral_norm());
        push(&self.class_embed.weight, self.class_embed.spectral_norm());
        push(&self.sp_head.weight, self.sp_head.spectral_norm());
        out
    }
}

fn check_scores(scores: &Tensor, what: &str) -> Result<()> {
    if scores.elem_count() == 0 {
        return Err(contract(format!("{what} scores are empty")));
    }
    Ok(())
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn adv_loss_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_scores(real_scores, "real")?;
    check_scores(fake_scores, "fake")?;
    let real = real_scores.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// `-mean(fake)`.
pub fn adv_loss_g(fake_scores: &Tensor) -> Result<Tensor> {
    check_scores(fake_scores, "fake")?;
    Ok(fake_scores.mean_all()?.neg()?)
}
