//! Run configuration file (TOML). Unknown keys are rejected and
//! validation reports every violation at once.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::spectral::Resolution;
use crate::synthesis::{NormMode, SynthesisGeneratorConfig};
use crate::transfer::TransferGeneratorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtfMode {
    /// Features extracted from the transfer generator.
    Full,
    /// Same shapes, all zeros.
    Zero,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest path, relative to the config file. Without one the
    /// synthetic two-class corpus is generated in memory.
    pub manifest: Option<PathBuf>,
    pub hq_classes: Vec<String>,
    pub lq_classes: Vec<String>,
    /// Images per class of the synthetic corpus.
    pub toy_per_class: usize,
    /// Fraction of HQ images held out for the phase-switch monitor.
    pub holdout_fraction: f64,
    /// Seeds the synthetic corpus, the holdout split and the metric
    /// classifier, independently of the run seed.
    pub seed: u64,
}

fn default_hq_names() -> Vec<String> {
    crate::toy::HQ_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn default_lq_names() -> Vec<String> {
    crate::toy::LQ_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn default_toy_per_class() -> usize {
    256
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            hq_classes: default_hq_names(),
            lq_classes: default_lq_names(),
            toy_per_class: default_toy_per_class(),
            holdout_fraction: default_holdout(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hq_size: usize,
    pub lq_size: usize,
    pub glh_stem_channels: usize,
    /// One entry per block; the length is `M`.
    pub glh_block_channels: Vec<usize>,
    pub glh_noise_dim: usize,
    pub embed_dim: usize,
    pub ga_noise_dim: usize,
    pub ga_base_channels: usize,
    pub ga_block_channels: Vec<usize>,
    pub d_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hq_size: 32,
            lq_size: 8,
            glh_stem_channels: 16,
            glh_block_channels: vec![16, 8],
            glh_noise_dim: 8,
            embed_dim: 16,
            ga_noise_dim: 32,
            ga_base_channels: 16,
            ga_block_channels: vec![16, 8],
            d_channels: vec![16, 16, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: [f64; 2],
    pub batch_size: usize,
    pub d_steps_per_g_step: usize,
    pub lambda_sp: f64,
    /// Phase-1 monitor evaluations without a significant improvement
    /// before switching.
    pub patience: usize,
    /// Relative improvement that counts as significant.
    pub improvement_threshold: f64,
    /// Phase-1 monitor cadence in generator steps; 0 disables it.
    pub monitor_every: u64,
    pub monitor_samples: usize,
    pub max_steps_phase1: u64,
    pub max_steps_phase2: u64,
    /// Checkpoint cadence in generator steps; 0 writes only the initial,
    /// phase-boundary and final checkpoints.
    pub checkpoint_every: u64,
    pub freeze_glh: bool,
    pub ga_norm: NormMode,
    pub ctf_mode: CtfMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 2e-4,
            lr_d: 2e-4,
            betas: [0.0, 0.9],
            batch_size: 16,
            d_steps_per_g_step: 5,
            lambda_sp: 1.0,
            patience: 5,
            improvement_threshold: 0.01,
            monitor_every: 100,
            monitor_samples: 256,
            max_steps_phase1: 2000,
            max_steps_phase2: 2000,
            checkpoint_every: 500,
            freeze_glh: true,
            ga_norm: NormMode::Bn,
            ctf_mode: CtfMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: 1e-8,
        }
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            ..self.adam_g()
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub splits: usize,
    pub classifier_width: usize,
    pub classifier_steps: usize,
    pub classifier_target_accuracy: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 5000,
            splits: 10,
            classifier_width: 16,
            classifier_steps: 2000,
            classifier_target_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(base.join(m));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated constraint, by field path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let t = &self.train;
        need(t.lr_g >= 0.0 && t.lr_g.is_finite(), format!("train.lr_g must be >= 0 (got {})", t.lr_g));
        need(t.lr_d >= 0.0 && t.lr_d.is_finite(), format!("train.lr_d must be >= 0 (got {})", t.lr_d));
        for (i, b) in t.betas.iter().enumerate() {
            need((0.0..1.0).contains(b), format!("train.betas[{i}] must be in [0, 1) (got {b})"));
        }
        need(
            t.batch_size >= 2 && t.batch_size % 2 == 0,
            format!("train.batch_size must be even and >= 2 (got {})", t.batch_size),
        );
        need(t.d_steps_per_g_step >= 1, "train.d_steps_per_g_step must be >= 1".into());
        need(t.lambda_sp >= 0.0 && t.lambda_sp.is_finite(), format!("train.lambda_sp must be >= 0 (got {})", t.lambda_sp));
        need(t.patience >= 1, "train.patience must be >= 1".into());
        need(
            t.improvement_threshold >= 0.0 && t.improvement_threshold < 1.0,
            format!("train.improvement_threshold must be in [0, 1) (got {})", t.improvement_threshold),
        );
        need(t.monitor_samples >= 2, "train.monitor_samples must be >= 2".into());

        let m = &self.model;
        let blocks = m.glh_block_channels.len();
        need(blocks >= 1, "model.glh_block_channels must name at least one block".into());
        need(
            m.ga_block_channels.len() == blocks,
            format!(
                "model.ga_block_channels has {} entries but model.glh_block_channels has {blocks}",
                m.ga_block_channels.len()
            ),
        );
        need(m.lq_size >= 1, "model.lq_size must be >= 1".into());
        need(
            blocks < 16 && m.lq_size << blocks == m.hq_size,
            format!("model.hq_size ({}) must equal model.lq_size ({}) * 2^{blocks}", m.hq_size, m.lq_size),
        );
        let d_blocks = m.d_channels.len();
        need(d_blocks >= 1, "model.d_channels must name at least one block".into());
        need(
            d_blocks < 16 && m.hq_size % (1 << d_blocks.saturating_sub(1).min(15)) == 0,
            format!("model.hq_size ({}) must be divisible by 2^{}", m.hq_size, d_blocks.saturating_sub(1)),
        );
        for (name, val) in [
            ("model.glh_stem_channels", m.glh_stem_channels),
            ("model.glh_noise_dim", m.glh_noise_dim),
            ("model.embed_dim", m.embed_dim),
            ("model.ga_noise_dim", m.ga_noise_dim),
            ("model.ga_base_channels", m.ga_base_channels),
        ] {
            need(val >= 1, format!("{name} must be >= 1"));
        }
        for (name, list) in [
            ("model.glh_block_channels", &m.glh_block_channels),
            ("model.ga_block_channels", &m.ga_block_channels),
            ("model.d_channels", &m.d_channels),
        ] {
            need(list.iter().all(|&c| c >= 1), format!("{name} entries must be >= 1"));
        }

        let d = &self.data;
        need(!d.hq_classes.is_empty(), "data.hq_classes must not be empty".into());
        need(!d.lq_classes.is_empty(), "data.lq_classes must not be empty".into());
        need(
            (0.0..1.0).contains(&d.holdout_fraction),
            format!("data.holdout_fraction must be in [0, 1) (got {})", d.holdout_fraction),
        );
        if d.manifest.is_none() {
            need(
                d.hq_classes == default_hq_names() && d.lq_classes == default_lq_names(),
                "data.hq_classes/lq_classes must be the synthetic classes when no manifest is given".into(),
            );
            need(d.toy_per_class >= 1, "data.toy_per_class must be >= 1".into());
        }

        let e = &self.eval;
        need(e.splits >= 1, "eval.splits must be >= 1".into());
        need(e.samples >= e.splits, format!("eval.samples ({}) must be >= eval.splits ({})", e.samples, e.splits));
        need(e.classifier_width >= 1, "eval.classifier_width must be >= 1".into());
        need(
            (0.0..=1.0).contains(&e.classifier_target_accuracy),
            "eval.classifier_target_accuracy must be in [0, 1]".into(),
        );
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn blocks(&self) -> usize {
        self.model.glh_block_channels.len()
    }

    pub fn hq_classes(&self) -> usize {
        self.data.hq_classes.len()
    }

    pub fn lq_classes(&self) -> usize {
        self.data.lq_classes.len()
    }

    pub fn transfer_config(&self) -> TransferGeneratorConfig {
        TransferGeneratorConfig {
            lq_resolution: Resolution::square(self.model.lq_size),
            stem_channels: self.model.glh_stem_channels,
            block_channels: self.model.glh_block_channels.clone(),
            noise_dim: self.model.glh_noise_dim,
            hq_classes: self.hq_classes(),
            lq_classes: self.lq_classes(),
        }
    }

    pub fn synthesis_config(&self) -> SynthesisGeneratorConfig {
        SynthesisGeneratorConfig {
            noise_dim: self.model.ga_noise_dim,
            base_resolution: Resolution::square(self.model.lq_size),
            base_channels: self.model.ga_base_channels,
            block_channels: self.model.ga_block_channels.clone(),
            ctf_channels: self
                .model
                .glh_block_channels
                .iter()
                .map(|t| t + self.model.embed_dim)
                .collect(),
            norm: self.train.ga_norm,
            hq_classes: self.hq_classes(),
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: Resolution::square(self.model.hq_size),
            channels: self.model.d_channels.clone(),
            hq_classes: self.hq_classes(),
        }
    }

    /// Hash of the canonical JSON form, recorded in checkpoints.
    /// Hash of everything that affects the run's trajectory. The output
    /// directory is excluded so a copied run directory still resumes.
    pub fn hash(&self) -> String {
        let mut trajectory = self.clone();
        trajectory.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&trajectory).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash of everything that shapes the networks' parameters.
    pub fn architecture_hash(&self) -> String {
        let json = serde_json::to_vec(&(
            &self.model,
            self.train.ga_norm,
            &self.data.hq_classes,
            &self.data.lq_classes,
        ))
        .expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3\noutput_dir = \"out\"\n";

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.lr_g, 2e-4);
        assert_eq!(cfg.train.betas, [0.0, 0.9]);
        assert!(cfg.train.freeze_glh);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\n[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn every_violation_is_listed() {
        let text = format!("{MINIMAL}[train]\nlr_g = -1.0\nbatch_size = 7\npatience = 0\n");
        let Err(Error::Config(v)) = RunConfig::from_toml(&text) else {
            panic!("expected a config error");
        };
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v[0].contains("train.lr_g"));
    }

    #[test]
    fn resolution_chain_is_checked() {
        let text = format!("{MINIMAL}[model]\nhq_size = 32\nlq_size = 4\nglh_stem_channels = 4\nglh_block_channels = [4, 4]\nglh_noise_dim = 2\nembed_dim = 2\nga_noise_dim = 4\nga_base_channels = 4\nga_block_channels = [4]\nd_channels = [4]\n");
        let Err(Error::Config(v)) = RunConfig::from_toml(&text) else {
            panic!("expected a config error");
        };
        assert_eq!(v.len(), 2, "{v:?}");
    }
}
