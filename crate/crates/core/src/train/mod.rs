//! Two-phase adversarial training. Phase 1 trains the transfer generator
//! against the shared discriminator; phase 2 trains the synthesis
//! generator on features extracted from the (by default frozen) transfer
//! generator. A step is one generator update preceded by
//! `d_steps_per_g_step` discriminator updates.

pub mod checkpoint;
pub mod metrics;
pub mod switch;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CtfMode, RunConfig};
use crate::ctf::{extract_all_ctfs, zero_ctfs, CtfEmbedder, CtfTensor, GlhTrace};
use crate::data::{load_corpus, Corpus, Dataset, Image, LabelSpaces, MixedBatchSampler, QualityTieredBatch};
use crate::discriminator::{adv_loss_d, adv_loss_g, Discriminator};
use crate::error::{contract, Error, Result};
use crate::eval::{self, ClassifierTraining, EvalReport, SurrogateClassifier};
use crate::nn::{Adam, Init, Mode, Registry};
use crate::selfsup::{paste_random_patch, sp_loss_tensor, PatchAnnotation, PatchSizeRange};
use crate::spectral::Resolution;
use crate::synthesis::SynthesisGenerator;
use crate::transfer::TransferGenerator;

pub use checkpoint::Manifest;
pub use metrics::{read_records, LossRecord, MetricsSink, Record};
pub use switch::{phase_switch_criterion, SwitchMonitor};

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const GEN_CHUNK: usize = 64;

/// Independent ChaCha stream `id` of `seed`.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training, held-out and low-quality sets with their label spaces.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labels: LabelSpaces,
    pub hq: Dataset,
    pub hq_holdout: Dataset,
    pub lq: Dataset,
}

impl TrainData {
    /// Loads the manifest named in the config, or synthesises the toy
    /// corpus, and checks it against the model dimensions.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let hq_res = Resolution::square(config.model.hq_size);
        let lq_res = Resolution::square(config.model.lq_size);
        let corpus = match &config.data.manifest {
            Some(path) => {
                let labels = LabelSpaces::new(config.data.hq_classes.clone(), config.data.lq_classes.clone())?;
                load_corpus(path, &labels, hq_res, lq_res)?
            }
            None => crate::toy::toy_corpus(
                config.data.toy_per_class,
                config.model.hq_size,
                config.model.hq_size / config.model.lq_size,
                config.data.seed,
            )?,
        };
        Self::from_corpus(corpus, config)
    }

    pub fn from_corpus(corpus: Corpus, config: &RunConfig) -> Result<Self> {
        let mut problems = Vec::new();
        if corpus.hq.is_empty() {
            problems.push("the corpus has no hq images".to_string());
        }
        if corpus.lq.is_empty() {
            problems.push("the corpus has no lq images".to_string());
        }
        if corpus.hq.resolution != Resolution::square(config.model.hq_size) {
            problems.push(format!("hq images are {}, model expects {}", corpus.hq.resolution, config.model.hq_size));
        }
        if corpus.lq.resolution != Resolution::square(config.model.lq_size) {
            problems.push(format!("lq images are {}, model expects {}", corpus.lq.resolution, config.model.lq_size));
        }
        if corpus.labels.hq_classes() != config.hq_classes() || corpus.labels.lq_classes() != config.lq_classes() {
            problems.push("corpus label spaces differ from the configured ones".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let (hq, hq_holdout) = corpus.hq.split_holdout(config.data.holdout_fraction, config.data.seed)?;
        if hq.is_empty() {
            return Err(Error::Validation(vec!["holdout leaves no hq training images".into()]));
        }
        Ok(TrainData {
            labels: corpus.labels,
            hq,
            hq_holdout,
            lq: corpus.lq,
        })
    }
}

/// The three networks plus the feature embedder.
#[derive(Debug, Clone)]
pub struct Models {
    pub glh: TransferGenerator,
    pub embedder: CtfEmbedder,
    pub ga: SynthesisGenerator,
    pub disc: Discriminator,
}

fn detach_trace(trace: GlhTrace) -> Result<GlhTrace> {
    Ok(GlhTrace {
        features: trace.features.iter().map(Tensor::detach).collect(),
        cbn2: trace
            .cbn2
            .iter()
            .map(|p| crate::cbn::CbnParams::from_tables(p.gamma.as_tensor().detach(), p.beta.as_tensor().detach(), p.layer))
            .collect::<Result<Vec<_>>>()?,
        ..trace
    })
}

impl Models {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut rng = rng_stream(config.seed, STREAM_INIT);
        let mut init = Init::new(&mut rng);
        Ok(Models {
            glh: TransferGenerator::new(&mut init, config.transfer_config())?,
            embedder: CtfEmbedder::new(
                &mut init,
                &config.model.glh_block_channels,
                config.lq_classes(),
                config.model.embed_dim,
            )?,
            ga: SynthesisGenerator::new(&mut init, config.synthesis_config())?,
            disc: Discriminator::new(&mut init, config.discriminator_config())?,
        })
    }

    /// Networks restored from a checkpoint bundle, with its manifest.
    pub fn from_checkpoint(path: &Path) -> Result<(Manifest, Self)> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let models = Models::new(&manifest.config)?;
        models.load_state(&tensors)?;
        Ok((manifest, models))
    }

    pub fn registries(&self) -> [&Registry; 4] {
        [&self.glh.registry, &self.embedder.registry, &self.ga.registry, &self.disc.registry]
    }

    /// Every parameter and buffer by name.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.registries()
            .iter()
            .flat_map(|r| r.entries().iter().map(|e| (e.name.clone(), e.var.as_tensor().clone())))
            .collect()
    }

    pub fn load_state(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for reg in self.registries() {
            for e in reg.entries() {
                let t = tensors
                    .get(&e.name)
                    .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {}", e.name)))?;
                if t.shape() != e.var.shape() {
                    return Err(Error::Integrity(format!(
                        "{} is {:?} in the checkpoint but {:?} in the model",
                        e.name,
                        t.dims(),
                        e.var.dims()
                    )));
                }
                e.var.set(t)?;
            }
        }
        Ok(())
    }

    /// Conditional transferring features for a batch. Unless `track_glh`,
    /// no gradient reaches the transfer generator.
    #[allow(clippy::too_many_arguments)]
    pub fn ctfs(
        &self,
        lq: &Tensor,
        lq_labels: &[usize],
        classes: &[usize],
        noises: &[Tensor],
        glh_mode: Mode,
        track_glh: bool,
        ctf_mode: CtfMode,
    ) -> Result<Vec<CtfTensor>> {
        let (_, trace) = self.glh.forward(lq, lq_labels, classes, noises, glh_mode)?;
        let trace = if track_glh { trace } else { detach_trace(trace)? };
        let ctfs = extract_all_ctfs(&trace, lq, &self.embedder.tables)?;
        match ctf_mode {
            CtfMode::Full => Ok(ctfs),
            CtfMode::Zero => zero_ctfs(&ctfs),
        }
    }

    /// Evaluation-mode samples for `classes`, with low-quality inputs drawn
    /// uniformly from `lq`. Phase 1 samples the transfer generator, phase 2
    /// the synthesis generator.
    pub fn generate(&self, phase: u8, ctf_mode: CtfMode, lq: &Dataset, classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if lq.is_empty() {
            return Err(Error::Data("no low-quality images to condition on".into()));
        }
        let mut chunks = Vec::new();
        for cls in classes.chunks(GEN_CHUNK) {
            let idx: Vec<usize> = (0..cls.len()).map(|_| rng.random_range(0..lq.len())).collect();
            let lq_images = lq.tensor(&idx)?;
            let lq_labels = lq.labels_of(&idx);
            let noises = self.glh.sample_noises(rng, cls.len())?;
            let images = if phase == 1 {
                self.glh.forward(&lq_images, &lq_labels, cls, &noises, Mode::Eval)?.0
            } else {
                let ctfs = self.ctfs(&lq_images, &lq_labels, cls, &noises, Mode::Eval, false, ctf_mode)?;
                let z = self.ga.sample_noise(rng, cls.len())?;
                self.ga.forward(&z, &ctfs, cls, Mode::Eval)?
            };
            // without detaching, every chunk would pin its whole forward graph
            chunks.push(images.detach());
        }
        Ok(Tensor::cat(&chunks, 0)?)
    }
}

/// Frozen classifier plus reference features of the real data.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub classifier: SurrogateClassifier,
    pub train_accuracy: f64,
    pub real_features: DMatrix<f64>,
    pub holdout_features: DMatrix<f64>,
}

impl Evaluator {
    /// Trains the classifier on the HQ training split; it depends only on
    /// the data and `data.seed`, so reports of runs sharing a corpus are
    /// comparable.
    pub fn build(config: &RunConfig, data: &TrainData) -> Result<Self> {
        let opts = ClassifierTraining {
            max_steps: config.eval.classifier_steps,
            target_accuracy: config.eval.classifier_target_accuracy,
            ..ClassifierTraining::default()
        };
        let (classifier, train_accuracy) = eval::train_classifier(
            &data.hq,
            config.hq_classes(),
            config.eval.classifier_width,
            opts,
            config.data.seed,
        )?;
        let all: Vec<usize> = (0..data.hq.len()).collect();
        let real_features = classifier.analyze(&data.hq.tensor(&all)?)?.0;
        let holdout_features = if data.hq_holdout.is_empty() {
            real_features.clone()
        } else {
            let idx: Vec<usize> = (0..data.hq_holdout.len()).collect();
            classifier.analyze(&data.hq_holdout.tensor(&idx)?)?.0
        };
        Ok(Evaluator {
            classifier,
            train_accuracy,
            real_features,
            holdout_features,
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseState {
    pub phase: u8,
    /// Generator steps completed in the current phase.
    pub phase_step: u64,
    pub global_step: u64,
    pub phase1_steps: u64,
    /// Phase-1 monitor values, oldest first.
    pub monitor: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    last_checkpoint: Option<(u8, u64)>,
}

impl PhaseState {
    fn new() -> Self {
        PhaseState {
            phase: 1,
            phase_step: 0,
            global_step: 0,
            phase1_steps: 0,
            monitor: Vec::new(),
            checkpoints: Vec::new(),
            last_checkpoint: None,
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SavedState {
    phase: PhaseState,
    rng: ChaCha8Rng,
    sampler: MixedBatchSampler,
    metrics_lines: u64,
    adam_steps: [u64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumePolicy {
    /// The configuration must match the checkpoint's exactly (output
    /// directory aside); the metrics stream is cut back and continued.
    Exact,
    /// Only the architecture must match; schedules, losses and the feature
    /// mode may change, and a fresh metrics stream is started.
    Fork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop (with a checkpoint) once this many generator steps are done.
    pub stop_after: Option<u64>,
    pub final_eval: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stop_after: None,
            final_eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub completed: bool,
    pub global_step: u64,
    pub phase1_steps: u64,
    pub report: Option<EvalReport>,
    pub last_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub data: TrainData,
    pub models: Models,
    opt_d: Adam,
    opt_glh: Adam,
    opt_g2: Adam,
    pub state: PhaseState,
    rng: ChaCha8Rng,
    sampler: MixedBatchSampler,
    sink: Option<MetricsSink>,
    keep_lines: Option<u64>,
    evaluator: Option<Evaluator>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn stack(images: &[Image]) -> Result<Tensor> {
    let Resolution { height, width } = images[0].resolution;
    let buf: Vec<f32> = images.iter().flat_map(|im| im.pixels.iter().copied()).collect();
    Ok(Tensor::from_vec(buf, (images.len(), 3, height, width), &candle_core::Device::Cpu)?)
}

impl Trainer {
    pub fn new(config: RunConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let models = Models::new(&config)?;
        let mut g2 = models.ga.registry.trainable();
        g2.extend(models.embedder.registry.trainable());
        if !config.train.freeze_glh {
            g2.extend(models.glh.registry.trainable());
        }
        let sampler = MixedBatchSampler::new(data.hq.len(), data.lq.len(), config.train.batch_size, config.seed)?;
        Ok(Trainer {
            opt_d: Adam::new(models.disc.registry.trainable(), config.train.adam_d())?,
            opt_glh: Adam::new(models.glh.registry.trainable(), config.train.adam_g())?,
            opt_g2: Adam::new(g2, config.train.adam_g())?,
            rng: rng_stream(config.seed, STREAM_TRAIN),
            models,
            sampler,
            state: PhaseState::new(),
            config,
            data,
            sink: None,
            keep_lines: None,
            evaluator: None,
        })
    }

    /// Restores a trainer from a checkpoint bundle.
    pub fn resume(config: RunConfig, data: TrainData, path: &Path, policy: ResumePolicy) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        if manifest.architecture_hash != config.architecture_hash() {
            return Err(Error::Config(vec![format!(
                "{} was written for a different architecture",
                path.display()
            )]));
        }
        if policy == ResumePolicy::Exact && manifest.config_hash != config.hash() {
            return Err(Error::Config(vec![format!(
                "configuration differs from the one {} was trained with",
                path.display()
            )]));
        }
        let saved: SavedState = serde_json::from_value(manifest.state)
            .map_err(|e| Error::Integrity(format!("malformed trainer state: {e}")))?;
        let mut t = Trainer::new(config, data)?;
        t.models.load_state(&tensors)?;
        for (opt, tag, steps) in [
            (&mut t.opt_d, "d", saved.adam_steps[0]),
            (&mut t.opt_glh, "glh", saved.adam_steps[1]),
            (&mut t.opt_g2, "g2", saved.adam_steps[2]),
        ] {
            let fetch = |kind: &str, name: &str| {
                tensors
                    .get(&format!("opt.{tag}.{kind}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Integrity(format!("checkpoint lacks optimiser state for {name}")))
            };
            let names: Vec<String> = opt.params().iter().map(|(n, _)| n.clone()).collect();
            let first = names.iter().map(|n| fetch("m", n)).collect::<Result<Vec<_>>>()?;
            let second = names.iter().map(|n| fetch("v", n)).collect::<Result<Vec<_>>>()?;
            opt.restore(steps, first, second)?;
        }
        t.rng = saved.rng;
        t.sampler = saved.sampler;
        t.state = saved.phase;
        if policy == ResumePolicy::Exact {
            t.keep_lines = Some(saved.metrics_lines);
        } else {
            t.state.checkpoints.clear();
        }
        Ok(t)
    }

    /// `(discriminator, transfer generator, synthesis side)` update counts.
    pub fn optimizer_steps(&self) -> [u64; 3] {
        [self.opt_d.steps(), self.opt_glh.steps(), self.opt_g2.steps()]
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.models.state_tensors();
        for (opt, tag) in [(&self.opt_d, "d"), (&self.opt_glh, "glh"), (&self.opt_g2, "g2")] {
            for (name, m, v) in opt.moments() {
                out.push((format!("opt.{tag}.m.{name}"), m.clone()));
                out.push((format!("opt.{tag}.v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.config.output_dir.join("checkpoints")
    }

    /// Writes the full training state; returns the bundle path.
    pub fn save_checkpoint(&mut self) -> Result<PathBuf> {
        let path = self.checkpoint_dir().join(format!(
            "ckpt-{:06}-p{}.safetensors",
            self.state.global_step, self.state.phase
        ));
        self.state.last_checkpoint = Some((self.state.phase, self.state.global_step));
        if !self.state.checkpoints.contains(&path) {
            self.state.checkpoints.push(path.clone());
        }
        let saved = SavedState {
            phase: self.state.clone(),
            rng: self.rng.clone(),
            sampler: self.sampler.clone(),
            metrics_lines: self.sink.as_ref().map_or(0, MetricsSink::lines),
            adam_steps: self.optimizer_steps(),
        };
        let manifest = Manifest {
            version: checkpoint::FORMAT_VERSION,
            config_hash: self.config.hash(),
            architecture_hash: self.config.architecture_hash(),
            config: self.config.clone(),
            phase: self.state.phase,
            phase_step: self.state.phase_step,
            global_step: self.state.global_step,
            state: serde_json::to_value(&saved).expect("trainer state serializes"),
            payload_sha256: String::new(),
        };
        checkpoint::save(&path, &self.checkpoint_tensors(), manifest)?;
        Ok(path)
    }

    fn random_classes(&mut self, n: usize) -> Vec<usize> {
        let k = self.config.hq_classes();
        (0..n).map(|_| self.rng.random_range(0..k)).collect()
    }

    fn non_finite(&self, what: &str, value: f64) -> Error {
        Error::NonFiniteLoss {
            phase: self.state.phase,
            step: self.state.phase_step + 1,
            detail: format!("{what} = {value}"),
        }
    }

    /// Cut-paste inputs for the box head: half of the real images and half
    /// of the fakes, each with a patch from the batch's real images.
    fn sp_inputs(&mut self, real: &[Image], real_labels: &[usize], fake: &Tensor, fake_classes: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<PatchAnnotation>)> {
        let nr = real.len().div_ceil(2);
        let nf = fake.dim(0)?.div_ceil(2);
        let fakes = crate::data::images_from_tensor(&fake.narrow(0, 0, nf)?)?;
        let mut pasted = Vec::with_capacity(nr + nf);
        let mut anns = Vec::with_capacity(nr + nf);
        for target in real[..nr].iter().chain(&fakes) {
            let (img, ann) = paste_random_patch(target, real, PatchSizeRange::default(), &mut self.rng)?;
            pasted.push(img);
            anns.push(ann);
        }
        let classes = real_labels[..nr].iter().chain(&fake_classes[..nf]).copied().collect();
        Ok((stack(&pasted)?, classes, anns))
    }

    /// One discriminator update; returns `(hinge, box)` losses.
    fn d_update(&mut self, batch: &QualityTieredBatch, fake: &Tensor, fake_classes: &[usize]) -> Result<(f64, f64)> {
        let nr = batch.hq_images.dim(0)?;
        let nf = fake.dim(0)?;
        let mut inputs = vec![batch.hq_images.clone(), fake.clone()];
        let mut classes: Vec<usize> = batch.hq_labels.iter().chain(fake_classes).copied().collect();
        let mut anns = Vec::new();
        if self.config.train.lambda_sp > 0.0 {
            let real: Vec<Image> = batch.hq_indices.iter().map(|&i| self.data.hq.images[i].clone()).collect();
            let (sp, sp_classes, a) = self.sp_inputs(&real, &batch.hq_labels, fake, fake_classes)?;
            inputs.push(sp);
            classes.extend(sp_classes);
            anns = a;
        }
        let out = self.models.disc.forward(&Tensor::cat(&inputs, 0)?, &classes, Mode::Train)?;
        let d_adv = adv_loss_d(&out.adv_score.narrow(0, 0, nr)?, &out.adv_score.narrow(0, nr, nf)?)?;
        let dv = scalar(&d_adv)?;
        let (loss, sv) = if anns.is_empty() {
            (d_adv, 0.0)
        } else {
            let sp = sp_loss_tensor(&out.bbox_pred.narrow(0, nr + nf, anns.len())?, &anns)?;
            let sv = scalar(&sp)?;
            ((d_adv + (sp * self.config.train.lambda_sp)?)?, sv)
        };
        if !dv.is_finite() {
            return Err(self.non_finite("d_adv", dv));
        }
        if !sv.is_finite() {
            return Err(self.non_finite("sp", sv));
        }
        self.opt_d.step(&loss.backward()?)?;
        Ok((dv, sv))
    }

    fn finish_step(&mut self, d_sum: f64, sp_sum: f64, g: f64) -> LossRecord {
        self.state.phase_step += 1;
        self.state.global_step += 1;
        let n = self.config.train.d_steps_per_g_step;
        LossRecord {
            phase: self.state.phase,
            step: self.state.phase_step,
            d_adv: d_sum / n as f64,
            g_adv: g,
            sp: sp_sum / n as f64,
            d_updates: n as u32,
        }
    }

    /// Transfer generator against the discriminator.
    pub fn phase1_step(&mut self) -> Result<LossRecord> {
        if self.state.phase != 1 {
            return Err(contract("phase-1 step requested outside phase 1"));
        }
        let half = self.sampler.half();
        let (mut d_sum, mut sp_sum) = (0.0, 0.0);
        let mut last = None;
        for _ in 0..self.config.train.d_steps_per_g_step {
            let batch = self.sampler.next_batch(&self.data.hq, &self.data.lq)?;
            let classes = self.random_classes(half);
            let noises = self.models.glh.sample_noises(&mut self.rng, half)?;
            let (fake, _) = self.models.glh.forward(&batch.lq_images, &batch.lq_labels, &classes, &noises, Mode::Train)?;
            let (d, sp) = self.d_update(&batch, &fake.detach(), &classes)?;
            d_sum += d;
            sp_sum += sp;
            last = Some(batch);
        }
        let batch = last.expect("at least one discriminator step");
        let classes = self.random_classes(half);
        let noises = self.models.glh.sample_noises(&mut self.rng, half)?;
        let (fake, _) = self.models.glh.forward(&batch.lq_images, &batch.lq_labels, &classes, &noises, Mode::Train)?;
        let g = adv_loss_g(&self.models.disc.forward(&fake, &classes, Mode::Eval)?.adv_score)?;
        let gv = scalar(&g)?;
        if !gv.is_finite() {
            return Err(self.non_finite("g_adv", gv));
        }
        self.opt_glh.step(&g.backward()?)?;
        Ok(self.finish_step(d_sum, sp_sum, gv))
    }

    fn glh_mode(&self) -> Mode {
        if self.config.train.freeze_glh {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    /// Synthesis generator against the discriminator, fed by features of
    /// the transfer generator.
    pub fn phase2_step(&mut self) -> Result<LossRecord> {
        if self.state.phase != 2 {
            return Err(contract("phase-2 step requested outside phase 2"));
        }
        let half = self.sampler.half();
        let mode = self.config.train.ctf_mode;
        let glh_mode = self.glh_mode();
        let (mut d_sum, mut sp_sum) = (0.0, 0.0);
        let mut last = None;
        for _ in 0..self.config.train.d_steps_per_g_step {
            let batch = self.sampler.next_batch(&self.data.hq, &self.data.lq)?;
            let classes = self.random_classes(half);
            let noises = self.models.glh.sample_noises(&mut self.rng, half)?;
            let ctfs = self.models.ctfs(&batch.lq_images, &batch.lq_labels, &classes, &noises, glh_mode, false, mode)?;
            let z = self.models.ga.sample_noise(&mut self.rng, half)?;
            let fake = self.models.ga.forward(&z, &ctfs, &classes, Mode::Train)?;
            let (d, sp) = self.d_update(&batch, &fake.detach(), &classes)?;
            d_sum += d;
            sp_sum += sp;
            last = Some(batch);
        }
        let batch = last.expect("at least one discriminator step");
        let classes = self.random_classes(half);
        let noises = self.models.glh.sample_noises(&mut self.rng, half)?;
        let track = !self.config.train.freeze_glh;
        let ctfs = self.models.ctfs(&batch.lq_images, &batch.lq_labels, &classes, &noises, glh_mode, track, mode)?;
        let z = self.models.ga.sample_noise(&mut self.rng, half)?;
        let fake = self.models.ga.forward(&z, &ctfs, &classes, Mode::Train)?;
        let g = adv_loss_g(&self.models.disc.forward(&fake, &classes, Mode::Eval)?.adv_score)?;
        let gv = scalar(&g)?;
        if !gv.is_finite() {
            return Err(self.non_finite("g_adv", gv));
        }
        self.opt_g2.step(&g.backward()?)?;
        Ok(self.finish_step(d_sum, sp_sum, gv))
    }

    /// The classifier and reference features, built on first use.
    pub fn evaluator(&mut self) -> Result<&Evaluator> {
        if self.evaluator.is_none() {
            self.evaluator = Some(Evaluator::build(&self.config, &self.data)?);
        }
        Ok(self.evaluator.as_ref().expect("just built"))
    }

    /// Installs an evaluator built elsewhere for the same corpus, e.g. one
    /// shared by several runs.
    pub fn set_evaluator(&mut self, evaluator: Evaluator) {
        self.evaluator = Some(evaluator);
    }

    fn eval_rng(&self) -> ChaCha8Rng {
        rng_stream(self.config.seed.wrapping_add(self.state.global_step), STREAM_EVAL)
    }

    fn eval_classes(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = self.config.hq_classes();
        (0..n).map(|_| rng.random_range(0..k)).collect()
    }

    /// Distance between transfer-generator samples and the held-out slice.
    pub fn monitor_fid(&mut self) -> Result<f64> {
        self.evaluator()?;
        let mut rng = self.eval_rng();
        let classes = self.eval_classes(self.config.train.monitor_samples, &mut rng);
        let images = self.models.generate(1, self.config.train.ctf_mode, &self.data.lq, &classes, &mut rng)?;
        let ev = self.evaluator.as_ref().expect("built above");
        let (feats, _) = ev.classifier.analyze(&images)?;
        eval::fid_surrogate(&ev.holdout_features, &feats)
    }

    /// Full report on samples of the current phase's generator.
    pub fn evaluate(&mut self) -> Result<EvalReport> {
        self.evaluator()?;
        let mut rng = self.eval_rng();
        let classes = self.eval_classes(self.config.eval.samples, &mut rng);
        let images = self
            .models
            .generate(self.state.phase, self.config.train.ctf_mode, &self.data.lq, &classes, &mut rng)?;
        let ev = self.evaluator.as_ref().expect("built above");
        eval::evaluate(
            &ev.classifier,
            &ev.real_features,
            &images,
            self.config.eval.splits,
            self.state.global_step,
            self.state.phase,
        )
    }

    fn record(&mut self, record: &Record) -> Result<()> {
        match &mut self.sink {
            Some(sink) => sink.append(record),
            None => Ok(()),
        }
    }

    fn open_sink(&mut self) -> Result<()> {
        if self.sink.is_none() {
            self.sink = Some(MetricsSink::open(&self.config.output_dir, self.keep_lines)?);
        }
        Ok(())
    }

    fn checkpoint_if_new(&mut self) -> Result<()> {
        if self.state.last_checkpoint != Some((self.state.phase, self.state.global_step)) {
            self.save_checkpoint()?;
        }
        Ok(())
    }

    fn timed_step(&mut self) -> Result<LossRecord> {
        let start = Instant::now();
        let rec = if self.state.phase == 1 {
            self.phase1_step()
        } else {
            self.phase2_step()
        };
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                if let Error::NonFiniteLoss { phase, step, detail } = &e {
                    let abort = Record::Abort {
                        phase: *phase,
                        step: *step,
                        detail: detail.clone(),
                    };
                    self.record(&abort)?;
                }
                return Err(e);
            }
        };
        self.record(&Record::Loss(rec.clone()))?;
        if let Some(sink) = &mut self.sink {
            sink.time(rec.phase, rec.step, start.elapsed().as_secs_f64() * 1e3)?;
        }
        Ok(rec)
    }

    /// Runs both phases to completion (or until `stop_after`), writing the
    /// metrics stream, checkpoints and the final report under the output
    /// directory.
    pub fn run(&mut self, opts: RunOptions) -> Result<RunSummary> {
        self.open_sink()?;
        if self.state.checkpoints.is_empty() {
            self.save_checkpoint()?;
        }
        let t = self.config.train.clone();
        loop {
            if opts.stop_after.is_some_and(|k| self.state.global_step >= k) {
                self.checkpoint_if_new()?;
                return Ok(self.summary(false, None));
            }
            if self.state.phase == 1 {
                if phase_switch_criterion(&self.state.monitor, t.patience, t.improvement_threshold, self.state.phase_step, t.max_steps_phase1) {
                    let reason = if self.state.phase_step >= t.max_steps_phase1 {
                        "max_steps"
                    } else {
                        "plateau"
                    };
                    self.record(&Record::PhaseSwitch {
                        step: self.state.phase_step,
                        reason: reason.into(),
                    })?;
                    self.state.phase1_steps = self.state.phase_step;
                    self.state.phase = 2;
                    self.state.phase_step = 0;
                    self.save_checkpoint()?;
                    continue;
                }
                self.timed_step()?;
                if t.monitor_every > 0 && self.state.phase_step % t.monitor_every == 0 {
                    let fid = self.monitor_fid()?;
                    self.state.monitor.push(fid);
                    self.record(&Record::Monitor {
                        phase: 1,
                        step: self.state.phase_step,
                        fid,
                    })?;
                }
            } else {
                if self.state.phase_step >= t.max_steps_phase2 {
                    break;
                }
                self.timed_step()?;
            }
            if t.checkpoint_every > 0 && self.state.global_step % t.checkpoint_every == 0 {
                self.save_checkpoint()?;
            }
        }
        self.checkpoint_if_new()?;
        let report = if opts.final_eval {
            let report = self.evaluate()?;
            self.record(&Record::Eval(report.clone()))?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            crate::io::write_atomic(&self.config.output_dir.join("report.json"), json.as_bytes())?;
            Some(report)
        } else {
            None
        };
        Ok(self.summary(true, report))
    }

    fn summary(&self, completed: bool, report: Option<EvalReport>) -> RunSummary {
        RunSummary {
            completed,
            global_step: self.state.global_step,
            phase1_steps: self.state.phase1_steps,
            report,
            last_checkpoint: self.state.checkpoints.last().cloned(),
        }
    }
}
