//! Desk-scale quality metrics computed with a small classifier trained on
//! the high-quality corpus, and sample-grid emission.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Image, MixedBatchSampler};
use crate::error::{contract, Result};
use crate::nn::{avg_pool2, Adam, AdamConfig, Conv2d, Init, Linear, Mode, Registry};
use crate::spectral::Resolution;

pub const FID_EPS: f64 = 1e-6;
pub const DEFAULT_SPLITS: usize = 10;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub n_samples: usize,
    pub classifier_fingerprint: String,
    pub step: u64,
    pub phase: u8,
}

/// `exp(E_x KL(p(y|x) || p(y)))` on each of `splits` contiguous chunks;
/// returns the mean and population standard deviation over chunks.
pub fn inception_score_surrogate(probs: &DMatrix<f64>, splits: usize) -> Result<(f64, f64)> {
    let (n, k) = probs.shape();
    if splits == 0 || n < splits || k == 0 {
        return Err(contract(format!("cannot split {n} rows into {splits} chunks")));
    }
    for (i, row) in probs.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(contract(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    let chunk = n / splits;
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = probs.rows(s * chunk, chunk);
            let marginal = part.row_mean();
            let mean_kl = part
                .row_iter()
                .map(|row| {
                    row.iter()
                        .zip(marginal.iter())
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p.ln() - q.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / chunk as f64;
            mean_kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets (rows are
/// samples). Both covariances get `FID_EPS * I` added.
pub fn fid_surrogate(real: &DMatrix<f64>, fake: &DMatrix<f64>) -> Result<f64> {
    if real.ncols() != fake.ncols() || real.nrows() == 0 || fake.nrows() == 0 {
        return Err(contract("feature sets must be nonempty with equal width"));
    }
    if real.iter().chain(fake.iter()).any(|v| !v.is_finite()) {
        return Err(crate::Error::NumericDomain("non-finite feature".into()));
    }
    let d = real.ncols();
    let (mu_r, mut cov_r) = mean_and_cov(real);
    let (mu_f, mut cov_f) = mean_and_cov(fake);
    let eps = DMatrix::identity(d, d) * FID_EPS;
    cov_r += &eps;
    cov_f += &eps;
    // tr sqrt(Sr Sf) == tr sqrt(sqrt(Sr) Sf sqrt(Sr)), the latter symmetric PSD
    let root_r = sym_sqrt(&cov_r);
    let inner = &root_r * &cov_f * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_r - mu_f;
    let fid = diff.dot(&diff) + cov_r.trace() + cov_f.trace() - 2.0 * tr_cross;
    Ok(fid.max(0.0))
}

/// Small convolutional classifier whose penultimate activations serve as
/// the metric feature space.
#[derive(Debug, Clone)]
pub struct SurrogateClassifier {
    convs: Vec<Conv2d>,
    fc: Linear,
    pub resolution: Resolution,
    pub classes: usize,
    pub registry: Registry,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierTraining {
    pub max_steps: usize,
    pub batch_size: usize,
    pub target_accuracy: f64,
    pub check_every: usize,
    pub lr: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            max_steps: 2000,
            batch_size: 32,
            target_accuracy: 0.9,
            check_every: 50,
            lr: 1e-3,
        }
    }
}

const EVAL_CHUNK: usize = 256;

impl SurrogateClassifier {
    pub fn new(init: &mut Init, resolution: Resolution, classes: usize, width: usize) -> Result<Self> {
        let mut reg = Registry::new("classifier");
        let gain = 2f64.sqrt();
        let convs = vec![
            Conv2d::new(&mut reg, init, "conv1", 3, width, 3, gain)?,
            Conv2d::new(&mut reg, init, "conv2", width, 2 * width, 3, gain)?,
            Conv2d::new(&mut reg, init, "conv3", 2 * width, 2 * width, 3, gain)?,
        ];
        let fc = Linear::new(&mut reg, init, "fc", 2 * width, classes, true)?;
        Ok(SurrogateClassifier {
            convs,
            fc,
            resolution,
            classes,
            registry: reg,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.weight.dims()[1]
    }

    /// Global-average-pooled activations `(n, feature_dim)`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x, Mode::Eval)?.relu()?;
            if i + 1 < n {
                x = avg_pool2(&x)?;
            }
        }
        Ok(x.mean((2, 3))?)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.fc.forward(&self.features(images)?, Mode::Eval)
    }

    /// Features and class probabilities for many images, chunked.
    pub fn analyze(&self, images: &Tensor) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = images.dim(0)?;
        let mut feats = Vec::new();
        let mut probs = Vec::new();
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let chunk = images.narrow(0, start, len)?;
            let f = self.features(&chunk)?;
            let logits = self.fc.forward(&f, Mode::Eval)?.to_dtype(DType::F64)?;
            let p = candle_core::Tensor::exp(&logits.broadcast_sub(&logits.max_keepdim(D::Minus1)?)?)?;
            let p = p.broadcast_div(&p.sum_keepdim(D::Minus1)?)?;
            feats.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
            probs.extend(p.flatten_all()?.to_vec1::<f64>()?);
            start += len;
        }
        Ok((
            DMatrix::from_row_slice(n, self.feature_dim(), &feats),
            DMatrix::from_row_slice(n, self.classes, &probs),
        ))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (_, probs) = self.analyze(&data.tensor(&idx)?)?;
        let correct = probs
            .row_iter()
            .zip(&data.labels)
            .filter(|(row, &label)| {
                let best = row.iter().enumerate().fold(0, |b, (j, p)| if *p > row[b] { j } else { b });
                best == label
            })
            .count();
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    /// Trains on `data` until the training accuracy reaches the target or
    /// the step budget runs out; returns the final training accuracy.
    pub fn fit(&self, data: &Dataset, opts: ClassifierTraining, seed: u64) -> Result<f64> {
        if data.is_empty() {
            return Err(crate::Error::Data("classifier training set is empty".into()));
        }
        let mut opt = Adam::new(
            self.registry.trainable(),
            AdamConfig {
                lr: opts.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        )?;
        // the sampler's LQ half is unused here; reuse it for shuffling only
        let mut sampler = MixedBatchSampler::new(data.len(), 1, 2 * opts.batch_size, seed)?;
        let mut accuracy = self.accuracy(data)?;
        for step in 1..=opts.max_steps {
            if accuracy >= opts.target_accuracy {
                break;
            }
            let (idx, _) = sampler.next_indices();
            let x = data.tensor(&idx)?;
            let labels = Tensor::from_vec(
                data.labels_of(&idx).iter().map(|&l| l as u32).collect::<Vec<_>>(),
                idx.len(),
                x.device(),
            )?;
            let logits = self.fc.forward(&self.features(&x)?, Mode::Train)?;
            let log_probs = candle_core::Tensor::log_sum_exp(&logits, D::Minus1)?;
            let picked = logits.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?;
            let loss = (log_probs - picked)?.mean_all()?;
            opt.step(&loss.backward()?)?;
            if step % opts.check_every == 0 || step == opts.max_steps {
                accuracy = self.accuracy(data)?;
            }
        }
        Ok(accuracy)
    }

    /// Hash of every parameter's bytes, identifying the metric space.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.registry.trainable() {
            h.update(name.as_bytes());
            for v in var.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }
}

/// Builds a classifier with a fresh seeded initialisation and trains it.
pub fn train_classifier(data: &Dataset, classes: usize, width: usize, opts: ClassifierTraining, seed: u64) -> Result<(SurrogateClassifier, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clf = SurrogateClassifier::new(&mut Init::new(&mut rng), data.resolution, classes, width)?;
    let acc = clf.fit(data, opts, seed ^ 0x5eed)?;
    Ok((clf, acc))
}

/// Metric report for a set of generated images against real features.
pub fn evaluate(
    classifier: &SurrogateClassifier,
    real_features: &DMatrix<f64>,
    fake_images: &Tensor,
    splits: usize,
    step: u64,
    phase: u8,
) -> Result<EvalReport> {
    let (fake_features, probs) = classifier.analyze(fake_images)?;
    let (is_mean, is_std) = inception_score_surrogate(&probs, splits.min(probs.nrows()))?;
    Ok(EvalReport {
        is_mean,
        is_std,
        fid: fid_surrogate(real_features, &fake_features)?,
        n_samples: fake_images.dim(0)?,
        classifier_fingerprint: classifier.fingerprint()?,
        step,
        phase,
    })
}

/// Tiles `images` row-major into a `rows x cols` grid.
pub fn sample_grid(images: &[Image], rows: usize, cols: usize) -> Result<image::RgbImage> {
    if rows == 0 || cols == 0 || images.len() != rows * cols {
        return Err(contract(format!(
            "{} images do not fill a {rows}x{cols} grid",
            images.len()
        )));
    }
    let res = images[0].resolution;
    if images.iter().any(|im| im.resolution != res) {
        return Err(contract("grid images differ in resolution"));
    }
    let (h, w) = (res.height as u32, res.width as u32);
    let mut grid = image::RgbImage::new(w * cols as u32, h * rows as u32);
    for (i, im) in images.iter().enumerate() {
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        let tile = im.to_rgb8();
        for (x, y, p) in tile.enumerate_pixels() {
            grid.put_pixel(c * w + x, r * h + y, *p);
        }
    }
    Ok(grid)
}

/// Writes the grid as PNG, atomically.
pub fn emit_sample_grid(images: &[Image], path: &Path, rows: usize, cols: usize) -> Result<()> {
    let grid = sample_grid(images, rows, cols)?;
    let mut bytes = Vec::new();
    grid.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| contract(format!("png encoding failed: {e}")))?;
    crate::io::write_atomic(path, &bytes)
}
