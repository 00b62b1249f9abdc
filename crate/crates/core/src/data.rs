//! Quality-tiered datasets: manifest ingestion, low-quality construction
//! by area downsampling, and the mixed HQ/LQ batch sampler.
//!
//! A manifest is UTF-8 text, one record per line:
//! `relative/path<TAB>label<TAB>tier`, where `tier` is `hq` or `lq` and
//! `label` is a class name from the matching label space. Paths are
//! relative to the manifest's directory. Blank lines and lines starting
//! with `#` are ignored.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::spectral::Resolution;

/// A 3-channel image stored channel-major (`c, y, x`) with values in
/// `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub resolution: Resolution,
    pub pixels: Vec<f32>,
}

pub fn normalize(byte: u8) -> f32 {
    byte as f32 / 127.5 - 1.0
}

pub fn denormalize(value: f32) -> u8 {
    ((value.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn new(resolution: Resolution, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * resolution.area() {
            return Err(contract(format!(
                "{} values do not fill a 3x{resolution} image",
                pixels.len()
            )));
        }
        Ok(Image { resolution, pixels })
    }

    pub fn filled(resolution: Resolution, value: f32) -> Self {
        Image {
            resolution,
            pixels: vec![value; 3 * resolution.area()],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.resolution.height + y) * self.resolution.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let idx = (c * self.resolution.height + y) * self.resolution.width + x;
        self.pixels[idx] = v;
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let res = Resolution::new(h as usize, w as usize);
        let mut out = Image::filled(res, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, normalize(p[c]));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let Resolution { height, width } = self.resolution;
        image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| denormalize(self.at(c, y as usize, x as usize))))
        })
    }

    /// Mean over non-overlapping `factor x factor` cells.
    pub fn area_downsample(&self, factor: usize) -> Result<Image> {
        let Resolution { height, width } = self.resolution;
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(contract(format!("factor {factor} does not divide {}", self.resolution)));
        }
        let res = Resolution::new(height / factor, width / factor);
        let mut out = Image::filled(res, 0.0);
        let norm = (factor * factor) as f64;
        for c in 0..3 {
            for y in 0..res.height {
                for x in 0..res.width {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.at(c, y * factor + dy, x * factor + dx) as f64;
                        }
                    }
                    out.set(c, y, x, (acc / norm) as f32);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hq,
    Lq,
}

impl Tier {
    fn parse(s: &str) -> Option<Tier> {
        match s {
            "hq" => Some(Tier::Hq),
            "lq" => Some(Tier::Lq),
            _ => None,
        }
    }
}

/// Independent class-name namespaces for the two tiers.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelSpaces {
    pub hq: Vec<String>,
    pub lq: Vec<String>,
}

impl LabelSpaces {
    pub fn new(hq: Vec<String>, lq: Vec<String>) -> Result<Self> {
        if hq.is_empty() || lq.is_empty() {
            return Err(contract("both label spaces need at least one class"));
        }
        Ok(LabelSpaces { hq, lq })
    }

    pub fn hq_classes(&self) -> usize {
        self.hq.len()
    }

    pub fn lq_classes(&self) -> usize {
        self.lq.len()
    }

    pub fn names(&self, tier: Tier) -> &[String] {
        match tier {
            Tier::Hq => &self.hq,
            Tier::Lq => &self.lq,
        }
    }

    pub fn index(&self, tier: Tier, name: &str) -> Option<usize> {
        self.names(tier).iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub tier: Tier,
    pub resolution: Resolution,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(tier: Tier, resolution: Resolution, images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(contract("image and label counts differ"));
        }
        if let Some(i) = images.iter().position(|im| im.resolution != resolution) {
            return Err(contract(format!("image {i} is not {resolution}")));
        }
        Ok(Dataset {
            tier,
            resolution,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Seeded split into `(train, held_out)` with `round(len * fraction)`
    /// held-out items.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(contract(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = (self.len() as f64 * fraction).round() as usize;
        let (hold, train) = order.split_at(n_hold);
        let mut train = train.to_vec();
        let mut hold = hold.to_vec();
        train.sort_unstable();
        hold.sort_unstable();
        Ok((self.subset(&train), self.subset(&hold)))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            tier: self.tier,
            resolution: self.resolution,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `(n, 3, h, w)` tensor of the given items.
    pub fn tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let Resolution { height, width } = self.resolution;
        let mut buf = Vec::with_capacity(indices.len() * 3 * height * width);
        for &i in indices {
            buf.extend_from_slice(&self.images[i].pixels);
        }
        Ok(Tensor::from_vec(buf, (indices.len(), 3, height, width), &Device::Cpu)?)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Splits a `(n, 3, h, w)` tensor back into images.
pub fn images_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(contract("expected 3-channel images"));
    }
    let flat = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = 3 * h * w;
    (0..n)
        .map(|i| Image::new(Resolution::new(h, w), flat[i * per..(i + 1) * per].to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub line: usize,
    pub path: PathBuf,
    pub label: String,
    pub tier: Tier,
}

/// Parses manifest text; every malformed line is reported.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestRecord>, Vec<String>> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            problems.push(format!("line {line}: expected 3 tab-separated fields, found {}", fields.len()));
            continue;
        }
        let Some(tier) = Tier::parse(fields[2]) else {
            problems.push(format!("line {line}: unknown tier {:?} (expected hq or lq)", fields[2]));
            continue;
        };
        records.push(ManifestRecord {
            line,
            path: PathBuf::from(fields[0]),
            label: fields[1].to_string(),
            tier,
        });
    }
    if problems.is_empty() {
        Ok(records)
    } else {
        Err(problems)
    }
}

/// Both tiers of a loaded corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: LabelSpaces,
    pub hq: Dataset,
    pub lq: Dataset,
}

/// Loads every record of `manifest`, validating labels, decodability and
/// resolutions; on failure returns the full list of problems.
pub fn load_corpus(
    manifest: &Path,
    labels: &LabelSpaces,
    hq_resolution: Resolution,
    lq_resolution: Resolution,
) -> Result<Corpus> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let records = parse_manifest(&text).map_err(Error::Validation)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::new();
    let mut hq = (Vec::new(), Vec::new());
    let mut lq = (Vec::new(), Vec::new());
    for rec in &records {
        let Some(label) = labels.index(rec.tier, &rec.label) else {
            problems.push(format!(
                "line {}: label {:?} is not in the {} label space",
                rec.line,
                rec.label,
                match rec.tier {
                    Tier::Hq => "hq",
                    Tier::Lq => "lq",
                }
            ));
            continue;
        };
        let path = root.join(&rec.path);
        let img = match image::open(&path) {
            Ok(img) => Image::from_rgb8(&img.to_rgb8()),
            Err(e) => {
                problems.push(format!("line {}: cannot decode {}: {e}", rec.line, path.display()));
                continue;
            }
        };
        let (want, slot) = match rec.tier {
            Tier::Hq => (hq_resolution, &mut hq),
            Tier::Lq => (lq_resolution, &mut lq),
        };
        if img.resolution != want {
            problems.push(format!(
                "line {}: {} is {}, expected {want}",
                rec.line,
                path.display(),
                img.resolution
            ));
            continue;
        }
        slot.0.push(img);
        slot.1.push(label);
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(Corpus {
        labels: labels.clone(),
        hq: Dataset::new(Tier::Hq, hq_resolution, hq.0, hq.1)?,
        lq: Dataset::new(Tier::Lq, lq_resolution, lq.0, lq.1)?,
    })
}

/// Decodes one image file and checks its resolution.
pub fn read_image(path: &Path, expected: Resolution) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let img = Image::from_rgb8(&img.to_rgb8());
    if img.resolution != expected {
        return Err(Error::Validation(vec![format!(
            "{} is {}, expected {expected}",
            path.display(),
            img.resolution
        )]));
    }
    Ok(img)
}

/// Low-quality dataset built by area-averaging high-quality images; label
/// indices carry over unchanged into the low-quality namespace.
pub fn make_lq_from_hq(hq: &Dataset, factor: usize) -> Result<Dataset> {
    let Resolution { height, width } = hq.resolution;
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(contract(format!("factor {factor} does not divide {}", hq.resolution)));
    }
    let images = hq
        .images
        .iter()
        .map(|im| im.area_downsample(factor))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        Tier::Lq,
        Resolution::new(height / factor, width / factor),
        images,
        hq.labels.clone(),
    )
}

/// One training batch: equal high- and low-quality halves.
#[derive(Debug, Clone)]
pub struct QualityTieredBatch {
    pub hq_images: Tensor,
    pub hq_labels: Vec<usize>,
    pub hq_indices: Vec<usize>,
    pub lq_images: Tensor,
    pub lq_labels: Vec<usize>,
    pub lq_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct EpochStream {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    drawn: u64,
}

impl EpochStream {
    fn new(len: usize) -> Self {
        EpochStream {
            len,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            drawn: 0,
        }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            let k = (n - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + k]);
            self.cursor += k;
        }
        self.drawn += n as u64;
        out
    }
}

/// Seeded sampler drawing each half of a batch from its own epoch-wise
/// permutation, so no item repeats or is skipped within an epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixedBatchSampler {
    batch_size: usize,
    rng: ChaCha8Rng,
    hq: EpochStream,
    lq: EpochStream,
}

impl MixedBatchSampler {
    pub fn new(hq_len: usize, lq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if hq_len == 0 {
            return Err(Error::Data("high-quality dataset is empty".into()));
        }
        if lq_len == 0 {
            return Err(Error::Data("low-quality dataset is empty".into()));
        }
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(contract(format!(
                "batch size {batch_size} cannot be split into equal HQ and LQ halves"
            )));
        }
        Ok(MixedBatchSampler {
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            hq: EpochStream::new(hq_len),
            lq: EpochStream::new(lq_len),
        })
    }

    pub fn half(&self) -> usize {
        self.batch_size / 2
    }

    /// Next `(hq_indices, lq_indices)`.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        let half = self.half();
        let h = self.hq.take(half, &mut self.rng);
        let l = self.lq.take(half, &mut self.rng);
        (h, l)
    }

    pub fn next_batch(&mut self, hq: &Dataset, lq: &Dataset) -> Result<QualityTieredBatch> {
        if hq.len() != self.hq.len || lq.len() != self.lq.len {
            return Err(contract("sampler was built for different dataset sizes"));
        }
        let (hi, li) = self.next_indices();
        Ok(QualityTieredBatch {
            hq_images: hq.tensor(&hi)?,
            hq_labels: hq.labels_of(&hi),
            lq_images: lq.tensor(&li)?,
            lq_labels: lq.labels_of(&li),
            hq_indices: hi,
            lq_indices: li,
        })
    }

    /// Exact `(hq, lq)` draw counts so far.
    pub fn draw_counts(&self) -> (u64, u64) {
        (self.hq.drawn, self.lq.drawn)
    }

    pub fn epochs(&self) -> (u64, u64) {
        (self.hq.epoch, self.lq.epoch)
    }
}

/// Class histogram, keyed by label index.
pub fn label_histogram(labels: &[usize]) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for &l in labels {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_examples() {
        let r = Resolution::square(2);
        let mut im = Image::filled(r, 0.0);
        for c in 0..3 {
            im.set(c, 1, 0, 2.0);
            im.set(c, 1, 1, 2.0);
        }
        let d = im.area_downsample(2).unwrap();
        assert_eq!(d.pixels, vec![1.0; 3]);
        assert_eq!(im.area_downsample(1).unwrap(), im);
        let c = Image::filled(Resolution::square(4), 0.3);
        assert!(c.area_downsample(4).unwrap().pixels.iter().all(|v| (*v - 0.3).abs() < 1e-7));
        assert!(matches!(im.area_downsample(3), Err(Error::Contract(_))));
    }

    #[test]
    fn normalization_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(denormalize(normalize(b)), b);
        }
    }

    #[test]
    fn manifest_parsing_reports_each_bad_line() {
        let text = "a.png\tcat\thq\n\n# comment\nb.png\tdog\nc.png\tcat\tmid\n";
        let problems = parse_manifest(text).unwrap_err();
        assert_eq!(problems.len(), 2);
        assert!(problems[0].starts_with("line 4"));
        assert!(problems[1].starts_with("line 5"));
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        assert!(matches!(MixedBatchSampler::new(4, 0, 4, 0), Err(Error::Data(_))));
        assert!(matches!(MixedBatchSampler::new(0, 4, 4, 0), Err(Error::Data(_))));
        assert!(matches!(MixedBatchSampler::new(4, 4, 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn sampler_is_seeded() {
        let mut a = MixedBatchSampler::new(10, 7, 4, 5).unwrap();
        let mut b = MixedBatchSampler::new(10, 7, 4, 5).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }
}
