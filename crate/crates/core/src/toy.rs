//! Synthetic two-class corpus used by the smoke runs and the CLI's
//! `make-toy` command: sinusoidal stripes and concentric rings with
//! random orientation, frequency, phase and colours.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_lq_from_hq, normalize, Corpus, Dataset, Image, LabelSpaces, Tier};
use crate::error::{Error, Result};
use crate::spectral::Resolution;

pub const HQ_CLASSES: [&str; 2] = ["stripes", "rings"];
pub const LQ_CLASSES: [&str; 2] = ["lq-stripes", "lq-rings"];

pub fn label_spaces() -> LabelSpaces {
    LabelSpaces::new(
        HQ_CLASSES.iter().map(|s| s.to_string()).collect(),
        LQ_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("toy label spaces are nonempty")
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One image of class `label` (0 stripes, 1 rings), quantised to 8 bits so
/// it survives a PNG round trip unchanged.
pub fn render(label: usize, side: usize, rng: &mut ChaCha8Rng) -> Image {
    let a = color(rng);
    let b = color(rng);
    let phase = rng.random_range(0.0..2.0 * PI);
    let s = side as f32;
    let field: Box<dyn Fn(f32, f32) -> f32> = if label == 0 {
        let angle = rng.random_range(0.0..PI);
        let cycles = rng.random_range(2.0..4.0f32);
        let (dx, dy) = (angle.cos(), angle.sin());
        Box::new(move |x, y| (2.0 * PI * cycles * (x * dx + y * dy) / s + phase).sin())
    } else {
        let cx = s * rng.random_range(0.35..0.65f32);
        let cy = s * rng.random_range(0.35..0.65f32);
        let cycles = rng.random_range(2.0..3.5f32);
        Box::new(move |x, y| {
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            (2.0 * PI * cycles * r / s + phase).sin()
        })
    };
    let mut img = Image::filled(Resolution::square(side), 0.0);
    for y in 0..side {
        for x in 0..side {
            let t = 0.5 + 0.5 * field(x as f32 + 0.5, y as f32 + 0.5);
            for c in 0..3 {
                let v = a[c] * t + b[c] * (1.0 - t);
                img.set(c, y, x, normalize((v * 255.0).round().clamp(0.0, 255.0) as u8));
            }
        }
    }
    img
}

fn draw(per_class: usize, side: usize, rng: &mut ChaCha8Rng) -> (Vec<Image>, Vec<usize>) {
    let mut images = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = i % 2;
        images.push(render(label, side, rng));
        labels.push(label);
    }
    (images, labels)
}

/// HQ images at `hq_side` and their area-downsampled (by `factor`)
/// versions as the LQ set.
pub fn toy_corpus(per_class: usize, hq_side: usize, factor: usize, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hq_images, hq_labels) = draw(per_class, hq_side, &mut rng);
    let hq = Dataset::new(Tier::Hq, Resolution::square(hq_side), hq_images, hq_labels)?;
    let lq = make_lq_from_hq(&hq, factor)?;
    // quantise so the in-memory corpus equals what a PNG export reloads
    let lq = Dataset::new(
        Tier::Lq,
        lq.resolution,
        lq.images.iter().map(|im| Image::from_rgb8(&im.to_rgb8())).collect(),
        lq.labels,
    )?;
    Ok(Corpus {
        labels: label_spaces(),
        hq,
        lq,
    })
}

/// Writes a corpus as PNG files plus a manifest; returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let mut manifest = String::new();
    for (tier, set) in [(Tier::Hq, &corpus.hq), (Tier::Lq, &corpus.lq)] {
        let tag = match tier {
            Tier::Hq => "hq",
            Tier::Lq => "lq",
        };
        let sub = dir.join(tag);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
            let rel = format!("{tag}/{i:05}.png");
            let path = dir.join(&rel);
            img.to_rgb8()
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
            manifest.push_str(&format!("{rel}\t{}\t{tag}\n", corpus.labels.names(tier)[label]));
        }
    }
    let path = dir.join("manifest.tsv");
    crate::io::write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = toy_corpus(3, 16, 4, 1).unwrap();
        let b = toy_corpus(3, 16, 4, 1).unwrap();
        assert_eq!(a.hq.images, b.hq.images);
        assert_eq!(a.hq.labels, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(a.lq.resolution, Resolution::square(4));
        assert_ne!(a.hq.images[0], a.hq.images[2]);
        assert_eq!(a.lq.labels, a.hq.labels);
        for (hq, lq) in a.hq.images.iter().zip(&a.lq.images) {
            let direct = hq.area_downsample(4).unwrap();
            // within half an 8-bit step of the exact average
            let worst = direct.pixels.iter().zip(&lq.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
        }
    }

    #[test]
    fn exported_corpus_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = toy_corpus(2, 16, 2, 5).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let back = crate::data::load_corpus(&manifest, &corpus.labels, Resolution::square(16), Resolution::square(8)).unwrap();
        assert_eq!(back.hq.images, corpus.hq.images);
        assert_eq!(back.lq.images, corpus.lq.images);
        assert_eq!(back.lq.labels, corpus.lq.labels);
    }
}
