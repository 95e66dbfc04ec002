//! Synthetic stand-in dataset with two separable texture families.
//!
//! Each tissue label maps to a frequency band: smooth (low-pass) noise or
//! fine-grained (high-pass) noise. Every task pairs one band against the
//! other. Subjects get their own amplitude and brightness jitter, so a model
//! has to generalize across subjects rather than memorize intensity.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use super::manifest::{DatasetManifest, Record, TissueClass};
use crate::error::{Error, Result};
use crate::train::SeedStreams;

const LOW_PASS_SIGMA: f64 = 2.5;
const HIGH_PASS_SIGMA: f64 = 1.0;
const BASE_AMPLITUDE: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// `(subject id, class)` pairs to leave out, e.g. to mimic a subject
    /// without any HC images.
    #[serde(default)]
    pub omit: Vec<(String, TissueClass)>,
}

impl SynthConfig {
    pub fn new(subjects: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            subjects,
            per_class,
            size,
            seed,
            omit: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

pub fn band_of(class: TissueClass) -> Band {
    match class {
        TissueClass::HC | TissueClass::MP => Band::Low,
        TissueClass::MC | TissueClass::HP => Band::High,
    }
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

/// Generates records and images in memory.
pub fn synthesize_images(cfg: &SynthConfig) -> Result<Vec<(Record, GrayImage)>> {
    if cfg.subjects < 2 {
        return Err(Error::invalid(
            "synthesize_dataset",
            format!("need at least 2 subjects for leave-one-subject-out, got {}", cfg.subjects),
        ));
    }
    if cfg.size < 8 {
        return Err(Error::invalid("synthesize_dataset", format!("image size {} too small", cfg.size)));
    }
    let streams = SeedStreams::new(cfg.seed);
    let mut out = Vec::new();
    for s in 0..cfg.subjects {
        let subject = subject_id(s);
        let scoped = streams.for_fold(&subject);
        let mut jitter = scoped.rng("synth/subject");
        let subject_gain = jitter.random_range(0.7..1.3);
        let subject_offset = jitter.random_range(-0.05..0.05);
        for class in TissueClass::ALL {
            if cfg.omit.iter().any(|(os, oc)| *os == subject && *oc == class) {
                continue;
            }
            for i in 0..cfg.per_class {
                let mut rng = scoped.rng(&format!("synth/{class}/{i}"));
                let gain = subject_gain * rng.random_range(0.9..1.1);
                let image = texture(cfg.size, band_of(class), gain * BASE_AMPLITUDE, 0.5 + subject_offset, &mut rng);
                let record = Record {
                    path: format!("images/{subject}/{class}_{i:03}.png").into(),
                    subject: subject.clone(),
                    class,
                };
                out.push((record, image));
            }
        }
    }
    Ok(out)
}

/// Generates the dataset and writes `manifest.tsv` plus 16-bit PNGs under
/// `out_dir`.
pub fn synthesize_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let items = synthesize_images(cfg)?;
    for (record, image) in &items {
        let path = out_dir.join(&record.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image.save_png16(&path)?;
    }
    let records = items.into_iter().map(|(r, _)| r).collect();
    let manifest = DatasetManifest::from_records(out_dir, (cfg.size, cfg.size), records)?;
    let index = out_dir.join("manifest.tsv");
    std::fs::write(&index, manifest.render()).map_err(|e| Error::io(&index, e))?;
    Ok(manifest)
}

fn texture<R: Rng>(size: usize, band: Band, amplitude: f64, mean: f64, rng: &mut R) -> GrayImage {
    let noise: Vec<f64> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    let mut field = match band {
        Band::Low => gaussian_blur(&noise, size, LOW_PASS_SIGMA),
        Band::High => {
            let smooth = gaussian_blur(&noise, size, HIGH_PASS_SIGMA);
            noise.iter().zip(&smooth).map(|(n, s)| n - s).collect()
        }
    };
    let n = field.len() as f64;
    let mu = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    for v in &mut field {
        *v = mean + amplitude * (*v - mu) / sd;
    }
    let pixels = field.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    GrayImage::new(size, size, pixels).expect("square image")
}

/// Separable Gaussian blur with mirrored borders.
fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let mirror = |i: isize| -> usize {
        let n = size as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[y * size + mirror(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[mirror(y as isize + k as isize - radius) * size + x])
                .sum();
        }
    }
    out
}
