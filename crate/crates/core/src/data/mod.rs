//! Dataset manifest, binary tasks, leave-one-subject-out folds,
//! augmentation and the synthetic dataset generator.

mod augment;
mod folds;
mod image;
mod manifest;
mod synth;
mod task;

pub use augment::{
    augment, center_crop, image_to_input, photometric, to_three_channel, AugmentParams, AugmentationConfig,
    Standardization,
};
pub use folds::{loso_folds, Fold, FoldPlan};
pub use image::{probe, GrayImage};
pub use manifest::{load_manifest, DatasetManifest, Record, TissueClass, DEFAULT_GEOMETRY};
pub use synth::{band_of, subject_id, synthesize_dataset, synthesize_images, Band, SynthConfig};
pub use task::{select_task, LabeledRecord, Task, TaskSpec, TaskSubset};

/// An image with its binary label, ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
}

/// Decodes the images behind `records`.
pub fn load_samples(manifest: &DatasetManifest, records: &[&LabeledRecord]) -> crate::Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            Ok(Sample {
                image: GrayImage::load(&manifest.resolve(&r.record))?,
                label: r.label,
            })
        })
        .collect()
}
