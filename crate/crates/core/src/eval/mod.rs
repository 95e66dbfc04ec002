//! Nine-crop inference, confusion metrics and table rendering.

mod metrics;
mod multicrop;
mod report;

pub use metrics::{aggregate, metrics, Aggregate, ConfusionCounts, MetricMean, Metrics};
pub use multicrop::{
    average_probabilities, grid_offsets, nine_crops, predict_center, predict_multicrop, predicted_label,
    NUM_CROPS,
};
pub use report::{percent, render_table, FoldRecord, MetricsReport, RenderedTable, TableRow, TABLE_HEADER};

use crate::data::{AugmentationConfig, Sample};
use crate::error::Result;
use crate::nn::Model;
use crate::scalar::Scalar;

/// Nine-crop evaluation of labelled samples, tallied in input order.
pub fn evaluate_samples<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    aug: &AugmentationConfig,
) -> Result<(ConfusionCounts, Vec<[f64; 2]>)> {
    let mut probs = Vec::with_capacity(samples.len());
    for s in samples {
        probs.push(predict_multicrop(model, &s.image, aug)?);
    }
    let predicted: Vec<usize> = probs.iter().map(|p| predicted_label(*p)).collect();
    let actual: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok((ConfusionCounts::from_labels(&predicted, &actual)?, probs))
}
