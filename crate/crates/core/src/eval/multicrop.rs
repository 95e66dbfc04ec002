use crate::data::{center_crop, image_to_input, AugmentationConfig, GrayImage};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_CROPS: usize = 9;
const EVAL_BATCH: usize = 16;

/// Offsets `{0, (E − crop)/2, E − crop}` along one axis of extent `E`.
pub fn grid_offsets(extent: usize, crop: usize) -> Result<[usize; 3]> {
    if crop == 0 || crop > extent {
        return Err(Error::invalid("nine_crops", format!("crop {crop} does not fit extent {extent}")));
    }
    let span = extent - crop;
    Ok([0, span / 2, span])
}

/// The 3×3 grid of unscaled crops, row by row (y outer, x inner).
pub fn nine_crops(image: &GrayImage, crop: usize) -> Result<Vec<GrayImage>> {
    let xs = grid_offsets(image.width, crop)?;
    let ys = grid_offsets(image.height, crop)?;
    let mut crops = Vec::with_capacity(NUM_CROPS);
    for &y in &ys {
        for &x in &xs {
            crops.push(image.window(x, y, crop, crop)?);
        }
    }
    Ok(crops)
}

/// Arithmetic mean of per-crop class probabilities, summed left to right.
pub fn average_probabilities(per_crop: &[[f64; 2]]) -> [f64; 2] {
    let n = per_crop.len() as f64;
    let mut sum = [0.0; 2];
    for p in per_crop {
        sum[0] += p[0];
        sum[1] += p[1];
    }
    [sum[0] / n, sum[1] / n]
}

/// Positive iff the positive-class probability is at least 0.5.
pub fn predicted_label(probs: [f64; 2]) -> usize {
    usize::from(probs[1] >= 0.5)
}

fn require_binary<T: Scalar>(model: &Model<T>) -> Result<()> {
    if model.num_classes() != 2 {
        return Err(Error::invalid(
            "predict",
            format!("model head has {} outputs, expected 2", model.num_classes()),
        ));
    }
    Ok(())
}

/// Softmax probabilities for a batch of crops, in eval mode.
fn crop_probabilities<T: Scalar>(
    model: &mut Model<T>,
    crops: &[GrayImage],
    aug: &AugmentationConfig,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(EVAL_BATCH) {
        let inputs = chunk
            .iter()
            .map(|c| image_to_input::<T>(c, aug.standardize.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.logits(&Tensor::stack(&inputs)?, Mode::Eval)?;
        for row in logits.data().chunks(2) {
            let (a, b) = (row[0].to_f64_lossy(), row[1].to_f64_lossy());
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            out.push([ea / (ea + eb), eb / (ea + eb)]);
        }
    }
    Ok(out)
}

/// Nine-crop prediction for one image: crops at `aug.crop`, no random
/// transforms, probabilities averaged.
pub fn predict_multicrop<T: Scalar>(
    model: &mut Model<T>,
    image: &GrayImage,
    aug: &AugmentationConfig,
) -> Result<[f64; 2]> {
    require_binary(model)?;
    let crops = nine_crops(image, aug.crop)?;
    Ok(average_probabilities(&crop_probabilities(model, &crops, aug)?))
}

/// Single centre-crop probabilities for many images.
pub fn predict_center<'a, T: Scalar>(
    model: &mut Model<T>,
    images: impl IntoIterator<Item = &'a GrayImage>,
    aug: &AugmentationConfig,
) -> Result<Vec<[f64; 2]>> {
    require_binary(model)?;
    let crops = images
        .into_iter()
        .map(|im| center_crop(im, aug.crop))
        .collect::<Result<Vec<_>>>()?;
    crop_probabilities(model, &crops, aug)
}
