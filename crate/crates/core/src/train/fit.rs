use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::seeds::SeedStreams;
use crate::data::{augment, image_to_input, AugmentationConfig, Sample};
use crate::error::{Error, Result};
use crate::eval::predict_center;
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Start from imported weights and update all of them.
    Finetune,
    /// Start from random initialization.
    Scratch,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Finetune => "TL",
            TrainMode::Scratch => "SRC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub mode: TrainMode,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 40,
            epochs: 125,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            mode: TrainMode::Scratch,
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "train config";
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(OP, format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(OP, "batch size and epochs must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(OP, format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid(OP, "epsilon must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses over the epoch.
    pub train_loss: f64,
    /// Single centre-crop accuracy on the validation set, if one was given.
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

/// Resets `order` to the identity and shuffles it, so each epoch's order
/// depends only on the generator state.
fn epoch_order<R: rand::Rng>(order: &mut [usize], rng: &mut R) {
    for (i, v) in order.iter_mut().enumerate() {
        *v = i;
    }
    order.shuffle(rng);
}

/// Mini-batch Adam over shuffled epochs; the last short batch is kept.
///
/// `streams` supplies the `shuffle` and `augment` generators.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    streams: &SeedStreams,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, aug, streams, |_| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    streams: &SeedStreams,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.label >= model.num_classes()) {
        return Err(Error::invalid(
            "train",
            format!("label {} outside the model's {} classes", s.label, model.num_classes()),
        ));
    }
    let first = &train_set[0].image;
    aug.validate((first.width, first.height))?;

    let mut shuffle = streams.rng("shuffle");
    let mut augment_rng = streams.rng("augment");
    let mut adam = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        epoch_order(&mut order, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let crop = augment(&train_set[i].image, aug, &mut augment_rng)?;
                inputs.push(image_to_input::<T>(&crop, aug.standardize.as_ref())?);
                targets.push(train_set[i].label);
            }
            let input = Tensor::stack(&inputs)?;
            let loss = model.loss_and_grads(&input, &targets)?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::invalid(
                    "train",
                    format!("non-finite loss {loss} at epoch {epoch}, step {}", steps + 1),
                ));
            }
            adam.step(model)?;
            loss_sum += loss;
            batches += 1;
            steps += 1;
        }
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            let probs = predict_center(model, val_set.iter().map(|s| &s.image), aug)?;
            let correct = probs
                .iter()
                .zip(val_set)
                .filter(|(p, s)| usize::from(p[1] >= 0.5) == s.label)
                .count();
            Some(correct as f64 / val_set.len() as f64)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy,
        };
        log::debug!("epoch {epoch}: loss {:.5} val {:?}", record.train_loss, record.val_accuracy);
        on_epoch(&record)?;
        log.push(record);
    }
    model.zero_grads();
    Ok(TrainOutcome { log, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_epoch_is_a_permutation() {
        let mut rng = SeedStreams::new(3).rng("shuffle");
        let mut order = vec![0; 37];
        let mut seen = Vec::new();
        for _ in 0..5 {
            epoch_order(&mut order, &mut rng);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..37).collect::<Vec<_>>());
            seen.push(order.clone());
        }
        seen.dedup();
        assert!(seen.len() > 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
            TrainConfig { epsilon: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
