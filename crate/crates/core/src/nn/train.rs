use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, BatchPlan, LabeledImageSet, CLASSES};
use crate::error::{Error, Result};
use crate::nn::network::{argmax_rows, nll_loss, ModelState, StepScratch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the supplied test set after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Shuffle seed of an epoch; continuing a run epoch by epoch reproduces
/// the same stream as one long run.
pub fn epoch_seed(seed: u64, epoch: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Run `config.epochs` further epochs of SGD with momentum. The model's
/// `meta.epoch` counts completed epochs across calls.
pub fn train(
    mut model: ModelState,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    config: &TrainConfig,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    config.validate()?;
    if model.meta.dataset.is_empty() {
        model.meta.dataset = train_set.name.clone();
    }
    model.meta.seed = config.seed;
    let mut history = Vec::with_capacity(config.epochs);
    let mut scratch = StepScratch::new(&model.arch);
    for _ in 0..config.epochs {
        let epoch = model.meta.epoch;
        let plan = BatchPlan::training(config.batch_size, epoch_seed(config.seed, epoch));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (bi, idx) in batch_indices(train_set.len(), &plan).iter().enumerate() {
            let (images, labels) = train_set.gather(idx);
            let (loss, step_correct) = model
                .batch_step_with(&images, &labels, &mut scratch)
                .map_err(|e| diverged(e, epoch, bi))?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: epoch as usize,
                    batch: bi,
                    layer: "loss".into(),
                });
            }
            loss_sum += loss as f64 * labels.len() as f64;
            model.sgd_momentum_step(&scratch.grads, config.learning_rate, config.momentum);
            correct += step_correct;
        }
        model.meta.epoch += 1;
        let test_accuracy = match (test_set, config.eval_each_epoch) {
            (Some(t), true) => Some(evaluate(&model, t, &BatchPlan::evaluation(32))?.overall_accuracy),
            _ => None,
        };
        history.push(EpochRecord {
            epoch: model.meta.epoch,
            train_loss: loss_sum / train_set.len().max(1) as f64,
            train_accuracy: correct as f64 / train_set.len().max(1) as f64,
            test_accuracy,
        });
    }
    Ok((model, history))
}

fn diverged(e: Error, epoch: u32, batch: usize) -> Error {
    match e {
        Error::NumericFailure { layer } => Error::TrainingDiverged {
            epoch: epoch as usize,
            batch,
            layer,
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Diagonal over row sums; 0 for classes absent from the test set.
    pub per_class_accuracy: [f64; CLASSES],
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; CLASSES]; CLASSES],
    pub misclassified_indices: Vec<usize>,
    pub mean_loss: f64,
    pub images: usize,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[u8], labels: &[u8], indices: &[usize], mean_loss: f64) -> Self {
        let mut confusion = [[0u64; CLASSES]; CLASSES];
        let mut misclassified = Vec::new();
        for ((&p, &l), &i) in predictions.iter().zip(labels).zip(indices) {
            confusion[l as usize][p as usize] += 1;
            if p != l {
                misclassified.push(i);
            }
        }
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..CLASSES).map(|c| confusion[c][c]).sum();
        let mut per_class = [0.0; CLASSES];
        for c in 0..CLASSES {
            let row: u64 = confusion[c].iter().sum();
            if row > 0 {
                per_class[c] = confusion[c][c] as f64 / row as f64;
            }
        }
        EvalReport {
            overall_accuracy: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
            per_class_accuracy: per_class,
            confusion,
            misclassified_indices: misclassified,
            mean_loss,
            images: predictions.len(),
        }
    }
}

/// Score the images the plan consumes (in plan order).
pub fn evaluate(model: &ModelState, test_set: &LabeledImageSet, plan: &BatchPlan) -> Result<EvalReport> {
    let indices: Vec<usize> = batch_indices(test_set.len(), plan).concat();
    let (images, labels) = test_set.gather(&indices);
    let out = model.forward(&images, crate::nn::network::Capture::NONE)?;
    let preds = argmax_rows(&out.log_probs, model.arch.classes);
    let loss = nll_loss(&out.log_probs, &labels, model.arch.classes) as f64;
    Ok(EvalReport::from_predictions(&preds, &labels, &indices, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Arch;
    use crate::nn::network::build_network;

    #[test]
    fn constant_predictor_report() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 10) as u8).collect();
        let preds = vec![4u8; 50];
        let idx: Vec<usize> = (0..50).collect();
        let r = EvalReport::from_predictions(&preds, &labels, &idx, 0.0);
        for c in 0..10 {
            assert_eq!(r.per_class_accuracy[c], if c == 4 { 1.0 } else { 0.0 });
            assert_eq!(r.confusion[c].iter().sum::<u64>(), 5);
        }
        assert_eq!(r.overall_accuracy, 0.1);
        assert_eq!(r.misclassified_indices.len(), 45);
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let m = build_network::<f32>(Arch::tiny(2, 4), 0);
        let set = LabeledImageSet::new("x", vec![0.0; 784 * 3], vec![1, 2, 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 0,
            ..TrainConfig::default()
        };
        let (after, hist) = train(m.clone(), &set, None, &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(after.params, m.params);
        assert_eq!(after.velocity, m.velocity);
    }

    #[test]
    fn invalid_config_rejected() {
        let c = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
