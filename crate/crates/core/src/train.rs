//! Mini-batch SGD producing the pre-trained model and per-task experts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::model::{accumulate_gradient, argmax, cross_entropy, init_params, representation_unchecked, ModelSpec};
use crate::suite::{Sample, TaskDataset, TaskSuite};

const MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be ≥ 1".into()));
        }
        // zero is allowed: it turns fine-tuning into the identity
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    /// Accuracy on the held-out split after the last epoch.
    pub test_accuracy: f64,
}

impl TrainReport {
    /// `epoch,split,loss,accuracy` rows with 6-decimal values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for r in &self.curve {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.epoch, r.split, r.loss, r.accuracy
            ));
        }
        out
    }

    /// Mean training loss accumulated during `epoch` (1-based).
    pub fn train_loss(&self, epoch: usize) -> Option<f64> {
        self.curve
            .iter()
            .find(|r| r.epoch == epoch && r.split == "train")
            .map(|r| r.loss)
    }
}

/// Mean cross-entropy and accuracy of `params` over `samples`.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, samples: &[&Sample]) -> Result<(f64, f64)> {
    spec.check_params(params)?;
    if samples.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty sample set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        if s.x.len() != spec.input_dim() || s.y >= spec.num_classes() {
            return Err(Error::Structural(format!(
                "sample ({} features, label {}) does not fit the model",
                s.x.len(),
                s.y
            )));
        }
        let logits = representation_unchecked(spec, params.values(), &s.x, spec.depth());
        loss += cross_entropy(&logits.values, s.y);
        correct += usize::from(argmax(&logits.values) == s.y);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Runs `cfg.epochs` of SGD on `train` starting from `params`.
pub fn train(
    spec: &ModelSpec,
    mut params: ParamVector,
    train: &[&Sample],
    test: &[&Sample],
    cfg: &TrainConfig,
) -> Result<(ParamVector, TrainReport)> {
    cfg.validate()?;
    spec.check_params(&params)?;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    // validates sample shapes up front
    evaluate(spec, &params, train)?;

    let p = params.len();
    let mut grad = vec![0.0f64; p];
    let mut velocity = vec![0.0f32; p];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        // shuffle stream keyed by (seed, epoch)
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = train[i];
                let (loss, predicted) =
                    accumulate_gradient(spec, params.values(), &s.x, s.y, scale, &mut grad);
                epoch_loss += loss;
                epoch_correct += usize::from(predicted == s.y);
            }
            if !epoch_loss.is_finite() {
                return Err(diverged(epoch, cfg));
            }
            let lr = cfg.learning_rate;
            for ((w, v), g) in params.values_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                let g = *g as f32;
                *v = match cfg.optimizer {
                    Optimizer::Sgd => g,
                    Optimizer::SgdMomentum => MOMENTUM * *v + g,
                };
                *w -= lr * *v;
            }
        }
        if params.check_finite().is_err() {
            return Err(diverged(epoch, cfg));
        }
        let n = train.len() as f64;
        report.curve.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / n,
            accuracy: epoch_correct as f64 / n,
        });
        if !test.is_empty() {
            let (loss, accuracy) = evaluate(spec, &params, test)?;
            report.curve.push(EpochRecord {
                epoch,
                split: "test".into(),
                loss,
                accuracy,
            });
            report.test_accuracy = accuracy;
        }
    }
    Ok((params, report))
}

fn diverged(epoch: usize, cfg: &TrainConfig) -> Error {
    Error::Training(format!(
        "non-finite loss or parameters in epoch {epoch} at learning_rate {}; try a smaller learning_rate",
        cfg.learning_rate
    ))
}

/// Trains `θ_PT` from `init_params(spec, cfg.seed)` on the union of all tasks.
pub fn pretrain(spec: &ModelSpec, suite: &TaskSuite, cfg: &TrainConfig) -> Result<(ParamVector, TrainReport)> {
    cfg.validate()?;
    check_suite(spec, suite)?;
    let init = init_params(spec, cfg.seed);
    train(spec, init, &suite.union_train(), &suite.union_test(), cfg)
}

/// Fine-tunes `θ_PT` on one task's train split.
pub fn finetune(
    spec: &ModelSpec,
    base: &ParamVector,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<(ParamVector, TrainReport)> {
    let train_set: Vec<&Sample> = task.train.iter().collect();
    let test_set: Vec<&Sample> = task.test.iter().collect();
    self::train(spec, base.clone(), &train_set, &test_set, cfg)
}

pub fn check_suite(spec: &ModelSpec, suite: &TaskSuite) -> Result<()> {
    if spec.input_dim() != suite.dim() || spec.num_classes() != suite.classes() {
        return Err(Error::Structural(format!(
            "model maps {}→{} but the suite has d={} and c={}",
            spec.input_dim(),
            spec.num_classes(),
            suite.dim(),
            suite.classes()
        )));
    }
    Ok(())
}
