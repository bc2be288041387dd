//! Plain cross-entropy training of the encoder/classifier pair, optionally
//! with one group frozen. Used by the decoupling study and the end-to-end
//! baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::credibility::{accuracy, EpochAccuracy};
use crate::data::LabeledDataset;
use crate::numnet::{
    cosine_lr, grad, one_hot_matrix, predict, tape_cross_entropy, MlpParams, OptState, Trainable,
};
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Clean,
    Noisy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size at the start of the cosine schedule.
    pub learning_rate: f64,
    pub eta_min: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            learning_rate: 3e-3,
            eta_min: 2e-4,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "supervised epochs and batch_size must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.learning_rate)
        {
            return Err(Error::InvalidConfig(
                "supervised learning rates must satisfy 0 ≤ eta_min ≤ lr, lr > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Minimizes cross-entropy on `labels` of `train`, updating only the
/// `trainable` groups, and records per-epoch accuracy on the training
/// labels and on the clean test labels.
pub fn train_supervised(
    params: &mut MlpParams,
    trainable: Trainable,
    train: &LabeledDataset,
    labels: LabelSource,
    test: &LabeledDataset,
    config: &SupervisedConfig,
    seed: u64,
) -> Result<Vec<EpochAccuracy>> {
    config.validate()?;
    params.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty(
            "supervised training needs train and test samples".into(),
        ));
    }
    let y = match labels {
        LabelSource::Clean => &train.y_clean,
        LabelSource::Noisy => &train.y_noisy,
    };
    let targets = one_hot_matrix(y, train.classes);
    let mut rng = seeded_rng(seed);
    let mut opt = OptState::adam(config.learning_rate)?;
    let n = train.len();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = train.x.select_rows(chunk);
            let t = targets.select_rows(chunk);
            let (_, g) = grad(params, trainable, |tape, net| {
                let input = tape.constant(x);
                let (_, logits) = net.forward(tape, input)?;
                tape_cross_entropy(tape, logits, &t)
            })?;
            opt.set_learning_rate(
                cosine_lr(step, total, config.learning_rate, config.eta_min)?
                    .max(f64::MIN_POSITIVE),
            )?;
            opt.step(params, &g)?;
            step += 1;
        }
        log.push(EpochAccuracy {
            epoch,
            train: accuracy(&predict(&params.probabilities(&train.x)?), y),
            test: Some(accuracy(
                &predict(&params.probabilities(&test.x)?),
                &test.y_clean,
            )),
        });
    }
    Ok(log)
}
