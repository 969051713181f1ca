//! Minibatch training with dev-set early stopping, shared by the heads and
//! the baseline.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var};
use crate::heads::{argmax, HeadConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Gradients, ParamStore};
use crate::rng;

/// A classifier producing logits over a per-item label set.
pub trait Trainable {
    type Item;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Gold label index of `item`, or an error if it has no valid label.
    fn label_index(&self, item: &Self::Item) -> Result<usize>;
    /// 1×n logits for `item`.
    fn logits<'p>(&'p self, g: &mut Graph<'p>, item: &Self::Item) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 32, patience 5, the head's default optimizer.
    pub fn for_head(config: &HeadConfig, seed: u64) -> Self {
        Self {
            max_epochs: 30,
            batch_size: 32,
            patience: 5,
            adam: config.optimizer(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Epoch 0 is the untrained model.
    pub history: Vec<TrainEpoch>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

fn probabilities<M: Trainable>(model: &M, item: &M::Item) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let logits = model.logits(&mut g, item)?;
    Ok(softmax(g.value(logits)))
}

/// Mean cross-entropy in inference mode.
pub fn mean_loss<M: Trainable>(model: &M, set: &[M::Item]) -> Result<f64> {
    let mut total = 0.0;
    for x in set {
        let y = model.label_index(x)?;
        let p = probabilities(model, x)?;
        total -= libm::log(p[y].max(f64::MIN_POSITIVE));
    }
    Ok(total / set.len().max(1) as f64)
}

/// Fraction of items whose argmax equals the gold label.
pub fn accuracy<M: Trainable>(model: &M, set: &[M::Item]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty set".into()));
    }
    let mut hits = 0;
    for x in set {
        if argmax(&probabilities(model, x)?) == model.label_index(x)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Adam on mean cross-entropy; stops after `patience` epochs without a dev
/// improvement and restores the best-dev parameters.
pub fn fit<M: Trainable>(model: &mut M, train: &[M::Item], dev: &[M::Item], cfg: &TrainConfig) -> Result<TrainReport> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let labels = train.iter().map(|x| model.label_index(x)).collect::<Result<Vec<_>>>()?;
    for x in dev {
        model.label_index(x)?;
    }

    let mut r = rng::rng(cfg.seed);
    let initial_dev = accuracy(model, dev)?;
    let mut history = alloc::vec![TrainEpoch {
        epoch: 0,
        train_loss: mean_loss(model, train)?,
        dev_accuracy: initial_dev,
    }];
    let mut best = (0, initial_dev, model.params().snapshot());
    let mut adam = AdamState::new(cfg.adam, model.params());
    let mut grads = Gradients::zeros_for(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &k in batch {
                let mut g = Graph::training(rng::rng(r.gen()));
                let logits = model.logits(&mut g, &train[k])?;
                let loss = g.softmax_cross_entropy(logits, labels[k])?;
                loss_sum += g.scalar(loss);
                g.backward(loss)?;
                g.accumulate(model.params(), &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.params_mut(), &mut grads)?;
        }
        let dev_accuracy = accuracy(model, dev)?;
        history.push(TrainEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_accuracy,
        });
        if dev_accuracy > best.1 {
            best = (epoch, dev_accuracy, model.params().snapshot());
        } else if epoch - best.0 >= cfg.patience {
            break;
        }
    }
    model.params_mut().restore(&best.2);
    Ok(TrainReport {
        history,
        best_epoch: best.0,
        best_dev_accuracy: best.1,
    })
}
