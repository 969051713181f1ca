//! Masked-character and next-sentence pretraining.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::{is_special, Vocabulary, MASK, RESERVED};
use super::EncoderModel;
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Gradients;
use crate::rng::{self, ModelRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    /// (position, original token id) for every selected position.
    pub targets: Vec<(usize, usize)>,
}

/// Selects `rate·n` of the `n` non-special positions (stochastically rounded,
/// so the expected fraction is exactly `rate`) and corrupts each selected
/// position: 80% become MASK, 10% a random character, 10% stay unchanged.
pub fn mask_for_mlm(tokens: &[usize], rate: f64, vocab_size: usize, rng: &mut impl Rng) -> Result<MaskedSequence> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(alloc::format!("mask rate {rate} outside (0, 1)")));
    }
    let mut candidates: Vec<usize> = (0..tokens.len()).filter(|&i| !is_special(tokens[i])).collect();
    if candidates.is_empty() {
        return Err(Error::NothingToMask);
    }
    let expected = rate * candidates.len() as f64;
    let mut count = libm::floor(expected) as usize;
    if rng.gen::<f64>() < expected - count as f64 {
        count += 1;
    }
    candidates.shuffle(rng);
    let mut selected = candidates[..count].to_vec();
    selected.sort_unstable();

    let mut out = tokens.to_vec();
    let mut targets = Vec::with_capacity(count);
    for pos in selected {
        targets.push((pos, tokens[pos]));
        let u: f64 = rng.gen();
        if u < 0.8 {
            out[pos] = MASK;
        } else if u < 0.9 && vocab_size > RESERVED {
            out[pos] = rng.gen_range(RESERVED..vocab_size);
        }
    }
    Ok(MaskedSequence { tokens: out, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Probability that the second sentence is swapped for a random one.
    pub negative_rate: f64,
    pub adam: AdamConfig,
    /// Pairs held out of training for the per-epoch metrics.
    pub eval_pairs: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            mask_rate: 0.15,
            negative_rate: 0.5,
            adam: AdamConfig::with_lr(1e-3),
            eval_pairs: 256,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainMetrics {
    pub mlm_loss: f64,
    pub mlm_accuracy: f64,
    pub nsp_loss: f64,
    pub nsp_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean training losses over the epoch (eval losses for epoch 0).
    pub train_mlm_loss: f64,
    pub train_nsp_loss: f64,
    pub eval: PretrainMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Epoch 0 is the untrained model.
    pub history: Vec<PretrainEpoch>,
}

impl PretrainReport {
    pub fn initial(&self) -> &PretrainMetrics {
        &self.history[0].eval
    }

    pub fn last(&self) -> &PretrainMetrics {
        &self.history[self.history.len() - 1].eval
    }
}

/// One NSP example: token sequence, masked targets, is-next label (1 = next).
struct Example {
    masked: MaskedSequence,
    is_next: usize,
}

fn build_examples(
    pairs: &[(Vec<usize>, Vec<usize>)],
    indices: &[usize],
    cfg: &PretrainConfig,
    vocab_size: usize,
    r: &mut ModelRng,
) -> Result<Vec<Example>> {
    indices
        .iter()
        .map(|&i| {
            let (a, b) = &pairs[i];
            let mut is_next = 1;
            let mut second = b;
            if pairs.len() > 1 && r.gen::<f64>() < cfg.negative_rate {
                let mut j = r.gen_range(0..pairs.len() - 1);
                if j >= i {
                    j += 1;
                }
                second = &pairs[j].1;
                is_next = 0;
            }
            let tokens = Vocabulary::encode_pair(a, second);
            Ok(Example {
                masked: mask_for_mlm(&tokens, cfg.mask_rate, vocab_size, r)?,
                is_next,
            })
        })
        .collect()
}

struct ExampleLoss {
    mlm: Option<f64>,
    nsp: f64,
}

fn example_loss<'p>(
    model: &'p EncoderModel,
    g: &mut Graph<'p>,
    ex: &Example,
) -> Result<(crate::graph::Var, ExampleLoss)> {
    let pass = model.forward(g, &ex.masked.tokens, None)?;
    let nsp_logits = model.nsp_logits(g, pass.features)?;
    let nsp = g.softmax_cross_entropy(nsp_logits, ex.is_next)?;
    let nsp_value = g.scalar(nsp);
    if ex.masked.targets.is_empty() {
        return Ok((
            nsp,
            ExampleLoss {
                mlm: None,
                nsp: nsp_value,
            },
        ));
    }
    let positions: Vec<usize> = ex.masked.targets.iter().map(|t| t.0).collect();
    let labels: Vec<usize> = ex.masked.targets.iter().map(|t| t.1).collect();
    let logits = model.mlm_logits(g, pass.features, &positions)?;
    let mlm = g.softmax_cross_entropy_rows(logits, &labels)?;
    let mlm_value = g.scalar(mlm);
    let total = g.add(mlm, nsp)?;
    Ok((
        total,
        ExampleLoss {
            mlm: Some(mlm_value),
            nsp: nsp_value,
        },
    ))
}

/// Inference-mode metrics over `pairs` with a fixed masking/negative draw.
pub fn evaluate_pretraining(
    model: &EncoderModel,
    pairs: &[(Vec<usize>, Vec<usize>)],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut r = rng::rng(seed);
    let indices: Vec<usize> = (0..pairs.len()).collect();
    let examples = build_examples(pairs, &indices, cfg, model.config.vocab_size, &mut r)?;
    let (mut mlm_sum, mut mlm_hits, mut mlm_n) = (0.0, 0usize, 0usize);
    let (mut nsp_sum, mut nsp_hits) = (0.0, 0usize);
    for ex in &examples {
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &ex.masked.tokens, None)?;
        let nsp_logits = model.nsp_logits(&mut g, pass.features)?;
        let p = softmax(g.value(nsp_logits));
        nsp_sum -= libm::log(p[ex.is_next].max(f64::MIN_POSITIVE));
        if (p[1] > p[0]) == (ex.is_next == 1) {
            nsp_hits += 1;
        }
        if ex.masked.targets.is_empty() {
            continue;
        }
        let positions: Vec<usize> = ex.masked.targets.iter().map(|t| t.0).collect();
        let logits = model.mlm_logits(&mut g, pass.features, &positions)?;
        let logits = g.tensor(logits);
        for (row, &(_, label)) in ex.masked.targets.iter().enumerate() {
            let p = softmax(logits.row(row));
            mlm_sum -= libm::log(p[label].max(f64::MIN_POSITIVE));
            if argmax(&p) == label {
                mlm_hits += 1;
            }
            mlm_n += 1;
        }
    }
    let n = examples.len() as f64;
    let m = mlm_n.max(1) as f64;
    Ok(PretrainMetrics {
        mlm_loss: mlm_sum / m,
        mlm_accuracy: mlm_hits as f64 / m,
        nsp_loss: nsp_sum / n,
        nsp_accuracy: nsp_hits as f64 / n,
    })
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Trains every encoder parameter on MLM + NSP. The last `eval_pairs` pairs
/// (after a seeded shuffle) are held out for the per-epoch metrics.
pub fn pretrain(
    model: &mut EncoderModel,
    pairs: &[(Vec<usize>, Vec<usize>)],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut r = rng::rng(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut r);
    let held = cfg.eval_pairs.min(pairs.len() / 2).max(1).min(pairs.len());
    let (train_idx, eval_idx) = order.split_at(pairs.len() - held);
    let train_idx = if train_idx.is_empty() { eval_idx } else { train_idx };
    let eval_set: Vec<(Vec<usize>, Vec<usize>)> = eval_idx.iter().map(|&i| pairs[i].clone()).collect();
    let eval_seed = rng::derive_seed(cfg.seed, 1);

    model.unfreeze();
    let initial = evaluate_pretraining(model, &eval_set, cfg, eval_seed)?;
    let mut history = alloc::vec![PretrainEpoch {
        epoch: 0,
        train_mlm_loss: initial.mlm_loss,
        train_nsp_loss: initial.nsp_loss,
        eval: initial,
    }];
    let mut adam = AdamState::new(cfg.adam, model.params());
    let mut grads = Gradients::zeros_for(model.params());
    let mut epoch_order = train_idx.to_vec();

    for epoch in 1..=cfg.epochs {
        epoch_order.shuffle(&mut r);
        let examples = build_examples(pairs, &epoch_order, cfg, model.config.vocab_size, &mut r)?;
        let (mut mlm_sum, mut mlm_n, mut nsp_sum) = (0.0, 0usize, 0.0);
        for batch in examples.chunks(cfg.batch_size) {
            for ex in batch {
                let mut g = Graph::training(rng::rng(r.gen()));
                let (loss, parts) = example_loss(model, &mut g, ex)?;
                g.backward(loss)?;
                g.accumulate(model.params(), &mut grads);
                nsp_sum += parts.nsp;
                if let Some(m) = parts.mlm {
                    mlm_sum += m;
                    mlm_n += 1;
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(c) = cfg.clip_norm {
                grads.clip_norm(c);
            }
            adam.step(model.params_mut(), &mut grads)?;
        }
        let eval = evaluate_pretraining(model, &eval_set, cfg, eval_seed)?;
        history.push(PretrainEpoch {
            epoch,
            train_mlm_loss: mlm_sum / mlm_n.max(1) as f64,
            train_nsp_loss: nsp_sum / examples.len() as f64,
            eval,
        });
    }
    Ok(PretrainReport { history })
}
