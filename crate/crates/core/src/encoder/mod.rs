//! Mini BERT-style encoder: character and learned positional embeddings
//! feeding a stack of post-norm transformer blocks, with masked-character and
//! next-sentence heads for pretraining.

mod pretrain;
mod vocab;

pub use pretrain::{
    evaluate_pretraining, mask_for_mlm, pretrain, MaskedSequence, PretrainConfig, PretrainEpoch, PretrainMetrics,
    PretrainReport,
};
pub use vocab::{is_special, Vocabulary, CLS, MASK, PAD, RESERVED, SEP, UNK};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_tensor, Init, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// d=64, L=2, h=4, ff=256, maxlen=64, no dropout.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            layers: 2,
            heads: 4,
            ff_width: 256,
            max_len: 64,
            dropout: 0.0,
        }
    }

    /// BERT-base sized: d=768, L=12, h=12, ff=3072, maxlen=512.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 768,
            layers: 12,
            heads: 12,
            ff_width: 3072,
            max_len: 512,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(Error::InvalidConfig(m));
        if self.vocab_size <= RESERVED {
            return bad(format!("vocabulary of {} has no characters", self.vocab_size));
        }
        if self.width == 0 || self.layers == 0 || self.ff_width == 0 || self.max_len < 3 {
            return bad("encoder sizes must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Result of a differentiable encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub features: Var,
    /// Per block, one len×len weight matrix per head.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    params: ParamStore,
    char_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    mlm: Linear,
    pool: Linear,
    nsp: Linear,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let init = Init::Normal(INIT_STD);
        let char_emb = params.add("embed.char", init_tensor(config.vocab_size, config.width, init, &mut r))?;
        let pos_emb = params.add("embed.pos", init_tensor(config.max_len, config.width, init, &mut r))?;
        let blocks = (0..config.layers)
            .map(|l| {
                TransformerBlock::new(
                    &mut params,
                    &format!("block{l}"),
                    config.width,
                    config.heads,
                    config.ff_width,
                    config.dropout,
                    init,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mlm = Linear::new(&mut params, "mlm", config.width, config.vocab_size, init, &mut r)?;
        let pool = Linear::new(&mut params, "nsp.pool", config.width, config.width, init, &mut r)?;
        let nsp = Linear::new(&mut params, "nsp.out", config.width, 2, init, &mut r)?;
        Ok(Self {
            config,
            params,
            char_emb,
            pos_emb,
            blocks,
            mlm,
            pool,
            nsp,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.set_all_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_all_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// `char_emb[token_t] + pos_emb[t]` for every position.
    pub fn embed<'p>(&'p self, g: &mut Graph<'p>, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(&self.params, self.char_emb);
        let chars = g.gather_rows(table, tokens)?;
        let pos_table = g.param(&self.params, self.pos_emb);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        g.add(chars, pos)
    }

    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        tokens: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Result<EncoderPass> {
        let mut x = self.embed(g, tokens)?;
        let x_dropped = g.dropout(x, self.config.dropout);
        x = x_dropped;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(g, &self.params, x, key_mask)?;
            x = y;
            attention.push(w);
        }
        Ok(EncoderPass { features: x, attention })
    }

    /// Inference-mode semantic features, len×width.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, tokens, None)?;
        Ok(g.tensor(pass.features))
    }

    /// Features plus every block's attention as heads×len×len tensors.
    pub fn encode_with_attention(&self, tokens: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, tokens, None)?;
        let len = tokens.len();
        let maps = pass
            .attention
            .iter()
            .map(|heads| {
                let data: Vec<f64> = heads.iter().flat_map(|&h| g.value(h).iter().copied()).collect();
                Tensor::new(alloc::vec![heads.len(), len, len], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((g.tensor(pass.features), maps))
    }

    /// Vocabulary logits at the given rows of `features`.
    pub fn mlm_logits<'p>(&'p self, g: &mut Graph<'p>, features: Var, positions: &[usize]) -> Result<Var> {
        let rows = g.gather_rows(features, positions)?;
        self.mlm.forward(g, &self.params, rows)
    }

    /// Two logits (not-next, is-next) from the first ([CLS]) row.
    pub fn nsp_logits<'p>(&'p self, g: &mut Graph<'p>, features: Var) -> Result<Var> {
        let cls = g.slice_rows(features, 0, 1)?;
        let pooled = self.pool.forward(g, &self.params, cls)?;
        let pooled = g.tanh(pooled);
        self.nsp.forward(g, &self.params, pooled)
    }
}
