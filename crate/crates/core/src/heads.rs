//! Polyphone classifiers over frozen encoder features. Each architecture has
//! one shared trunk and a separate output layer per polyphonic character, so
//! a prediction is always one of that character's own candidates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::corpus::{AnnotatedSentence, SampleRef};
use crate::encoder::{EncoderModel, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var};
use crate::nn::{BiLstm, Init, Linear, TransformerBlock};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainReport, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadArch {
    Fc,
    Lstm,
    Transformer,
}

impl HeadArch {
    pub const ALL: [HeadArch; 3] = [HeadArch::Fc, HeadArch::Lstm, HeadArch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            HeadArch::Fc => "fc",
            HeadArch::Lstm => "lstm",
            HeadArch::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fc" => Some(HeadArch::Fc),
            "lstm" => Some(HeadArch::Lstm),
            "transformer" => Some(HeadArch::Transformer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub arch: HeadArch,
    /// Encoder feature width.
    pub input_width: usize,
    /// FC hidden units, BLSTM units per direction, or transformer width.
    pub width: usize,
    pub dropout: f64,
    pub lstm_layers: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl HeadConfig {
    pub fn desk(arch: HeadArch, input_width: usize) -> Self {
        Self::sized(arch, input_width, 128)
    }

    pub fn paper(arch: HeadArch, input_width: usize) -> Self {
        Self::sized(arch, input_width, 512)
    }

    pub fn sized(arch: HeadArch, input_width: usize, width: usize) -> Self {
        Self {
            arch,
            input_width,
            width,
            dropout: if arch == HeadArch::Fc { 0.5 } else { 0.1 },
            lstm_layers: 2,
            blocks: 2,
            heads: 8,
            ff_width: 4 * width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_width == 0 || self.width == 0 {
            return bad("head widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.arch {
            HeadArch::Lstm if self.lstm_layers == 0 => bad("BLSTM head needs a layer".into()),
            HeadArch::Transformer if self.blocks == 0 || self.ff_width == 0 => {
                bad("transformer head needs a block".into())
            }
            HeadArch::Transformer if self.heads == 0 || !self.width.is_multiple_of(self.heads) => {
                bad(format!("width {} not divisible by {} heads", self.width, self.heads))
            }
            _ => Ok(()),
        }
    }

    /// Width of the trunk output read by the per-character layers.
    pub fn trunk_output(&self) -> usize {
        match self.arch {
            HeadArch::Lstm => 2 * self.width,
            _ => self.width,
        }
    }

    /// Default optimizer: Adam 5e-4, with warmup for the transformer head.
    pub fn optimizer(&self) -> AdamConfig {
        match self.arch {
            HeadArch::Transformer => AdamConfig::warmup(self.width, 400),
            _ => AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Trunk {
    Fc(Linear),
    Lstm(Vec<BiLstm>),
    Transformer {
        proj: Option<Linear>,
        blocks: Vec<TransformerBlock>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub layer: Linear,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRegistry {
    pub config: HeadConfig,
    seed: u64,
    params: ParamStore,
    trunk: Trunk,
    outputs: BTreeMap<char, OutputLayer>,
}

/// Logits for one query plus the first trunk block's attention, if any.
#[derive(Debug, Clone)]
pub struct HeadPass {
    pub logits: Var,
    pub attention: Option<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    pub index: usize,
    pub probabilities: Vec<f64>,
}

impl HeadRegistry {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let init = Init::FanInUniform;
        let trunk = match config.arch {
            HeadArch::Fc => Trunk::Fc(Linear::new(
                &mut params,
                "trunk.fc",
                config.input_width,
                config.width,
                init,
                &mut r,
            )?),
            HeadArch::Lstm => {
                let mut layers = Vec::with_capacity(config.lstm_layers);
                let mut input = config.input_width;
                for l in 0..config.lstm_layers {
                    let layer = BiLstm::new(&mut params, &format!("trunk.blstm{l}"), input, config.width, &mut r)?;
                    input = layer.output_width();
                    layers.push(layer);
                }
                Trunk::Lstm(layers)
            }
            HeadArch::Transformer => {
                let proj = if config.input_width == config.width {
                    None
                } else {
                    Some(Linear::new(
                        &mut params,
                        "trunk.proj",
                        config.input_width,
                        config.width,
                        init,
                        &mut r,
                    )?)
                };
                let blocks = (0..config.blocks)
                    .map(|b| {
                        TransformerBlock::new(
                            &mut params,
                            &format!("trunk.block{b}"),
                            config.width,
                            config.heads,
                            config.ff_width,
                            config.dropout,
                            init,
                            &mut r,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Trunk::Transformer { proj, blocks }
            }
        };
        Ok(Self {
            config,
            seed,
            params,
            trunk,
            outputs: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds a freshly initialized output layer for `ch`. Existing parameters
    /// are left untouched; the initialization depends only on the registry
    /// seed and `ch`, not on registration order.
    pub fn register_polyphone(&mut self, ch: char, candidates: Vec<String>) -> Result<()> {
        if self.outputs.contains_key(&ch) {
            return Err(Error::DuplicateRegistration(ch));
        }
        if candidates.len() < 2 {
            return Err(Error::TooFewCandidates {
                ch,
                count: candidates.len(),
            });
        }
        let mut r = rng::rng(self.seed ^ ((ch as u64) << 24) ^ 0x9E37_79B9);
        let layer = Linear::new(
            &mut self.params,
            &format!("out.{ch}"),
            self.config.trunk_output(),
            candidates.len(),
            Init::FanInUniform,
            &mut r,
        )?;
        self.outputs.insert(ch, OutputLayer { layer, candidates });
        Ok(())
    }

    pub fn is_registered(&self, ch: char) -> bool {
        self.outputs.contains_key(&ch)
    }

    pub fn candidates(&self, ch: char) -> Result<&[String]> {
        self.outputs
            .get(&ch)
            .map(|o| o.candidates.as_slice())
            .ok_or(Error::Unregistered(ch))
    }

    pub fn characters(&self) -> impl Iterator<Item = char> + '_ {
        self.outputs.keys().copied()
    }

    pub fn set_trunk_trainable(&mut self, trainable: bool) {
        let ids: Vec<_> = self
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("trunk."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.params.set_trainable(id, trainable);
        }
    }

    pub fn set_output_trainable(&mut self, ch: char, trainable: bool) -> Result<()> {
        let layer = self.outputs.get(&ch).ok_or(Error::Unregistered(ch))?.layer.clone();
        self.params.set_trainable(layer.weight, trainable);
        self.params.set_trainable(layer.bias, trainable);
        Ok(())
    }

    /// Logits over `ch`'s candidates, read at row `position` of `features`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, features: &Tensor, position: usize, ch: char) -> Result<HeadPass> {
        let out = self.outputs.get(&ch).ok_or(Error::Unregistered(ch))?;
        let len = features.rows();
        if position >= len {
            return Err(Error::PositionOutOfRange { position, len });
        }
        if features.cols() != self.config.input_width {
            return Err(Error::Shape {
                op: "head_forward",
                left: features.shape().to_vec(),
                right: alloc::vec![len, self.config.input_width],
            });
        }
        let mut attention = None;
        let row = match &self.trunk {
            Trunk::Fc(layer) => {
                let x = g.input_from(1, features.cols(), features.row(position).to_vec())?;
                let h = layer.forward(g, &self.params, x)?;
                let h = g.tanh(h);
                g.dropout(h, self.config.dropout)
            }
            Trunk::Lstm(layers) => {
                let mut x = g.input(features);
                for layer in layers {
                    x = layer.forward(g, &self.params, x)?;
                }
                let x = g.dropout(x, self.config.dropout);
                g.slice_rows(x, position, position + 1)?
            }
            Trunk::Transformer { proj, blocks } => {
                let mut x = g.input(features);
                if let Some(p) = proj {
                    x = p.forward(g, &self.params, x)?;
                }
                for (b, block) in blocks.iter().enumerate() {
                    let (y, w) = block.forward(g, &self.params, x, None)?;
                    if b == 0 {
                        attention = Some(w);
                    }
                    x = y;
                }
                g.slice_rows(x, position, position + 1)?
            }
        };
        let logits = out.layer.forward(g, &self.params, row)?;
        Ok(HeadPass { logits, attention })
    }

    pub fn probabilities(&self, features: &Tensor, position: usize, ch: char) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, features, position, ch)?;
        Ok(softmax(g.value(pass.logits)))
    }

    pub fn predict(&self, features: &Tensor, position: usize, ch: char) -> Result<Prediction> {
        let probabilities = self.probabilities(features, position, ch)?;
        let index = argmax(&probabilities);
        Ok(Prediction {
            label: self.outputs[&ch].candidates[index].clone(),
            index,
            probabilities,
        })
    }

    /// First trunk block attention (heads×len×len) for a transformer head.
    pub fn attention(&self, features: &Tensor, position: usize, ch: char) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, features, position, ch)?;
        let heads = pass.attention.ok_or(Error::NotTransformerHead)?;
        let len = features.rows();
        let data: Vec<f64> = heads.iter().flat_map(|&h| g.value(h).iter().copied()).collect();
        Tensor::new(alloc::vec![heads.len(), len, len], data)
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// One classification query: cached encoder features of the whole
/// `[CLS] sentence [SEP]` sequence, the encoder row of the polyphone and its
/// gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Arc<Tensor>,
    /// Encoder index, i.e. sentence position + 1.
    pub position: usize,
    pub ch: char,
    pub label: String,
    pub sample: SampleRef,
}

/// Encodes every referenced sentence once with a frozen encoder.
pub fn featurize(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &[AnnotatedSentence],
    samples: &[SampleRef],
) -> Result<Vec<Instance>> {
    if !encoder.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    let mut cache: BTreeMap<usize, Arc<Tensor>> = BTreeMap::new();
    samples
        .iter()
        .map(|&s| {
            let sentence = &corpus[s.sentence];
            let features = match cache.get(&s.sentence) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(encoder.encode(&vocab.encode_sentence(&sentence.chars))?);
                    cache.insert(s.sentence, f.clone());
                    f
                }
            };
            let target = &sentence.targets[s.target];
            Ok(Instance {
                features,
                position: target.position + 1,
                ch: sentence.chars[target.position],
                label: target.label.clone(),
                sample: s,
            })
        })
        .collect()
}

impl Trainable for HeadRegistry {
    type Item = Instance;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn label_index(&self, x: &Instance) -> Result<usize> {
        let c = self.candidates(x.ch)?;
        c.iter()
            .position(|l| *l == x.label)
            .ok_or_else(|| Error::LabelNotCandidate {
                ch: x.ch,
                label: x.label.clone(),
            })
    }

    fn logits<'p>(&'p self, g: &mut Graph<'p>, x: &Instance) -> Result<Var> {
        Ok(self.forward(g, &x.features, x.position, x.ch)?.logits)
    }
}

/// Mean cross-entropy over `set` in inference mode.
pub fn mean_loss(registry: &HeadRegistry, set: &[Instance]) -> Result<f64> {
    train::mean_loss(registry, set)
}

pub fn accuracy(registry: &HeadRegistry, set: &[Instance]) -> Result<f64> {
    train::accuracy(registry, set)
}

pub fn train_head(
    registry: &mut HeadRegistry,
    train: &[Instance],
    dev: &[Instance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train::fit(registry, train, dev, cfg)
}
