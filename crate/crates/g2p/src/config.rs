//! Run configuration: sectioned `key = value` TOML, layered as preset, then
//! config file, then `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use g2p_core::baseline::BaselineConfig;
use g2p_core::encoder::{EncoderConfig, PretrainConfig};
use g2p_core::heads::{HeadArch, HeadConfig};
use g2p_core::rng::{derive_seed, stream};
use g2p_core::synth::SynthConfig;
use g2p_core::train::TrainConfig;
use g2p_core::{AdamConfig, LrSchedule};

use crate::error::{Error, Result};

pub const DESK: &str = r#"
preset = "desk"
seed = 42
method = "all"

[paths]
out_dir = "out"

[synth]
fillers = 64
topics = 32
candidates = [2, 3, 4, 2, 3]
window = 3
min_len = 4
max_len = 7
samples_per_char = 2000
sentences_per_doc = 8

[inventory]
min_count = 100

[encoder]
width = 64
layers = 2
heads = 4
ff_width = 256
max_len = 64
dropout = 0.0

[pretrain]
epochs = 10
batch_size = 16
mask_rate = 0.15
negative_rate = 0.5
lr = 1e-3
eval_pairs = 256
clip_norm = 5.0
max_pairs = 0

[head.fc]
width = 128
dropout = 0.0
lr = 3e-3
warmup = 0
max_epochs = 60
batch_size = 32
patience = 15

[head.lstm]
width = 32
dropout = 0.0
layers = 2
lr = 3e-3
warmup = 0
max_epochs = 10
batch_size = 32
patience = 2

[head.transformer]
width = 32
dropout = 0.1
blocks = 2
heads = 8
ff_width = 128
lr = 5e-4
warmup = 400
max_epochs = 10
batch_size = 32
patience = 2

[baseline]
char_width = 64
pos_width = 64
context = 1
hidden = 64
layers = 2
dropout = 0.0
lr = 5e-4
max_epochs = 30
batch_size = 32
patience = 5

[eval]
folds = 10
context = 5
pca_char = ""
"#;

pub const PAPER: &str = r#"
preset = "paper"
seed = 42
method = "all"

[paths]
out_dir = "out"

[synth]
fillers = 64
topics = 32
candidates = [2, 3, 4, 2, 3]
window = 3
min_len = 8
max_len = 12
samples_per_char = 2000
sentences_per_doc = 8

[inventory]
min_count = 2000

[encoder]
width = 768
layers = 12
heads = 12
ff_width = 3072
max_len = 512
dropout = 0.1

[pretrain]
epochs = 10
batch_size = 16
mask_rate = 0.15
negative_rate = 0.5
lr = 1e-4
eval_pairs = 256
clip_norm = 5.0
max_pairs = 0

[head.fc]
width = 512
dropout = 0.5
lr = 5e-4
warmup = 0
max_epochs = 30
batch_size = 32
patience = 5

[head.lstm]
width = 512
dropout = 0.1
layers = 2
lr = 5e-4
warmup = 0
max_epochs = 30
batch_size = 32
patience = 5

[head.transformer]
width = 512
dropout = 0.1
blocks = 2
heads = 8
ff_width = 2048
lr = 5e-4
warmup = 400
max_epochs = 30
batch_size = 32
patience = 5

[baseline]
char_width = 64
pos_width = 64
context = 1
hidden = 512
layers = 2
dropout = 0.0
lr = 5e-4
max_epochs = 30
batch_size = 32
patience = 5

[eval]
folds = 10
context = 5
pca_char = ""
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// `all`, `baseline`, `fc`, `lstm`, `transformer`, or a comma list.
    pub method: String,
    pub paths: Paths,
    pub synth: SynthSection,
    pub inventory: InventorySection,
    pub encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub head: Heads,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
}

/// Unset inputs default to the file of the same role in `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub documents: Option<PathBuf>,
    pub folds: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub fillers: usize,
    pub topics: usize,
    pub candidates: Vec<usize>,
    pub window: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples_per_char: usize,
    pub sentences_per_doc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InventorySection {
    /// Characters need strictly more samples than this.
    pub min_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub negative_rate: f64,
    pub lr: f64,
    pub eval_pairs: usize,
    /// 0 disables clipping.
    pub clip_norm: f64,
    /// 0 uses every sentence pair.
    pub max_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heads {
    pub fc: HeadSection,
    pub lstm: HeadSection,
    pub transformer: HeadSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub width: usize,
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ff_width: Option<usize>,
    pub lr: f64,
    /// Warmup steps; 0 keeps `lr` constant.
    pub warmup: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub char_width: usize,
    pub pos_width: usize,
    pub context: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
    /// Attention crop context size.
    pub context: usize,
    /// PCA character; empty picks the first inventory character.
    pub pca_char: String,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{origin}: {}", e.message())))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut node = table;
    for p in parents {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown section `{p}` in `{key}`"))),
        };
    }
    if !node.contains_key(*last)
        && !matches!(
            *last,
            "corpus" | "dictionary" | "lexicon" | "vocab" | "documents" | "folds" | "checkpoints"
        )
    {
        return Err(Error::Config(format!("unknown key `{}`", key.trim())));
    }
    node.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "desk" => Ok(DESK),
        "paper" => Ok(PAPER),
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::layered(name, None, &[])
    }

    /// Preset, then the optional file text, then overrides. A `preset` key in
    /// the file selects the base preset.
    pub fn layered(preset: &str, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_table = file.map(|t| parse_table(t, "config file")).transpose()?;
        let name = file_table
            .as_ref()
            .and_then(|t| t.get("preset"))
            .and_then(|v| v.as_str())
            .unwrap_or(preset)
            .to_string();
        let mut table = parse_table(preset_text(&name)?, "preset")?;
        if let Some(t) = file_table {
            merge(&mut table, t);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, preset: &str, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::layered(preset, text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.encoder_config(16).validate()?;
        for arch in HeadArch::ALL {
            self.head_config(arch, self.encoder.width).validate()?;
            if self.head_section(arch).batch_size == 0 {
                return Err(Error::Config(format!(
                    "head.{}.batch_size must be positive",
                    arch.name()
                )));
            }
        }
        self.baseline_config().validate()?;
        if self.eval.folds < 3 {
            return Err(Error::Config("eval.folds must be at least 3".into()));
        }
        if self.eval.context == 0 {
            return Err(Error::Config("eval.context must be positive".into()));
        }
        if self.eval.pca_char.chars().count() > 1 {
            return Err(Error::Config("eval.pca_char must be one character".into()));
        }
        if !(0.0..1.0).contains(&self.pretrain.mask_rate) || self.pretrain.mask_rate == 0.0 {
            return Err(Error::Config("pretrain.mask_rate must lie in (0, 1)".into()));
        }
        self.methods()?;
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.method == "all" {
            return Ok(Method::ALL.to_vec());
        }
        self.method
            .split(',')
            .map(|m| Method::parse(m.trim()).ok_or_else(|| Error::Config(format!("unknown method `{m}`"))))
            .collect()
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    fn input(&self, set: &Option<PathBuf>, name: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.paths.out_dir.join(name))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.input(&self.paths.corpus, "corpus.tsv")
    }
    pub fn dictionary_path(&self) -> PathBuf {
        self.input(&self.paths.dictionary, "dictionary.tsv")
    }
    pub fn lexicon_path(&self) -> PathBuf {
        self.input(&self.paths.lexicon, "lexicon.tsv")
    }
    pub fn vocab_path(&self) -> PathBuf {
        self.input(&self.paths.vocab, "vocab.tsv")
    }
    pub fn documents_path(&self) -> PathBuf {
        self.input(&self.paths.documents, "documents.txt")
    }
    pub fn folds_path(&self) -> PathBuf {
        self.input(&self.paths.folds, "folds.tsv")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.clone())
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            fillers: s.fillers,
            topics: s.topics,
            candidates: s.candidates.clone(),
            window: s.window,
            min_len: s.min_len,
            max_len: s.max_len,
            samples_per_char: s.samples_per_char,
            sentences_per_doc: s.sentences_per_doc,
            label_weights: None,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            vocab_size,
            width: e.width,
            layers: e.layers,
            heads: e.heads,
            ff_width: e.ff_width,
            max_len: e.max_len,
            dropout: e.dropout,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            mask_rate: p.mask_rate,
            negative_rate: p.negative_rate,
            adam: AdamConfig::with_lr(p.lr),
            eval_pairs: p.eval_pairs,
            clip_norm: (p.clip_norm > 0.0).then_some(p.clip_norm),
            seed: derive_seed(self.seed, stream::PRETRAIN),
        }
    }

    pub fn head_section(&self, arch: HeadArch) -> &HeadSection {
        match arch {
            HeadArch::Fc => &self.head.fc,
            HeadArch::Lstm => &self.head.lstm,
            HeadArch::Transformer => &self.head.transformer,
        }
    }

    pub fn head_config(&self, arch: HeadArch, input_width: usize) -> HeadConfig {
        let h = self.head_section(arch);
        let mut c = HeadConfig::sized(arch, input_width, h.width);
        c.dropout = h.dropout;
        c.lstm_layers = h.layers.unwrap_or(c.lstm_layers);
        c.blocks = h.blocks.unwrap_or(c.blocks);
        c.heads = h.heads.unwrap_or(c.heads);
        c.ff_width = h.ff_width.unwrap_or(c.ff_width);
        c
    }

    /// Training schedule of one head; `rotation` decorrelates fold runs.
    pub fn head_train_config(&self, arch: HeadArch, rotation: usize) -> TrainConfig {
        let h = self.head_section(arch);
        let adam = if h.warmup > 0 {
            AdamConfig::warmup(h.width, h.warmup)
        } else {
            AdamConfig::with_lr(h.lr)
        };
        TrainConfig {
            max_epochs: h.max_epochs,
            batch_size: h.batch_size,
            patience: h.patience,
            adam,
            seed: derive_seed(self.seed, stream::HEAD_TRAIN) + 1000 * rotation as u64,
        }
    }

    pub fn head_init_seed(&self, rotation: usize) -> u64 {
        derive_seed(self.seed, stream::HEAD_INIT) + 1000 * rotation as u64
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let b = &self.baseline;
        BaselineConfig {
            char_width: b.char_width,
            pos_width: b.pos_width,
            context: b.context,
            hidden: b.hidden,
            layers: b.layers,
            dropout: b.dropout,
        }
    }

    pub fn baseline_train_config(&self, rotation: usize) -> TrainConfig {
        let b = &self.baseline;
        TrainConfig {
            max_epochs: b.max_epochs,
            batch_size: b.batch_size,
            patience: b.patience,
            adam: AdamConfig::with_lr(b.lr),
            seed: derive_seed(self.seed, stream::BASELINE_TRAIN) + 1000 * rotation as u64,
        }
    }

    pub fn baseline_init_seed(&self, rotation: usize) -> u64 {
        derive_seed(self.seed, stream::BASELINE_INIT) + 1000 * rotation as u64
    }
}

/// Evaluated system: the LSTM baseline or an encoder plus head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Baseline,
    Head(HeadArch),
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline,
        Method::Head(HeadArch::Fc),
        Method::Head(HeadArch::Lstm),
        Method::Head(HeadArch::Transformer),
    ];

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.strip_prefix("bert+").unwrap_or(s);
        if s == "baseline" {
            return Some(Method::Baseline);
        }
        HeadArch::parse(s).map(Method::Head)
    }

    pub fn name(self) -> String {
        match self {
            Method::Baseline => "baseline".into(),
            Method::Head(a) => format!("bert+{}", a.name()),
        }
    }
}

/// Adam learning-rate policy as written in snapshots.
pub fn describe_schedule(adam: &AdamConfig) -> String {
    match adam.schedule {
        LrSchedule::Constant => format!("constant {}", adam.lr),
        LrSchedule::Warmup { d_model, warmup } => format!("warmup d={d_model} steps={warmup}"),
    }
}
