//! Subcommand implementations. Every step reads its inputs from files named
//! by the run config, writes artifacts into the output directory and leaves
//! a manifest recording the config, seed and input hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use g2p_core::baseline::{self, BaselineInstance, BaselineModel, Lexicon};
use g2p_core::corpus::{
    build_inventory, g2p_route, retain_inventory, samples, stratified_kfold, AnnotatedSentence, FoldAssignment,
    InventoryEntry, PolyphoneInventory, PronunciationDictionary, SampleRef,
};
use g2p_core::encoder::{pretrain as run_pretraining, EncoderConfig, EncoderModel, PretrainReport, Vocabulary};
use g2p_core::eval::{cross_validate, rotations, AccuracyReport, AttentionAccumulator, CroppedAttentionMap, Split};
use g2p_core::heads::{featurize, HeadArch, HeadConfig, HeadRegistry, Instance};
use g2p_core::pca::{pca as project, Pca};
use g2p_core::rng::{derive_seed, stream};
use g2p_core::synth::generate_synthetic;
use g2p_core::train::{fit, TrainEpoch, TrainReport};
use g2p_core::Tensor;

use crate::checkpoint;
use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::formats;

/// Tracks files read and written by one subcommand.
#[derive(Debug, Default)]
pub struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(path.to_path_buf());
        Ok(text)
    }

    fn read_bytes(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(path.to_path_buf());
        Ok(bytes)
    }

    fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    /// Writes `manifest-<command>.toml` into the output directory.
    fn finish(mut self, cfg: &RunConfig, command: &str) -> Result<Self> {
        let hashes = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    Ok((p.display().to_string(), content_hash(&bytes)))
                })
                .collect()
        };
        let manifest = Manifest {
            command: command.to_string(),
            seed: cfg.seed,
            inputs: hashes(&self.inputs)?,
            outputs: hashes(&self.outputs)?,
            config: cfg.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        let path = cfg.out_dir().join(format!("manifest-{command}.toml"));
        self.write(&path, text)?;
        Ok(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

/// Git-style blob hash (over `"blob <len>\0" + bytes`), SHA-256 flavour.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

fn in_file<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| e.in_file(path))
}

/// Writes the synthetic corpus, dictionary, lexicon, pretraining documents,
/// vocabulary and folds.
pub fn gen_synth(cfg: &RunConfig) -> Result<Run> {
    let mut run = Run::default();
    let synth = generate_synthetic(&cfg.synth_config(), derive_seed(cfg.seed, stream::SYNTH))?;
    let docs: Vec<Vec<Vec<char>>> = synth
        .documents
        .iter()
        .map(|d| d.iter().map(|&i| synth.corpus[i].chars.clone()).collect())
        .collect();
    let lexicon = Lexicon::from_entries(synth.lexicon.iter().map(|(w, t)| (w.as_str(), t.as_str())));
    let vocab = Vocabulary::from_chars(docs.iter().flatten().flatten().copied());

    run.write(&cfg.corpus_path(), formats::write_corpus(&synth.corpus))?;
    run.write(&cfg.dictionary_path(), formats::write_dictionary(&synth.dictionary))?;
    run.write(&cfg.lexicon_path(), formats::write_lexicon(&lexicon))?;
    run.write(&cfg.documents_path(), formats::write_documents(&docs))?;
    run.write(&cfg.vocab_path(), formats::write_vocab(&vocab))?;
    let inventory = build_inventory(&synth.corpus, &synth.dictionary, cfg.inventory.min_count)?;
    let retained = retain_inventory(&synth.corpus, &inventory);
    let folds = stratified_kfold(
        &retained,
        &inventory,
        cfg.eval.folds,
        derive_seed(cfg.seed, stream::FOLDS),
    )?;
    run.write(&cfg.folds_path(), formats::write_folds(&folds.folds))?;
    run.finish(cfg, "gen-synth")
}

/// Labeled data restricted to the polyphone inventory, one entry per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Vec<AnnotatedSentence>,
    pub dictionary: PronunciationDictionary,
    pub inventory: PolyphoneInventory,
    pub samples: Vec<SampleRef>,
    pub chars: Vec<char>,
    pub gold: Vec<String>,
    pub folds: FoldAssignment,
}

impl Dataset {
    fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
        idx.iter().map(|&i| items[i].clone()).collect()
    }
}

fn load_dictionary(cfg: &RunConfig, run: &mut Run) -> Result<PronunciationDictionary> {
    let path = cfg.dictionary_path();
    in_file(formats::parse_dictionary(&run.read(&path)?), &path)
}

/// Reads corpus, dictionary and folds. Missing folds are computed and
/// written.
pub fn load_dataset(cfg: &RunConfig, run: &mut Run) -> Result<Dataset> {
    let path = cfg.corpus_path();
    let raw = in_file(formats::parse_corpus(&run.read(&path)?), &path)?;
    let dictionary = load_dictionary(cfg, run)?;
    let inventory = build_inventory(&raw, &dictionary, cfg.inventory.min_count)?;
    for ch in &inventory.dropped {
        eprintln!("warning: {ch} has too few samples; routed to its first dictionary pronunciation");
    }
    if inventory.is_empty() {
        return Err(Error::Config(format!(
            "no polyphonic character has more than {} samples",
            cfg.inventory.min_count
        )));
    }
    let corpus = retain_inventory(&raw, &inventory);
    let samples = samples(&corpus);
    let folds_path = cfg.folds_path();
    let folds = if folds_path.exists() {
        in_file(formats::parse_folds(&run.read(&folds_path)?), &folds_path)?
    } else {
        let f = stratified_kfold(
            &corpus,
            &inventory,
            cfg.eval.folds,
            derive_seed(cfg.seed, stream::FOLDS),
        )?
        .folds;
        run.write(&folds_path, formats::write_folds(&f))?;
        f
    };
    if folds.len() != samples.len() {
        return Err(g2p_core::Error::FoldMismatch {
            folds: folds.len(),
            samples: samples.len(),
        }
        .into());
    }
    let chars = samples
        .iter()
        .map(|s| corpus[s.sentence].target_char(s.target))
        .collect();
    let gold = samples
        .iter()
        .map(|s| corpus[s.sentence].targets[s.target].label.clone())
        .collect();
    Ok(Dataset {
        corpus,
        dictionary,
        inventory,
        samples,
        chars,
        gold,
        folds,
    })
}

fn load_vocab(cfg: &RunConfig, run: &mut Run) -> Result<Vocabulary> {
    let path = cfg.vocab_path();
    in_file(formats::parse_vocab(&run.read(&path)?), &path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    vocab_size: usize,
    width: usize,
    layers: usize,
    heads: usize,
    ff_width: usize,
    max_len: usize,
    dropout: f64,
}

impl From<EncoderConfig> for EncoderMeta {
    fn from(c: EncoderConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            width: c.width,
            layers: c.layers,
            heads: c.heads,
            ff_width: c.ff_width,
            max_len: c.max_len,
            dropout: c.dropout,
        }
    }
}

impl From<EncoderMeta> for EncoderConfig {
    fn from(m: EncoderMeta) -> Self {
        Self {
            vocab_size: m.vocab_size,
            width: m.width,
            layers: m.layers,
            heads: m.heads,
            ff_width: m.ff_width,
            max_len: m.max_len,
            dropout: m.dropout,
        }
    }
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(run: &mut Run, path: &Path) -> Result<T> {
    toml::from_str(&run.read(path)?).map_err(|e| Error::InFile {
        path: path.to_path_buf(),
        message: e.message().to_string(),
    })
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Internal(e.to_string()))
}

/// MLM + NSP pretraining on consecutive sentence pairs of the documents.
pub fn pretrain(cfg: &RunConfig) -> Result<(Run, PretrainReport)> {
    let mut run = Run::default();
    let vocab = load_vocab(cfg, &mut run)?;
    let docs_path = cfg.documents_path();
    let docs = formats::parse_documents(&run.read(&docs_path)?);
    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = formats::document_pairs(&docs)
        .iter()
        .map(|(a, b)| (vocab.ids(a), vocab.ids(b)))
        .collect();
    if cfg.pretrain.max_pairs > 0 {
        pairs.truncate(cfg.pretrain.max_pairs);
    }
    let enc_cfg = cfg.encoder_config(vocab.len());
    let mut encoder = EncoderModel::new(enc_cfg, derive_seed(cfg.seed, stream::ENCODER_INIT))?;
    let report = run_pretraining(&mut encoder, &pairs, &cfg.pretrain_config())?;
    encoder.freeze();

    let dir = cfg.checkpoint_dir();
    run.write(&dir.join("encoder.ckpt"), checkpoint::encode(encoder.params()))?;
    run.write(&dir.join("encoder.toml"), to_toml(&EncoderMeta::from(enc_cfg))?)?;
    run.write(
        &cfg.out_dir().join("pretrain_loss.tsv"),
        formats::pretrain_history_tsv(&report.history),
    )?;
    Ok((run.finish(cfg, "pretrain")?, report))
}

/// Frozen encoder and its vocabulary.
pub fn load_encoder(cfg: &RunConfig, run: &mut Run) -> Result<(EncoderModel, Vocabulary)> {
    let vocab = load_vocab(cfg, run)?;
    let dir = cfg.checkpoint_dir();
    let meta: EncoderMeta = read_sidecar(run, &dir.join("encoder.toml"))?;
    if meta.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "encoder was trained on {} tokens, vocabulary has {}",
            meta.vocab_size,
            vocab.len()
        )));
    }
    let mut encoder = EncoderModel::new(meta.into(), 0)?;
    let path = dir.join("encoder.ckpt");
    encoder
        .params_mut()
        .assign_from(&checkpoint::decode(&run.read_bytes(&path)?)?)?;
    encoder.freeze();
    Ok((encoder, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadMeta {
    arch: String,
    input_width: usize,
    width: usize,
    dropout: f64,
    lstm_layers: usize,
    blocks: usize,
    heads: usize,
    ff_width: usize,
    candidates: BTreeMap<String, Vec<String>>,
}

impl HeadMeta {
    fn of(reg: &HeadRegistry) -> Result<Self> {
        let c = reg.config;
        let candidates = reg
            .characters()
            .map(|ch| Ok((ch.to_string(), reg.candidates(ch)?.to_vec())))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: c.arch.name().into(),
            input_width: c.input_width,
            width: c.width,
            dropout: c.dropout,
            lstm_layers: c.lstm_layers,
            blocks: c.blocks,
            heads: c.heads,
            ff_width: c.ff_width,
            candidates,
        })
    }

    fn config(&self) -> Result<HeadConfig> {
        let arch =
            HeadArch::parse(&self.arch).ok_or_else(|| Error::Checkpoint(format!("unknown arch {}", self.arch)))?;
        Ok(HeadConfig {
            arch,
            input_width: self.input_width,
            width: self.width,
            dropout: self.dropout,
            lstm_layers: self.lstm_layers,
            blocks: self.blocks,
            heads: self.heads,
            ff_width: self.ff_width,
        })
    }
}

/// Fresh registry with one output layer per inventory character.
pub fn new_registry(
    cfg: &RunConfig,
    arch: HeadArch,
    input_width: usize,
    inventory: &PolyphoneInventory,
    rotation: usize,
) -> g2p_core::Result<HeadRegistry> {
    let mut reg = HeadRegistry::new(cfg.head_config(arch, input_width), cfg.head_init_seed(rotation))?;
    for (ch, e) in inventory.iter() {
        reg.register_polyphone(ch, e.labels.clone())?;
    }
    Ok(reg)
}

/// Outcome of training on rotation 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub report: TrainReport,
    pub test_accuracy: f64,
}

fn rotation_zero(folds: &FoldAssignment) -> Result<Split> {
    let rot = rotations(folds.k)?.into_iter().next().expect("k >= 3");
    Ok(Split::new(folds, &rot))
}

/// Trains one head on rotation 0 (test fold 0, dev fold 1).
pub fn train_head(cfg: &RunConfig, arch: HeadArch) -> Result<(Run, Trained)> {
    let mut run = Run::default();
    let data = load_dataset(cfg, &mut run)?;
    let (encoder, vocab) = load_encoder(cfg, &mut run)?;
    let instances = featurize(&encoder, &vocab, &data.corpus, &data.samples)?;
    let split = rotation_zero(&data.folds)?;
    let mut reg = new_registry(cfg, arch, encoder.config.width, &data.inventory, 0)?;
    let (train, dev, test) = (
        Dataset::pick(&instances, &split.train),
        Dataset::pick(&instances, &split.dev),
        Dataset::pick(&instances, &split.test),
    );
    let report = fit(&mut reg, &train, &dev, &cfg.head_train_config(arch, 0))?;
    let test_accuracy = g2p_core::train::accuracy(&reg, &test)?;

    let dir = cfg.checkpoint_dir();
    let name = arch.name();
    run.write(&dir.join(format!("head_{name}.ckpt")), checkpoint::encode(reg.params()))?;
    run.write(&dir.join(format!("head_{name}.toml")), to_toml(&HeadMeta::of(&reg)?)?)?;
    run.write(
        &cfg.out_dir().join(format!("head_{name}_metrics.tsv")),
        formats::train_history_tsv(&report.history),
    )?;
    let run = run.finish(cfg, &format!("train-head-{name}"))?;
    Ok((run, Trained { report, test_accuracy }))
}

pub fn load_head(cfg: &RunConfig, arch: HeadArch, run: &mut Run) -> Result<HeadRegistry> {
    let dir = cfg.checkpoint_dir();
    let meta: HeadMeta = read_sidecar(run, &dir.join(format!("head_{}.toml", arch.name())))?;
    let mut reg = HeadRegistry::new(meta.config()?, 0)?;
    for (ch, cands) in &meta.candidates {
        let mut it = ch.chars();
        match (it.next(), it.next()) {
            (Some(c), None) => reg.register_polyphone(c, cands.clone())?,
            _ => return Err(Error::Checkpoint(format!("`{ch}` is not one character"))),
        }
    }
    let path = dir.join(format!("head_{}.ckpt", arch.name()));
    let loaded = checkpoint::decode(&run.read_bytes(&path)?)?;
    reg.params_mut().assign_from(&loaded)?;
    Ok(reg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaselineMeta {
    char_width: usize,
    pos_width: usize,
    context: usize,
    hidden: usize,
    layers: usize,
    dropout: f64,
    /// Lexicon tags, without the reserved PAD and UNK entries.
    tags: Vec<String>,
    labels: Vec<String>,
}

fn load_lexicon(cfg: &RunConfig, run: &mut Run) -> Result<Lexicon> {
    let path = cfg.lexicon_path();
    in_file(formats::parse_lexicon(&run.read(&path)?), &path)
}

fn new_baseline(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    dict: &PronunciationDictionary,
    rotation: usize,
) -> g2p_core::Result<BaselineModel> {
    BaselineModel::new(
        cfg.baseline_config(),
        vocab.clone(),
        &lexicon.tags(),
        baseline::label_space(dict),
        cfg.baseline_init_seed(rotation),
    )
}

/// Trains the shared-output LSTM baseline on rotation 0.
pub fn train_baseline(cfg: &RunConfig) -> Result<(Run, Trained)> {
    let mut run = Run::default();
    let data = load_dataset(cfg, &mut run)?;
    let vocab = load_vocab(cfg, &mut run)?;
    let lexicon = load_lexicon(cfg, &mut run)?;
    let instances = baseline::prepare(&data.corpus, &data.samples, &lexicon);
    let split = rotation_zero(&data.folds)?;
    let mut model = new_baseline(cfg, &vocab, &lexicon, &data.dictionary, 0)?;
    let (train, dev, test) = (
        Dataset::pick(&instances, &split.train),
        Dataset::pick(&instances, &split.dev),
        Dataset::pick(&instances, &split.test),
    );
    let report = fit(&mut model, &train, &dev, &cfg.baseline_train_config(0))?;
    let test_accuracy = g2p_core::train::accuracy(&model, &test)?;

    let c = model.config;
    let meta = BaselineMeta {
        char_width: c.char_width,
        pos_width: c.pos_width,
        context: c.context,
        hidden: c.hidden,
        layers: c.layers,
        dropout: c.dropout,
        tags: model.tags[2..].to_vec(),
        labels: model.labels.clone(),
    };
    let dir = cfg.checkpoint_dir();
    run.write(&dir.join("baseline.ckpt"), checkpoint::encode(model.params()))?;
    run.write(&dir.join("baseline.toml"), to_toml(&meta)?)?;
    run.write(
        &cfg.out_dir().join("baseline_metrics.tsv"),
        formats::train_history_tsv(&report.history),
    )?;
    Ok((run.finish(cfg, "train-baseline")?, Trained { report, test_accuracy }))
}

pub fn load_baseline(cfg: &RunConfig, run: &mut Run) -> Result<BaselineModel> {
    let vocab = load_vocab(cfg, run)?;
    let dir = cfg.checkpoint_dir();
    let meta: BaselineMeta = read_sidecar(run, &dir.join("baseline.toml"))?;
    let config = baseline::BaselineConfig {
        char_width: meta.char_width,
        pos_width: meta.pos_width,
        context: meta.context,
        hidden: meta.hidden,
        layers: meta.layers,
        dropout: meta.dropout,
    };
    let mut model = BaselineModel::new(config, vocab, &meta.tags, meta.labels, 0)?;
    let path = dir.join("baseline.ckpt");
    model
        .params_mut()
        .assign_from(&checkpoint::decode(&run.read_bytes(&path)?)?)?;
    Ok(model)
}

fn single_method(cfg: &RunConfig) -> Result<Method> {
    match cfg.methods()?.as_slice() {
        [m] => Ok(*m),
        _ => Err(Error::Usage(format!(
            "`{}` names more than one method; pick one",
            cfg.method
        ))),
    }
}

/// One line of space-separated pronunciations per input line.
pub fn predict(cfg: &RunConfig, input: &str) -> Result<String> {
    let mut run = Run::default();
    let dict = load_dictionary(cfg, &mut run)?;
    let mut out = String::new();
    match single_method(cfg)? {
        Method::Head(arch) => {
            let (encoder, vocab) = load_encoder(cfg, &mut run)?;
            let reg = load_head(cfg, arch, &mut run)?;
            let inventory = PolyphoneInventory::from_entries(
                reg.characters()
                    .map(|ch| {
                        let labels = reg.candidates(ch).expect("registered").to_vec();
                        (ch, InventoryEntry { labels, count: 0 })
                    })
                    .collect(),
            )?;
            for line in input.lines().filter(|l| !l.is_empty()) {
                let chars: Vec<char> = line.chars().collect();
                let mut features: Option<Tensor> = None;
                let routed = g2p_route(&chars, &dict, &inventory, |s, pos| {
                    if features.is_none() {
                        features = Some(encoder.encode(&vocab.encode_sentence(s))?);
                    }
                    let f = features.as_ref().expect("set above");
                    Ok(reg.predict(f, pos + 1, s[pos])?.label)
                })?;
                out.push_str(&routed.pronunciations.join(" "));
                out.push('\n');
            }
        }
        Method::Baseline => {
            let model = load_baseline(cfg, &mut run)?;
            let lexicon = load_lexicon(cfg, &mut run)?;
            let inventory = PolyphoneInventory::from_entries(
                dict.iter()
                    .filter(|(_, p)| p.len() >= 2)
                    .map(|(ch, p)| {
                        (
                            ch,
                            InventoryEntry {
                                labels: p.to_vec(),
                                count: 0,
                            },
                        )
                    })
                    .collect(),
            )?;
            for line in input.lines().filter(|l| !l.is_empty()) {
                let chars: Vec<char> = line.chars().collect();
                let tagged = baseline::tokenize_and_tag(&chars, &lexicon);
                let routed = g2p_route(&chars, &dict, &inventory, |_, pos| model.predict(&tagged, pos))?;
                out.push_str(&routed.pronunciations.join(" "));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Cross-validation outcome of every configured method.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<AccuracyReport>,
    /// Pooled over every transformer test fold, when that head was run.
    pub attention: Option<CroppedAttentionMap>,
    pub locality: Option<f64>,
}

/// `h×L×L` attention over `[CLS] s [SEP]` restricted to the sentence rows and
/// columns.
pub fn sentence_attention(att: &Tensor) -> Result<Tensor> {
    let (h, l) = (att.shape()[0], att.shape()[1]);
    if l < 3 {
        return Err(g2p_core::Error::EmptySentence.into());
    }
    let n = l - 2;
    let mut data = Vec::with_capacity(h * n * n);
    for k in 0..h {
        for i in 1..=n {
            let row = &att.data()[(k * l + i) * l..(k * l + i + 1) * l];
            data.extend_from_slice(&row[1..=n]);
        }
    }
    Ok(Tensor::new(vec![h, n, n], data)?)
}

fn history_rows(out: &mut String, method: &str, fold: usize, history: &[TrainEpoch]) {
    use std::fmt::Write as _;
    for e in history {
        writeln!(
            out,
            "{method}\t{fold}\t{}\t{}\t{}",
            e.epoch,
            formats::f(e.train_loss),
            formats::f(e.dev_accuracy)
        )
        .unwrap();
    }
}

/// k-fold cross-validation of every configured method. Writes
/// `accuracy.tsv`, `eval_history.tsv`, `eval_summary.tsv` and, for the
/// transformer head, `eval_attention.tsv`.
pub fn eval(cfg: &RunConfig) -> Result<(Run, Evaluation)> {
    eval_with_progress(cfg, |_| {})
}

pub fn eval_with_progress(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<(Run, Evaluation)> {
    let mut run = Run::default();
    let data = load_dataset(cfg, &mut run)?;
    let methods = cfg.methods()?;
    let mut history = "method\tfold\tepoch\ttrain_loss\tdev_acc\n".to_string();
    let mut reports = Vec::new();
    let mut attention = None;

    let heads: Vec<HeadArch> = methods
        .iter()
        .filter_map(|m| match m {
            Method::Head(a) => Some(*a),
            Method::Baseline => None,
        })
        .collect();
    let encoded = if heads.is_empty() {
        None
    } else {
        let (encoder, vocab) = load_encoder(cfg, &mut run)?;
        let instances = featurize(&encoder, &vocab, &data.corpus, &data.samples)?;
        Some((encoder.config.width, instances))
    };

    for method in &methods {
        let name = method.name();
        let report = match *method {
            Method::Head(arch) => {
                let (width, instances) = encoded.as_ref().expect("encoded when heads are requested");
                let mut acc = (arch == HeadArch::Transformer)
                    .then(|| AttentionAccumulator::new(cfg.eval.context))
                    .transpose()?;
                let report = cross_validate(&name, &data.folds, &data.chars, &data.gold, |rot, split| {
                    let mut reg = new_registry(cfg, arch, *width, &data.inventory, rot.test)?;
                    let train: Vec<Instance> = Dataset::pick(instances, &split.train);
                    let dev: Vec<Instance> = Dataset::pick(instances, &split.dev);
                    let r = fit(&mut reg, &train, &dev, &cfg.head_train_config(arch, rot.test))?;
                    history_rows(&mut history, &name, rot.test, &r.history);
                    let mut preds = Vec::with_capacity(split.test.len());
                    for &i in &split.test {
                        let x = &instances[i];
                        preds.push(reg.predict(&x.features, x.position, x.ch)?.label);
                        if let Some(acc) = acc.as_mut() {
                            let full = reg.attention(&x.features, x.position, x.ch).map_err(Error::from);
                            let sent = full.and_then(|a| sentence_attention(&a)).map_err(to_core)?;
                            acc.add(&sent, x.position - 1)?;
                        }
                    }
                    progress(&format!(
                        "{name} fold {} best dev {:.4} after epoch {}",
                        rot.test, r.best_dev_accuracy, r.best_epoch
                    ));
                    Ok(preds)
                })?;
                if let Some(acc) = acc {
                    attention = Some(acc.finish()?);
                }
                report
            }
            Method::Baseline => {
                let vocab = load_vocab(cfg, &mut run)?;
                let lexicon = load_lexicon(cfg, &mut run)?;
                let instances: Vec<BaselineInstance> = baseline::prepare(&data.corpus, &data.samples, &lexicon);
                cross_validate(&name, &data.folds, &data.chars, &data.gold, |rot, split| {
                    let mut model = new_baseline(cfg, &vocab, &lexicon, &data.dictionary, rot.test)?;
                    let train = Dataset::pick(&instances, &split.train);
                    let dev = Dataset::pick(&instances, &split.dev);
                    let r = fit(&mut model, &train, &dev, &cfg.baseline_train_config(rot.test))?;
                    history_rows(&mut history, &name, rot.test, &r.history);
                    progress(&format!(
                        "{name} fold {} best dev {:.4} after epoch {}",
                        rot.test, r.best_dev_accuracy, r.best_epoch
                    ));
                    split
                        .test
                        .iter()
                        .map(|&i| model.predict(&instances[i].tagged, instances[i].position))
                        .collect()
                })?
            }
        };
        reports.push(report);
    }

    let locality = attention.as_ref().map(|m| m.locality()).transpose()?;
    let mut summary = "method\tmean\tstddev\toverall\n".to_string();
    for r in &reports {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.method,
            formats::f(r.mean()),
            formats::f(r.stddev()),
            formats::f(r.overall())
        ));
    }
    if let Some(l) = locality {
        summary.push_str(&format!(
            "# attention locality (spearman of mean weight vs |offset|)\t{}\n",
            formats::f(l)
        ));
    }
    let out = cfg.out_dir();
    run.write(&out.join("accuracy.tsv"), formats::accuracy_tsv(&reports))?;
    run.write(&out.join("eval_history.tsv"), history)?;
    run.write(&out.join("eval_summary.tsv"), summary)?;
    if let Some(map) = &attention {
        run.write(&out.join("eval_attention.tsv"), formats::attention_tsv(map))?;
    }
    Ok((
        run.finish(cfg, "eval")?,
        Evaluation {
            reports,
            attention,
            locality,
        },
    ))
}

fn to_core(e: Error) -> g2p_core::Error {
    match e {
        Error::Model(m) => m,
        other => g2p_core::Error::Degenerate(other.to_string()),
    }
}

/// Cropped first-block attention of the trained transformer head over the
/// rotation-0 test fold.
pub fn attention(cfg: &RunConfig) -> Result<(Run, CroppedAttentionMap, f64)> {
    let mut run = Run::default();
    let data = load_dataset(cfg, &mut run)?;
    let (encoder, vocab) = load_encoder(cfg, &mut run)?;
    let reg = load_head(cfg, HeadArch::Transformer, &mut run)?;
    let split = rotation_zero(&data.folds)?;
    let test: Vec<SampleRef> = split.test.iter().map(|&i| data.samples[i]).collect();
    let instances = featurize(&encoder, &vocab, &data.corpus, &test)?;
    let mut acc = AttentionAccumulator::new(cfg.eval.context)?;
    for x in &instances {
        let a = sentence_attention(&reg.attention(&x.features, x.position, x.ch)?)?;
        acc.add(&a, x.position - 1)?;
    }
    let map = acc.finish()?;
    let locality = map.locality()?;
    run.write(&cfg.out_dir().join("attention.tsv"), formats::attention_tsv(&map))?;
    run.write(
        &cfg.out_dir().join("attention_locality.tsv"),
        format!(
            "statistic\tvalue\nspearman_weight_vs_offset\t{}\ninstances\t{}\n",
            formats::f(locality),
            map.instances
        ),
    )?;
    Ok((run.finish(cfg, "attention")?, map, locality))
}

/// Encoder features of the rotation-0 test instances of one character,
/// projected onto two principal components.
pub fn pca(cfg: &RunConfig) -> Result<(Run, Pca)> {
    let mut run = Run::default();
    let data = load_dataset(cfg, &mut run)?;
    let (encoder, vocab) = load_encoder(cfg, &mut run)?;
    let ch = match cfg.eval.pca_char.chars().next() {
        Some(c) => c,
        None => data.inventory.chars()[0],
    };
    if !data.inventory.contains(ch) {
        return Err(g2p_core::Error::NotInInventory(ch).into());
    }
    let split = rotation_zero(&data.folds)?;
    let test: Vec<SampleRef> = split
        .test
        .iter()
        .filter(|&&i| data.chars[i] == ch)
        .map(|&i| data.samples[i])
        .collect();
    let instances = featurize(&encoder, &vocab, &data.corpus, &test)?;
    let rows: Vec<Vec<f64>> = instances.iter().map(|x| x.features.row(x.position).to_vec()).collect();
    let labels: Vec<String> = instances.iter().map(|x| x.label.clone()).collect();
    let p = project(&Tensor::from_rows(&rows)?, 2)?;
    run.write(&cfg.out_dir().join("pca.tsv"), formats::pca_tsv(&labels, &p))?;
    Ok((run.finish(cfg, "pca")?, p))
}
