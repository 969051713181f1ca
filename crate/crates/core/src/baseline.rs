//! Sequence-labeling baseline: BLSTM over character embeddings concatenated
//! with POS embeddings of the containing word and its neighbours, followed by
//! one softmax shared by every character over the union of all
//! pronunciations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::corpus::{AnnotatedSentence, PronunciationDictionary, SampleRef};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var};
use crate::heads::argmax;
use crate::nn::{init_tensor, BiLstm, Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::Trainable;

/// Label emitted at characters that are not polyphones.
pub const NOT_POLYPHONE: &str = "<none>";
pub const UNK_TAG: &str = "UNK";
const PAD_TAG: usize = 0;
const UNK_TAG_ID: usize = 1;

/// Word list with POS tags for greedy longest-match segmentation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    words: BTreeMap<Vec<char>, String>,
    longest: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Later duplicates overwrite earlier ones.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut lex = Self::new();
        for (w, t) in entries {
            lex.insert(w, t);
        }
        lex
    }

    pub fn insert(&mut self, word: &str, tag: &str) {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return;
        }
        self.longest = self.longest.max(chars.len());
        self.words.insert(chars, tag.to_string());
    }

    pub fn get(&self, word: &[char]) -> Option<&str> {
        self.words.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (String, &str)> {
        self.words.iter().map(|(w, t)| (w.iter().collect(), t.as_str()))
    }

    /// Sorted distinct tags, without UNK.
    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.words.values().cloned().collect();
        tags.sort();
        tags.dedup();
        tags
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub chars: Vec<char>,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<Word>,
    /// Index of the containing word for every character.
    pub char_word: Vec<usize>,
}

impl TaggedSentence {
    pub fn chars(&self) -> Vec<char> {
        self.words.iter().flat_map(|w| w.chars.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.char_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_word.is_empty()
    }
}

/// Greedy longest match from the left; characters no entry covers become
/// single-character UNK words.
pub fn tokenize_and_tag(sentence: &[char], lexicon: &Lexicon) -> TaggedSentence {
    let mut words = Vec::new();
    let mut char_word = Vec::with_capacity(sentence.len());
    let mut i = 0;
    while i < sentence.len() {
        let max = lexicon.longest.min(sentence.len() - i);
        let found = (1..=max)
            .rev()
            .find_map(|n| lexicon.get(&sentence[i..i + n]).map(|t| (n, t.to_string())));
        let (n, tag) = found.unwrap_or_else(|| (1, UNK_TAG.to_string()));
        char_word.extend(core::iter::repeat_n(words.len(), n));
        words.push(Word {
            chars: sentence[i..i + n].to_vec(),
            tag,
        });
        i += n;
    }
    TaggedSentence { words, char_word }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub char_width: usize,
    pub pos_width: usize,
    /// Neighbouring words on each side whose tags join the input.
    pub context: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl BaselineConfig {
    pub fn desk() -> Self {
        Self {
            char_width: 64,
            pos_width: 64,
            context: 1,
            hidden: 64,
            layers: 2,
            dropout: 0.0,
        }
    }

    /// 512 BLSTM units, 2 layers, contextual size 1.
    pub fn paper() -> Self {
        Self {
            hidden: 512,
            ..Self::desk()
        }
    }

    pub fn input_width(&self) -> usize {
        self.char_width + (2 * self.context + 1) * self.pos_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.char_width == 0 || self.pos_width == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig("baseline sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub vocab: Vocabulary,
    /// Index 0 is PAD, 1 is UNK.
    pub tags: Vec<String>,
    /// Index 0 is NOT_POLYPHONE, then every pronunciation of every polyphone.
    pub labels: Vec<String>,
    params: ParamStore,
    char_emb: ParamId,
    pos_emb: ParamId,
    lstm: Vec<BiLstm>,
    out: Linear,
}

/// Union label space: NOT_POLYPHONE followed by the sorted union of every
/// polyphone's pronunciations.
pub fn label_space(dictionary: &PronunciationDictionary) -> Vec<String> {
    let mut labels = alloc::vec![NOT_POLYPHONE.to_string()];
    labels.extend(dictionary.polyphone_labels());
    labels
}

impl BaselineModel {
    pub fn new(
        config: BaselineConfig,
        vocab: Vocabulary,
        lexicon_tags: &[String],
        labels: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if labels.len() < 2 {
            return Err(Error::InvalidConfig("label space needs at least two labels".into()));
        }
        let mut tags = alloc::vec!["<pad>".to_string(), UNK_TAG.to_string()];
        tags.extend(lexicon_tags.iter().filter(|t| t.as_str() != UNK_TAG).cloned());
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let char_emb = params.add(
            "char_emb",
            init_tensor(vocab.len(), config.char_width, Init::Normal(0.1), &mut r),
        )?;
        let pos_emb = params.add(
            "pos_emb",
            init_tensor(tags.len(), config.pos_width, Init::Normal(0.1), &mut r),
        )?;
        let mut lstm = Vec::with_capacity(config.layers);
        let mut input = config.input_width();
        for l in 0..config.layers {
            let layer = BiLstm::new(&mut params, &format!("blstm{l}"), input, config.hidden, &mut r)?;
            input = layer.output_width();
            lstm.push(layer);
        }
        let out = Linear::new(&mut params, "out", input, labels.len(), Init::FanInUniform, &mut r)?;
        Ok(Self {
            config,
            vocab,
            tags,
            labels,
            params,
            char_emb,
            pos_emb,
            lstm,
            out,
        })
    }

    fn tag_id(&self, tag: &str) -> usize {
        self.tags.iter().position(|t| t == tag).unwrap_or(UNK_TAG_ID)
    }

    /// Per character: `[char_emb, pos_emb(word-w), …, pos_emb(word+w)]`,
    /// with PAD beyond the sentence.
    pub fn build_input<'p>(&'p self, g: &mut Graph<'p>, tagged: &TaggedSentence) -> Result<Var> {
        if tagged.is_empty() {
            return Err(Error::EmptySentence);
        }
        let chars = tagged.chars();
        let table = g.param(&self.params, self.char_emb);
        let char_part = g.gather_rows(table, &self.vocab.ids(&chars))?;
        let word_tags: Vec<usize> = tagged.words.iter().map(|w| self.tag_id(&w.tag)).collect();
        let w = self.config.context as isize;
        let pos_table = g.param(&self.params, self.pos_emb);
        let mut parts = alloc::vec![char_part];
        for d in -w..=w {
            let ids: Vec<usize> = tagged
                .char_word
                .iter()
                .map(|&k| {
                    let j = k as isize + d;
                    if j < 0 || j as usize >= word_tags.len() {
                        PAD_TAG
                    } else {
                        word_tags[j as usize]
                    }
                })
                .collect();
            parts.push(g.gather_rows(pos_table, &ids)?);
        }
        g.concat_cols(&parts)
    }

    /// len×labels logits.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, tagged: &TaggedSentence) -> Result<Var> {
        let mut x = self.build_input(g, tagged)?;
        for layer in &self.lstm {
            x = layer.forward(g, &self.params, x)?;
        }
        let x = g.dropout(x, self.config.dropout);
        self.out.forward(g, &self.params, x)
    }

    /// Row `t` is the label distribution of character `t`.
    pub fn probabilities(&self, tagged: &TaggedSentence) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, tagged)?;
        let logits = g.tensor(logits);
        let data: Vec<f64> = (0..logits.rows()).flat_map(|t| softmax(logits.row(t))).collect();
        Tensor::matrix(logits.rows(), logits.cols(), data)
    }

    /// Argmax over the whole shared label space.
    pub fn predict(&self, tagged: &TaggedSentence, position: usize) -> Result<String> {
        if position >= tagged.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: tagged.len(),
            });
        }
        let p = self.probabilities(tagged)?;
        Ok(self.labels[argmax(p.row(position))].clone())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineInstance {
    pub tagged: Arc<TaggedSentence>,
    pub position: usize,
    pub label: String,
    pub sample: SampleRef,
}

/// Tokenizes every referenced sentence once.
pub fn prepare(corpus: &[AnnotatedSentence], samples: &[SampleRef], lexicon: &Lexicon) -> Vec<BaselineInstance> {
    let mut cache: BTreeMap<usize, Arc<TaggedSentence>> = BTreeMap::new();
    samples
        .iter()
        .map(|&s| {
            let sentence = &corpus[s.sentence];
            let tagged = cache
                .entry(s.sentence)
                .or_insert_with(|| Arc::new(tokenize_and_tag(&sentence.chars, lexicon)))
                .clone();
            let t = &sentence.targets[s.target];
            BaselineInstance {
                tagged,
                position: t.position,
                label: t.label.clone(),
                sample: s,
            }
        })
        .collect()
}

impl Trainable for BaselineModel {
    type Item = BaselineInstance;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn label_index(&self, x: &BaselineInstance) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| *l == x.label)
            .ok_or_else(|| Error::LabelNotCandidate {
                ch: x.tagged.chars()[x.position],
                label: x.label.clone(),
            })
    }

    /// Only the polyphone's row enters the loss.
    fn logits<'p>(&'p self, g: &mut Graph<'p>, x: &BaselineInstance) -> Result<Var> {
        let all = self.forward(g, &x.tagged)?;
        g.slice_rows(all, x.position, x.position + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use crate::train::{accuracy, fit, mean_loss, TrainConfig};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn lexicon() -> Lexicon {
        Lexicon::from_entries([("ab", "n"), ("abc", "v"), ("c", "m"), ("cd", "x"), ("d", "n")])
    }

    fn s(text: &str) -> Vec<char> {
        text.chars().collect()
    }

    #[test]
    fn longest_match_wins() {
        let t = tokenize_and_tag(&s("abcd"), &lexicon());
        let words: Vec<String> = t.words.iter().map(|w| w.chars.iter().collect()).collect();
        assert_eq!(words, ["abc", "d"]);
        assert_eq!(t.char_word, [0, 0, 0, 1]);
        assert_eq!(t.words[0].tag, "v");
        assert_eq!(t.chars(), s("abcd"));
    }

    #[test]
    fn single_word_and_fallback() {
        let t = tokenize_and_tag(&s("abc"), &lexicon());
        assert_eq!(t.words.len(), 1);
        assert_eq!(t.words[0].tag, "v");
        let t = tokenize_and_tag(&s("xyz"), &Lexicon::new());
        assert_eq!(t.words.len(), 3);
        assert!(t.words.iter().all(|w| w.tag == UNK_TAG && w.chars.len() == 1));
    }

    fn model(context: usize) -> BaselineModel {
        let cfg = BaselineConfig {
            char_width: 4,
            pos_width: 3,
            context,
            hidden: 5,
            layers: 2,
            dropout: 0.0,
        };
        let vocab = Vocabulary::from_chars("abcdxyz".chars());
        let labels = vec![NOT_POLYPHONE.into(), "p1".into(), "p2".into(), "q1".into()];
        BaselineModel::new(cfg, vocab, &lexicon().tags(), labels, 1).unwrap()
    }

    #[test]
    fn input_width_formula() {
        for w in 0..3 {
            let m = model(w);
            let mut g = Graph::new();
            let t = tokenize_and_tag(&s("abcdx"), &lexicon());
            let x = m.build_input(&mut g, &t).unwrap();
            assert_eq!(g.shape(x), (5, 4 + (2 * w + 1) * 3));
        }
        assert_eq!(BaselineConfig::paper().input_width(), 64 + 3 * 64);
    }

    #[test]
    fn left_boundary_slot_is_pad() {
        let m = model(1);
        let mut g = Graph::new();
        let t = tokenize_and_tag(&s("abcd"), &lexicon());
        let x = m.build_input(&mut g, &t).unwrap();
        let row = &g.value(x)[..4 + 9];
        let pad = m.params().value(m.pos_emb).row(PAD_TAG);
        assert_eq!(&row[4..7], pad);
        let v = m.params().value(m.pos_emb).row(m.tag_id("v"));
        assert_eq!(&row[7..10], v);
    }

    #[test]
    fn output_rows_are_distributions() {
        let m = model(1);
        let t = tokenize_and_tag(&s("abxcd"), &lexicon());
        let p = m.probabilities(&t).unwrap();
        assert_eq!(p.shape(), &[5, 4]);
        for r in 0..5 {
            assert_abs_diff_eq!(p.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn union_label_space() {
        let mut d = PronunciationDictionary::new();
        d.insert('a', vec!["x1".into(), "x2".into()]).unwrap();
        d.insert('b', vec!["y1".into(), "x1".into()]).unwrap();
        d.insert('c', vec!["z".into()]).unwrap();
        assert_eq!(label_space(&d), [NOT_POLYPHONE, "x1", "x2", "y1"]);
    }

    fn toy_set(n: usize, seed: u64) -> Vec<BaselineInstance> {
        use rand::Rng;
        let mut r = rng::rng(seed);
        let corpus: Vec<AnnotatedSentence> = (0..n)
            .map(|_| {
                let y = r.gen_range(0..2);
                let marker = if y == 0 { 'x' } else { 'y' };
                let mut chars: Vec<char> = (0..5).map(|_| ['a', 'd'][r.gen_range(0..2)]).collect();
                chars[2] = 'z';
                chars[3] = marker;
                AnnotatedSentence::new(
                    chars,
                    vec![crate::corpus::Target {
                        position: 2,
                        label: if y == 0 { "p1".into() } else { "p2".into() },
                    }],
                )
                .unwrap()
            })
            .collect();
        prepare(&corpus, &crate::corpus::samples(&corpus), &lexicon())
    }

    #[test]
    fn learns_separable_task() {
        let mut m = model(1);
        let train = toy_set(120, 1);
        let dev = toy_set(40, 2);
        let init = mean_loss(&m, &train).unwrap();
        assert_abs_diff_eq!(init, libm::log(4.0), epsilon = 0.3);
        let cfg = TrainConfig {
            max_epochs: 20,
            batch_size: 8,
            patience: 5,
            adam: AdamConfig::with_lr(0.02),
            seed: 4,
        };
        let rep = fit(&mut m, &train, &dev, &cfg).unwrap();
        assert!(rep.best_dev_accuracy >= 0.9, "{rep:?}");
        assert_eq!(accuracy(&m, &dev).unwrap(), rep.best_dev_accuracy);
    }
}
