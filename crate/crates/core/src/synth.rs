//! Synthetic marker corpus.
//!
//! Every sentence holds one pseudo-polyphone. Its label is fixed by a marker
//! character placed at a nonzero offset of at most `window` positions; each
//! (polyphone, label) pair owns a distinct marker. Remaining positions are
//! filled from the filler set of the sentence's document topic, so
//! consecutive sentences of a document share vocabulary.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{AnnotatedSentence, PronunciationDictionary, Target};
use crate::error::{Error, Result};
use crate::rng;

const INITIALS: [&str; 21] = [
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s",
];
const FINALS: [&str; 14] = [
    "a", "o", "e", "i", "u", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong",
];
const FIRST_CHAR: u32 = 0x4E00;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Monophonic filler characters, split evenly across topics.
    pub fillers: usize,
    pub topics: usize,
    /// Candidate count per pseudo-polyphone (2..=5 each).
    pub candidates: Vec<usize>,
    /// Marker offset bound `w`; offsets are drawn from `[-w, w] \ {0}`.
    pub window: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples_per_char: usize,
    pub sentences_per_doc: usize,
    /// Optional per-polyphone label probabilities; uniform when absent.
    pub label_weights: Option<Vec<Vec<f64>>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fillers: 64,
            topics: 32,
            candidates: vec![2, 3, 4, 2, 3],
            window: 3,
            min_len: 4,
            max_len: 7,
            samples_per_char: 2000,
            sentences_per_doc: 8,
            label_weights: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthConfig(m));
        if self.candidates.is_empty() {
            return bad("no pseudo-polyphones".into());
        }
        if let Some(&c) = self.candidates.iter().find(|&&c| !(2..=5).contains(&c)) {
            return bad(format!("candidate count {c} outside 2..=5"));
        }
        if self.topics == 0 || self.fillers == 0 || !self.fillers.is_multiple_of(self.topics) {
            return bad(format!(
                "{} fillers do not split into {} topics",
                self.fillers, self.topics
            ));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.window >= self.min_len {
            return bad(format!(
                "window {} must be below the minimum sentence length {}",
                self.window, self.min_len
            ));
        }
        if self.sentences_per_doc < 2 {
            return bad("documents need at least two sentences".into());
        }
        if let Some(w) = &self.label_weights {
            if w.len() != self.candidates.len()
                || w.iter().zip(&self.candidates).any(|(row, &n)| {
                    row.len() != n || row.iter().any(|&p| p.is_nan() || p < 0.0) || row.iter().sum::<f64>() <= 0.0
                })
            {
                return bad("label weights must match candidate counts and be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.samples_per_char * self.candidates.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Vec<AnnotatedSentence>,
    pub dictionary: PronunciationDictionary,
    /// (word, POS tag) entries for the baseline tokenizer.
    pub lexicon: Vec<(String, String)>,
    /// Consecutive corpus indices grouped by document.
    pub documents: Vec<Vec<usize>>,
    pub polyphones: Vec<char>,
    /// Marker of (polyphone, label index).
    pub markers: BTreeMap<(char, usize), char>,
}

impl SynthCorpus {
    /// Consecutive sentence pairs inside each document.
    pub fn sentence_pairs(&self) -> Vec<(Vec<char>, Vec<char>)> {
        self.documents
            .iter()
            .flat_map(|d| d.windows(2))
            .map(|w| (self.corpus[w[0]].chars.clone(), self.corpus[w[1]].chars.clone()))
            .collect()
    }
}

fn nth_char(i: usize) -> char {
    char::from_u32(FIRST_CHAR + i as u32).expect("inside the CJK block")
}

fn syllable(i: usize) -> String {
    format!(
        "{}{}",
        INITIALS[i % INITIALS.len()],
        FINALS[(i / INITIALS.len()) % FINALS.len()]
    )
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut r = rng::rng(seed);

    let fillers: Vec<char> = (0..config.fillers).map(nth_char).collect();
    let polyphones: Vec<char> = (0..config.candidates.len())
        .map(|i| nth_char(config.fillers + i))
        .collect();
    let mut next = config.fillers + polyphones.len();
    let mut markers = BTreeMap::new();
    for (p, &n) in polyphones.iter().zip(&config.candidates) {
        for k in 0..n {
            markers.insert((*p, k), nth_char(next));
            next += 1;
        }
    }

    let mut dictionary = PronunciationDictionary::new();
    let mut lexicon = Vec::new();
    for (i, &f) in fillers.iter().enumerate() {
        dictionary.insert(f, vec![format!("{}{}", syllable(i), 1 + i % 4)])?;
        let tag = if (i / (config.fillers / config.topics)).is_multiple_of(2) {
            "n"
        } else {
            "v"
        };
        lexicon.push((f.to_string(), tag.to_string()));
    }
    let poly_base = config.fillers;
    for (pi, (&p, &n)) in polyphones.iter().zip(&config.candidates).enumerate() {
        let syl = syllable(poly_base + pi * 7);
        dictionary.insert(p, (1..=n).map(|t| format!("{syl}{t}")).collect())?;
        lexicon.push((p.to_string(), "x".to_string()));
    }
    for (j, (&(p, k), &m)) in markers.iter().enumerate() {
        dictionary.insert(m, vec![format!("{}{}", syllable(next + 3 * j), 1 + k % 4)])?;
        lexicon.push((m.to_string(), "m".to_string()));
        lexicon.push((format!("{m}{p}"), "w".to_string()));
        lexicon.push((format!("{p}{m}"), "w".to_string()));
    }
    lexicon.sort();

    // exactly samples_per_char sentences per polyphone, in shuffled order
    let mut order: Vec<usize> = (0..polyphones.len())
        .flat_map(|p| core::iter::repeat_n(p, config.samples_per_char))
        .collect();
    order.shuffle(&mut r);

    let per_topic = config.fillers / config.topics;
    let offsets: Vec<isize> = (-(config.window as isize)..=config.window as isize)
        .filter(|&d| d != 0)
        .collect();
    let mut corpus = Vec::with_capacity(order.len());
    let mut documents = Vec::new();
    for chunk in order.chunks(config.sentences_per_doc) {
        let topic = r.gen_range(0..config.topics);
        let topic_fillers = &fillers[topic * per_topic..(topic + 1) * per_topic];
        let mut doc = Vec::with_capacity(chunk.len());
        for &pi in chunk {
            let p = polyphones[pi];
            let label = match &config.label_weights {
                Some(w) => weighted_index(&w[pi], &mut r),
                None => r.gen_range(0..config.candidates[pi]),
            };
            let len = r.gen_range(config.min_len..=config.max_len);
            let pos = r.gen_range(0..len);
            let valid: Vec<isize> = offsets
                .iter()
                .copied()
                .filter(|&d| {
                    let m = pos as isize + d;
                    m >= 0 && (m as usize) < len
                })
                .collect();
            let d = *valid.choose(&mut r).expect("len > 1 leaves a valid offset");
            let mpos = (pos as isize + d) as usize;
            let chars: Vec<char> = (0..len)
                .map(|i| {
                    if i == pos {
                        p
                    } else if i == mpos {
                        markers[&(p, label)]
                    } else {
                        *topic_fillers.choose(&mut r).expect("topics are non-empty")
                    }
                })
                .collect();
            let label_str = dictionary.get(p).expect("inserted above")[label].clone();
            doc.push(corpus.len());
            corpus.push(AnnotatedSentence::new(
                chars,
                vec![Target {
                    position: pos,
                    label: label_str,
                }],
            )?);
        }
        documents.push(doc);
    }

    Ok(SynthCorpus {
        corpus,
        dictionary,
        lexicon,
        documents,
        polyphones,
        markers,
    })
}

fn weighted_index(weights: &[f64], r: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
