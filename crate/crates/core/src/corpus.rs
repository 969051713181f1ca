//! Annotated corpora, pronunciation dictionaries, the polyphone inventory,
//! stratified folds and dictionary-first routing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Target {
    pub position: usize,
    pub label: String,
}

/// A character sequence with one or more labeled polyphone positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnnotatedSentence {
    pub chars: Vec<char>,
    pub targets: Vec<Target>,
}

impl AnnotatedSentence {
    pub fn new(chars: Vec<char>, targets: Vec<Target>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::EmptySentence);
        }
        if let Some(t) = targets.iter().find(|t| t.position >= chars.len()) {
            return Err(Error::PositionOutOfRange {
                position: t.position,
                len: chars.len(),
            });
        }
        Ok(Self { chars, targets })
    }

    pub fn single(text: &str, position: usize, label: &str) -> Result<Self> {
        Self::new(
            text.chars().collect(),
            vec![Target {
                position,
                label: label.to_string(),
            }],
        )
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn target_char(&self, target: usize) -> char {
        self.chars[self.targets[target].position]
    }
}

/// Index of one (sentence, target) pair; the unit of classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub sentence: usize,
    pub target: usize,
}

/// Flattens a corpus into its samples, in sentence then target order.
pub fn samples(corpus: &[AnnotatedSentence]) -> Vec<SampleRef> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(s, sent)| (0..sent.targets.len()).map(move |t| SampleRef { sentence: s, target: t }))
        .collect()
}

/// Character → ordered pronunciation list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PronunciationDictionary {
    entries: BTreeMap<char, Vec<String>>,
}

impl PronunciationDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ch: char, pronunciations: Vec<String>) -> Result<()> {
        if pronunciations.is_empty() {
            return Err(Error::InvalidDictionaryEntry {
                ch,
                reason: "no pronunciations".to_string(),
            });
        }
        for (i, p) in pronunciations.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::InvalidDictionaryEntry {
                    ch,
                    reason: "empty pronunciation".to_string(),
                });
            }
            if pronunciations[..i].contains(p) {
                return Err(Error::InvalidDictionaryEntry {
                    ch,
                    reason: format!("duplicate pronunciation `{p}`"),
                });
            }
        }
        if self.entries.contains_key(&ch) {
            return Err(Error::InvalidDictionaryEntry {
                ch,
                reason: "duplicate character".to_string(),
            });
        }
        self.entries.insert(ch, pronunciations);
        Ok(())
    }

    pub fn get(&self, ch: char) -> Option<&[String]> {
        self.entries.get(&ch).map(Vec::as_slice)
    }

    pub fn is_polyphonic(&self, ch: char) -> bool {
        self.entries.get(&ch).is_some_and(|p| p.len() >= 2)
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &[String])> {
        self.entries.iter().map(|(c, p)| (*c, p.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Union of every pronunciation of every polyphonic character, sorted.
    pub fn polyphone_labels(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .entries
            .values()
            .filter(|p| p.len() >= 2)
            .flatten()
            .cloned()
            .collect();
        all.sort();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InventoryEntry {
    /// Candidate labels; the index into this list is the class id.
    pub labels: Vec<String>,
    pub count: usize,
}

/// Polyphonic characters admitted to modeling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolyphoneInventory {
    entries: BTreeMap<char, InventoryEntry>,
    /// Samples of retained characters.
    pub retained: usize,
    /// All polyphone samples seen while building.
    pub total: usize,
    /// Polyphonic characters that did not pass the threshold.
    pub dropped: Vec<char>,
}

impl PolyphoneInventory {
    pub fn from_entries(entries: Vec<(char, InventoryEntry)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ch, e) in entries {
            if e.labels.len() < 2 {
                return Err(Error::TooFewCandidates {
                    ch,
                    count: e.labels.len(),
                });
            }
            if map.insert(ch, e).is_some() {
                return Err(Error::DuplicateRegistration(ch));
            }
        }
        let retained = map.values().map(|e| e.count).sum();
        Ok(Self {
            entries: map,
            retained,
            total: retained,
            dropped: Vec::new(),
        })
    }

    /// Retained fraction of polyphone samples.
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.retained as f64 / self.total as f64
        }
    }

    pub fn contains(&self, ch: char) -> bool {
        self.entries.contains_key(&ch)
    }

    pub fn get(&self, ch: char) -> Option<&InventoryEntry> {
        self.entries.get(&ch)
    }

    pub fn labels(&self, ch: char) -> Option<&[String]> {
        self.entries.get(&ch).map(|e| e.labels.as_slice())
    }

    pub fn label_index(&self, ch: char, label: &str) -> Option<usize> {
        self.labels(ch)?.iter().position(|l| l == label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &InventoryEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    pub fn chars(&self) -> Vec<char> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Keeps polyphonic characters with strictly more than `min_count` samples.
pub fn build_inventory(
    corpus: &[AnnotatedSentence],
    dict: &PronunciationDictionary,
    min_count: usize,
) -> Result<PolyphoneInventory> {
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    for sent in corpus {
        for t in &sent.targets {
            let ch = sent.chars[t.position];
            let prons = dict.get(ch).ok_or(Error::MissingFromDictionary(ch))?;
            if !prons.contains(&t.label) {
                return Err(Error::LabelNotCandidate {
                    ch,
                    label: t.label.clone(),
                });
            }
            if prons.len() >= 2 {
                *counts.entry(ch).or_default() += 1;
            }
        }
    }
    let total = counts.values().sum();
    let mut inv = PolyphoneInventory {
        total,
        ..PolyphoneInventory::default()
    };
    for (ch, count) in counts {
        if count > min_count {
            inv.retained += count;
            inv.entries.insert(
                ch,
                InventoryEntry {
                    labels: dict.get(ch).expect("checked above").to_vec(),
                    count,
                },
            );
        } else {
            inv.dropped.push(ch);
        }
    }
    Ok(inv)
}

/// Drops targets whose character is not in the inventory, and sentences left
/// without targets.
pub fn retain_inventory(corpus: &[AnnotatedSentence], inventory: &PolyphoneInventory) -> Vec<AnnotatedSentence> {
    corpus
        .iter()
        .filter_map(|s| {
            let targets: Vec<Target> = s
                .targets
                .iter()
                .filter(|t| inventory.contains(s.chars[t.position]))
                .cloned()
                .collect();
            (!targets.is_empty()).then(|| AnnotatedSentence {
                chars: s.chars.clone(),
                targets,
            })
        })
        .collect()
}

/// Sample index → fold id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    pub fn new(k: usize, assignment: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidFoldCount(k));
        }
        if let Some(&bad) = assignment.iter().find(|&&f| f >= k) {
            return Err(Error::InvalidConfig(format!("fold id {bad} not below k = {k}")));
        }
        Ok(Self { k, assignment })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Sample indices of fold `f`, ascending.
    pub fn fold(&self, f: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == f)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stratified {
    pub folds: FoldAssignment,
    /// Characters with fewer samples than folds; some folds hold none of them.
    pub sparse: Vec<char>,
}

/// Seeded shuffle per character, then one round-robin pointer shared across
/// characters. Per-character fold counts differ by at most one, and so do
/// total fold sizes.
pub fn stratified_kfold(
    corpus: &[AnnotatedSentence],
    inventory: &PolyphoneInventory,
    k: usize,
    seed: u64,
) -> Result<Stratified> {
    if k < 2 {
        return Err(Error::InvalidFoldCount(k));
    }
    let all = samples(corpus);
    let mut by_char: BTreeMap<char, Vec<usize>> = BTreeMap::new();
    for (i, s) in all.iter().enumerate() {
        let ch = corpus[s.sentence].target_char(s.target);
        if !inventory.contains(ch) {
            return Err(Error::NotInInventory(ch));
        }
        by_char.entry(ch).or_default().push(i);
    }
    let mut r = rng::rng(seed);
    let mut assignment = vec![0; all.len()];
    let mut pointer = 0;
    let mut sparse = Vec::new();
    for (ch, mut idx) in by_char {
        if idx.len() < k {
            sparse.push(ch);
        }
        idx.shuffle(&mut r);
        for i in idx {
            assignment[i] = pointer % k;
            pointer += 1;
        }
    }
    Ok(Stratified {
        folds: FoldAssignment { k, assignment },
        sparse,
    })
}

/// Output of [`g2p_route`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routed {
    pub pronunciations: Vec<String>,
    /// Positions of polyphonic characters outside the inventory that fell back
    /// to their first dictionary pronunciation.
    pub fallbacks: Vec<usize>,
}

/// Dictionary lookup for monophonic characters, `predictor(sentence, position)`
/// for inventory characters.
pub fn g2p_route<F>(
    sentence: &[char],
    dict: &PronunciationDictionary,
    inventory: &PolyphoneInventory,
    mut predictor: F,
) -> Result<Routed>
where
    F: FnMut(&[char], usize) -> Result<String>,
{
    let mut out = Routed {
        pronunciations: Vec::with_capacity(sentence.len()),
        fallbacks: Vec::new(),
    };
    for (position, &ch) in sentence.iter().enumerate() {
        let prons = dict.get(ch).ok_or(Error::UnknownCharacter { ch, position })?;
        if let Some(labels) = inventory.labels(ch) {
            let label = predictor(sentence, position)?;
            if !labels.contains(&label) {
                return Err(Error::PredictorOutOfCandidates { ch, label });
            }
            out.pronunciations.push(label);
        } else {
            if prons.len() >= 2 {
                out.fallbacks.push(position);
            }
            out.pronunciations.push(prons[0].clone());
        }
    }
    Ok(out)
}
