use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
/// Ids below this value are reserved tokens.
pub const RESERVED: usize = 5;

pub fn is_special(id: usize) -> bool {
    id < RESERVED
}

/// Character-level vocabulary with ids 0–4 reserved.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: BTreeMap<char, usize>,
}

impl Vocabulary {
    /// Sorted, deduplicated characters get ids from [`RESERVED`] upward.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut all: Vec<char> = chars.into_iter().collect();
        all.sort_unstable();
        all.dedup();
        let ids = all.iter().enumerate().map(|(i, &c)| (c, i + RESERVED)).collect();
        Self { chars: all, ids }
    }

    /// Rebuilds from explicit (character, id) entries; ids must cover
    /// `RESERVED..RESERVED + n` exactly once.
    pub fn from_entries(entries: &[(char, usize)]) -> Result<Self> {
        let n = entries.len();
        let mut chars = alloc::vec!['\0'; n];
        let mut seen = alloc::vec![false; n];
        let mut ids = BTreeMap::new();
        for &(c, id) in entries {
            if id < RESERVED || id >= RESERVED + n || seen[id - RESERVED] {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary id {id} for '{c}' is invalid or repeated"
                )));
            }
            if ids.insert(c, id).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "character '{c}' listed twice in vocabulary"
                )));
            }
            seen[id - RESERVED] = true;
            chars[id - RESERVED] = c;
        }
        Ok(Self { chars, ids })
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (char, usize)> + '_ {
        self.chars.iter().enumerate().map(|(i, &c)| (c, i + RESERVED))
    }

    pub fn ids(&self, chars: &[char]) -> Vec<usize> {
        chars.iter().map(|&c| self.id(c)).collect()
    }

    /// `[CLS] chars [SEP]`; character `i` lands at index `i + 1`.
    pub fn encode_sentence(&self, chars: &[char]) -> Vec<usize> {
        let mut out = Vec::with_capacity(chars.len() + 2);
        out.push(CLS);
        out.extend(chars.iter().map(|&c| self.id(c)));
        out.push(SEP);
        out
    }

    /// `[CLS] a [SEP] b [SEP]` from already-mapped ids.
    pub fn encode_pair(a: &[usize], b: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(a.len() + b.len() + 3);
        out.push(CLS);
        out.extend_from_slice(a);
        out.push(SEP);
        out.extend_from_slice(b);
        out.push(SEP);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_start_after_reserved() {
        let v = Vocabulary::from_chars("cabba".chars());
        assert_eq!(v.len(), RESERVED + 3);
        assert_eq!(v.id('a'), 5);
        assert_eq!(v.id('c'), 7);
        assert_eq!(v.id('z'), UNK);
        assert_eq!(v.char_of(6), Some('b'));
        assert_eq!(v.char_of(CLS), None);
        assert_eq!(v.encode_sentence(&['b']), alloc::vec![CLS, 6, SEP]);
    }

    #[test]
    fn entries_round_trip() {
        let v = Vocabulary::from_chars("xyz".chars());
        let e: Vec<(char, usize)> = v.entries().collect();
        assert_eq!(Vocabulary::from_entries(&e).unwrap(), v);
        assert!(Vocabulary::from_entries(&[('a', 5), ('b', 5)]).is_err());
        assert!(Vocabulary::from_entries(&[('a', 2)]).is_err());
    }
}
