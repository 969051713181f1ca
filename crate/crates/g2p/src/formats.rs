//! Text file formats: corpus, dictionary, lexicon, folds, vocabulary,
//! inventory, pretraining documents and the TSV metric outputs.

use std::fmt::Write as _;

use g2p_core::baseline::Lexicon;
use g2p_core::corpus::{
    AnnotatedSentence, FoldAssignment, InventoryEntry, PolyphoneInventory, PronunciationDictionary, Target,
};
use g2p_core::encoder::{PretrainEpoch, Vocabulary};
use g2p_core::eval::{AccuracyReport, CroppedAttentionMap};
use g2p_core::pca::Pca;
use g2p_core::train::TrainEpoch;

use crate::error::{Error, Result};

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::parse(
            lineno,
            format!("expected {n} tab-separated fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

fn number(s: &str, lineno: usize, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(lineno, format!("{what} `{s}` is not a non-negative integer")))
}

/// One line per target: `sentence TAB position TAB label`.
pub fn parse_corpus(text: &str) -> Result<Vec<AnnotatedSentence>> {
    lines(text)
        .map(|(n, line)| {
            let f = fields(line, 3, n)?;
            let position = number(f[1], n, "position")?;
            let chars: Vec<char> = f[0].chars().collect();
            let target = Target {
                position,
                label: f[2].to_string(),
            };
            AnnotatedSentence::new(chars, vec![target]).map_err(|e| Error::parse(n, e.to_string()))
        })
        .collect()
}

pub fn write_corpus(corpus: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in corpus {
        let text = s.text();
        for t in &s.targets {
            writeln!(out, "{text}\t{}\t{}", t.position, t.label).unwrap();
        }
    }
    out
}

/// `character TAB pron1,pron2,...`
pub fn parse_dictionary(text: &str) -> Result<PronunciationDictionary> {
    let mut dict = PronunciationDictionary::new();
    for (n, line) in lines(text) {
        let f = fields(line, 2, n)?;
        let mut chars = f[0].chars();
        let ch = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            _ => return Err(Error::parse(n, format!("`{}` is not a single character", f[0]))),
        };
        let prons = f[1].split(',').map(|p| p.trim().to_string()).collect();
        dict.insert(ch, prons).map_err(|e| Error::parse(n, e.to_string()))?;
    }
    Ok(dict)
}

pub fn write_dictionary(dict: &PronunciationDictionary) -> String {
    let mut out = String::new();
    for (ch, prons) in dict.iter() {
        writeln!(out, "{ch}\t{}", prons.join(",")).unwrap();
    }
    out
}

/// `word TAB pos_tag`
pub fn parse_lexicon(text: &str) -> Result<Lexicon> {
    let mut lex = Lexicon::new();
    for (n, line) in lines(text) {
        let f = fields(line, 2, n)?;
        if f[0].is_empty() || f[1].is_empty() {
            return Err(Error::parse(n, "empty word or tag".into()));
        }
        lex.insert(f[0], f[1]);
    }
    Ok(lex)
}

pub fn write_lexicon(lex: &Lexicon) -> String {
    let mut out = String::new();
    for (w, t) in lex.iter() {
        writeln!(out, "{w}\t{t}").unwrap();
    }
    out
}

/// `sample_index TAB fold_id`, preceded by a `# k=<folds>` header. Without
/// the header the fold count is one past the largest fold id.
pub fn parse_folds(text: &str) -> Result<FoldAssignment> {
    let mut k = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("# k=") {
            k = Some(number(v, 1, "fold count")?);
        }
    }
    let mut pairs = Vec::new();
    for (n, line) in lines(text) {
        let f = fields(line, 2, n)?;
        pairs.push((number(f[0], n, "sample index")?, number(f[1], n, "fold id")?, n));
    }
    pairs.sort_unstable();
    for (expect, &(i, _, n)) in pairs.iter().enumerate() {
        if i != expect {
            return Err(Error::parse(n, format!("sample indices must cover 0..{}", pairs.len())));
        }
    }
    let k = k.unwrap_or_else(|| pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0));
    Ok(FoldAssignment::new(k, pairs.into_iter().map(|p| p.1).collect())?)
}

pub fn write_folds(folds: &FoldAssignment) -> String {
    let mut out = format!("# k={}\n", folds.k);
    for (i, f) in folds.assignment.iter().enumerate() {
        writeln!(out, "{i}\t{f}").unwrap();
    }
    out
}

const VOCAB_HEADER: &str = "# reserved ids: 0 PAD, 1 MASK, 2 UNK, 3 CLS, 4 SEP\n";

/// `character TAB id`
pub fn parse_vocab(text: &str) -> Result<Vocabulary> {
    let mut entries = Vec::new();
    for (n, line) in lines(text) {
        let f = fields(line, 2, n)?;
        let mut chars = f[0].chars();
        let ch = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            _ => return Err(Error::parse(n, format!("`{}` is not a single character", f[0]))),
        };
        entries.push((ch, number(f[1], n, "token id")?));
    }
    Ok(Vocabulary::from_entries(&entries)?)
}

pub fn write_vocab(vocab: &Vocabulary) -> String {
    let mut out = VOCAB_HEADER.to_string();
    for (c, id) in vocab.entries() {
        writeln!(out, "{c}\t{id}").unwrap();
    }
    out
}

/// `character TAB sample_count TAB label1,label2,...`
pub fn parse_inventory(text: &str) -> Result<PolyphoneInventory> {
    let mut entries = Vec::new();
    for (n, line) in lines(text) {
        let f = fields(line, 3, n)?;
        let ch = f[0]
            .chars()
            .next()
            .ok_or_else(|| Error::parse(n, "empty character".into()))?;
        entries.push((
            ch,
            InventoryEntry {
                labels: f[2].split(',').map(str::to_string).collect(),
                count: number(f[1], n, "sample count")?,
            },
        ));
    }
    Ok(PolyphoneInventory::from_entries(entries)?)
}

pub fn write_inventory(inv: &PolyphoneInventory) -> String {
    let mut out = String::new();
    for (ch, e) in inv.iter() {
        writeln!(out, "{ch}\t{}\t{}", e.count, e.labels.join(",")).unwrap();
    }
    out
}

/// Documents separated by blank lines, one sentence per line.
pub fn parse_documents(text: &str) -> Vec<Vec<Vec<char>>> {
    let mut docs = Vec::new();
    let mut current: Vec<Vec<char>> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else if !line.starts_with('#') {
            current.push(line.chars().collect());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

pub fn write_documents(docs: &[Vec<Vec<char>>]) -> String {
    let mut out = String::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in d {
            out.extend(s.iter());
            out.push('\n');
        }
    }
    out
}

/// Consecutive sentence pairs within each document.
pub fn document_pairs(docs: &[Vec<Vec<char>>]) -> Vec<(Vec<char>, Vec<char>)> {
    docs.iter()
        .flat_map(|d| d.windows(2).map(|w| (w[0].clone(), w[1].clone())))
        .collect()
}

pub fn f(x: f64) -> String {
    format!("{x:.6}")
}

pub fn pretrain_history_tsv(history: &[PretrainEpoch]) -> String {
    let mut out = "epoch\tmlm_loss\tnsp_loss\teval_mlm_loss\teval_nsp_loss\teval_nsp_accuracy\n".to_string();
    for e in history {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.epoch,
            f(e.train_mlm_loss),
            f(e.train_nsp_loss),
            f(e.eval.mlm_loss),
            f(e.eval.nsp_loss),
            f(e.eval.nsp_accuracy)
        )
        .unwrap();
    }
    out
}

pub fn train_history_tsv(history: &[TrainEpoch]) -> String {
    let mut out = "epoch\ttrain_loss\tdev_acc\n".to_string();
    for e in history {
        writeln!(out, "{}\t{}\t{}", e.epoch, f(e.train_loss), f(e.dev_accuracy)).unwrap();
    }
    out
}

/// One row per (method, fold) plus a mean row per method.
pub fn accuracy_tsv(reports: &[AccuracyReport]) -> String {
    let mut out = "method\tfold\tcorrect\ttotal\taccuracy\n".to_string();
    for r in reports {
        for fold in &r.folds {
            let t = fold.tally();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.method,
                fold.fold,
                t.correct,
                t.total,
                f(t.accuracy())
            )
            .unwrap();
        }
        writeln!(out, "{}\tmean\t-\t-\t{}\u{b1}{}", r.method, f(r.mean()), f(r.stddev())).unwrap();
    }
    out
}

/// `(2s+1)` lines of `(2s+1)` tab-separated weights.
pub fn attention_tsv(map: &CroppedAttentionMap) -> String {
    let mut out = String::new();
    for row in map.rows() {
        let cells: Vec<String> = row.iter().map(|&w| f(w)).collect();
        writeln!(out, "{}", cells.join("\t")).unwrap();
    }
    out
}

/// Header then `label TAB x TAB y` per point.
pub fn pca_tsv(labels: &[String], pca: &Pca) -> String {
    let mut out = "label\tx\ty\n".to_string();
    for (i, l) in labels.iter().enumerate() {
        let row = pca.coords.row(i);
        let y = row.get(1).copied().unwrap_or(0.0);
        writeln!(out, "{l}\t{}\t{}", f(row[0]), f(y)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_line_format() {
        let c = parse_corpus("AB中C\t2\tzhong1\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].chars.len(), 4);
        assert_eq!(c[0].targets[0].position, 2);
        assert_eq!(c[0].targets[0].label, "zhong1");
    }

    #[test]
    fn corpus_errors_carry_line_numbers() {
        let err = parse_corpus("# header\nAB\t0\tx\n中\t5\tzhong1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_corpus("AB\t0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_corpus("\t0\tx\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn dictionary_round_trip() {
        let text = "中\tzhong1,zhong4\n好\thao3\n";
        let d = parse_dictionary(text).unwrap();
        assert!(d.is_polyphonic('中'));
        assert_eq!(parse_dictionary(&write_dictionary(&d)).unwrap(), d);
        assert!(parse_dictionary("中\tzhong1,zhong1\n").is_err());
    }

    #[test]
    fn folds_round_trip() {
        let folds = FoldAssignment::new(3, vec![0, 2, 1, 1]).unwrap();
        assert_eq!(parse_folds(&write_folds(&folds)).unwrap(), folds);
        assert!(parse_folds("0\t0\n2\t1\n").is_err());
    }

    #[test]
    fn documents_round_trip() {
        let text = "ab\ncd\n\nef\ngh\nij\n";
        let docs = parse_documents(text);
        assert_eq!(docs.len(), 2);
        assert_eq!(write_documents(&docs), text);
        assert_eq!(document_pairs(&docs).len(), 3);
    }
}
