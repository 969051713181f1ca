//! Accuracy bookkeeping, k-fold rotations and attention-map cropping.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::FoldAssignment;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exact-match accuracy of aligned label lists.
pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], gold: &[T]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub per_char: BTreeMap<char, Tally>,
}

impl FoldResult {
    pub fn tally(&self) -> Tally {
        let mut t = Tally::default();
        for v in self.per_char.values() {
            t.add(*v);
        }
        t
    }

    pub fn accuracy(&self) -> f64 {
        self.tally().accuracy()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub method: String,
    pub folds: Vec<FoldResult>,
}

impl AccuracyReport {
    pub fn per_char(&self) -> BTreeMap<char, Tally> {
        let mut out: BTreeMap<char, Tally> = BTreeMap::new();
        for f in &self.folds {
            for (&c, &t) in &f.per_char {
                out.entry(c).or_default().add(t);
            }
        }
        out
    }

    /// Σcorrect / Σtotal over every fold.
    pub fn overall(&self) -> f64 {
        let mut t = Tally::default();
        for f in &self.folds {
            t.add(f.tally());
        }
        t.accuracy()
    }

    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(FoldResult::accuracy).collect()
    }

    pub fn mean(&self) -> f64 {
        let a = self.fold_accuracies();
        a.iter().sum::<f64>() / a.len().max(1) as f64
    }

    /// Sample standard deviation of the fold accuracies.
    pub fn stddev(&self) -> f64 {
        let a = self.fold_accuracies();
        if a.len() < 2 {
            return 0.0;
        }
        let m = self.mean();
        libm::sqrt(a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (a.len() - 1) as f64)
    }
}

/// Test fold `test`, dev fold `(test + 1) % k`, the rest for training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub test: usize,
    pub dev: usize,
    pub train: Vec<usize>,
}

pub fn rotations(k: usize) -> Result<Vec<Rotation>> {
    if k < 3 {
        return Err(Error::InvalidFoldCount(k));
    }
    Ok((0..k)
        .map(|test| {
            let dev = (test + 1) % k;
            Rotation {
                test,
                dev,
                train: (0..k).filter(|&f| f != test && f != dev).collect(),
            }
        })
        .collect())
}

/// Sample indices of one rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(folds: &FoldAssignment, rotation: &Rotation) -> Self {
        let mut train: Vec<usize> = rotation.train.iter().flat_map(|&f| folds.fold(f)).collect();
        train.sort_unstable();
        let split = Self {
            train,
            dev: folds.fold(rotation.dev),
            test: folds.fold(rotation.test),
        };
        split.assert_disjoint();
        split
    }

    fn assert_disjoint(&self) {
        let test: BTreeSet<usize> = self.test.iter().copied().collect();
        assert!(
            self.train.iter().chain(&self.dev).all(|i| !test.contains(i)),
            "test fold leaked into training data"
        );
    }
}

/// Runs `run(rotation, split)` for every rotation; it must return one
/// predicted label per test sample, in `split.test` order.
pub fn cross_validate<F>(
    method: &str,
    folds: &FoldAssignment,
    chars: &[char],
    gold: &[String],
    mut run: F,
) -> Result<AccuracyReport>
where
    F: FnMut(&Rotation, &Split) -> Result<Vec<String>>,
{
    if folds.len() != gold.len() || chars.len() != gold.len() {
        return Err(Error::FoldMismatch {
            folds: folds.len(),
            samples: gold.len(),
        });
    }
    let mut out = Vec::with_capacity(folds.k);
    for rot in rotations(folds.k)? {
        let split = Split::new(folds, &rot);
        let predictions = run(&rot, &split)?;
        out.push(score_fold(rot.test, &split.test, &predictions, chars, gold)?);
    }
    Ok(AccuracyReport {
        method: method.into(),
        folds: out,
    })
}

pub fn score_fold(
    fold: usize,
    test: &[usize],
    predictions: &[String],
    chars: &[char],
    gold: &[String],
) -> Result<FoldResult> {
    if predictions.len() != test.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: test.len(),
        });
    }
    let mut per_char: BTreeMap<char, Tally> = BTreeMap::new();
    for (&i, p) in test.iter().zip(predictions) {
        let t = per_char.entry(chars[i]).or_default();
        t.total += 1;
        if *p == gold[i] {
            t.correct += 1;
        }
    }
    Ok(FoldResult { fold, per_char })
}

/// Mean first-block attention cropped to `(2s+1)²` around the polyphone.
#[derive(Debug, Clone, PartialEq)]
pub struct CroppedAttentionMap {
    pub context: usize,
    /// Row-major, out-of-bounds cells counted as zero.
    pub weights: Vec<f64>,
    /// Instances in which each cell lay inside the sentence.
    pub in_bounds: Vec<usize>,
    pub instances: usize,
    /// Out-of-bounds cells over all instances.
    pub out_of_bounds: usize,
}

impl CroppedAttentionMap {
    pub fn size(&self) -> usize {
        2 * self.context + 1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size() + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.size())
    }

    /// Mean over instances where the cell was inside the sentence.
    pub fn in_bounds_mean(&self, row: usize, col: usize) -> Option<f64> {
        let k = row * self.size() + col;
        (self.in_bounds[k] > 0).then(|| self.weights[k] * self.instances as f64 / self.in_bounds[k] as f64)
    }

    /// Spearman correlation between |key offset| and the in-bounds mean
    /// weight along the polyphone's own row. Negative means attention
    /// decays with distance.
    pub fn locality(&self) -> Result<f64> {
        let s = self.context;
        let (mut dist, mut weight) = (Vec::new(), Vec::new());
        for col in 0..self.size() {
            if let Some(w) = self.in_bounds_mean(s, col) {
                dist.push((col as f64 - s as f64).abs());
                weight.push(w);
            }
        }
        spearman(&dist, &weight)
    }
}

/// Crops one heads×len×len map around `center`, averaging heads. Returns the
/// cropped values and an in-bounds flag per cell.
pub fn crop_attention(attention: &Tensor, center: usize, context: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let shape = attention.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Shape {
            op: "crop_attention",
            left: shape.to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (heads, len) = (shape[0], shape[1]);
    if center >= len {
        return Err(Error::PositionOutOfRange { position: center, len });
    }
    let size = 2 * context + 1;
    let mut out = vec![0.0; size * size];
    let mut inside = vec![false; size * size];
    let at = |i: usize| -> Option<usize> {
        let p = center as isize + i as isize - context as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    };
    for r in 0..size {
        for c in 0..size {
            if let (Some(q), Some(k)) = (at(r), at(c)) {
                let sum: f64 = (0..heads).map(|h| attention.data()[(h * len + q) * len + k]).sum();
                out[r * size + c] = sum / heads as f64;
                inside[r * size + c] = true;
            }
        }
    }
    Ok((out, inside))
}

/// Averages cropped maps over instances (heads are averaged first).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAccumulator {
    context: usize,
    sum: Vec<f64>,
    in_bounds: Vec<usize>,
    instances: usize,
}

impl AttentionAccumulator {
    pub fn new(context: usize) -> Result<Self> {
        if context == 0 {
            return Err(Error::InvalidConfig("context size must be at least 1".into()));
        }
        let n = (2 * context + 1) * (2 * context + 1);
        Ok(Self {
            context,
            sum: vec![0.0; n],
            in_bounds: vec![0; n],
            instances: 0,
        })
    }

    pub fn add(&mut self, attention: &Tensor, center: usize) -> Result<()> {
        let (crop, inside) = crop_attention(attention, center, self.context)?;
        for (k, (v, i)) in crop.iter().zip(&inside).enumerate() {
            self.sum[k] += v;
            self.in_bounds[k] += *i as usize;
        }
        self.instances += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<CroppedAttentionMap> {
        if self.instances == 0 {
            return Err(Error::Degenerate("no attention instances".into()));
        }
        let n = self.instances as f64;
        let out_of_bounds = self.in_bounds.iter().map(|&c| self.instances - c).sum();
        Ok(CroppedAttentionMap {
            context: self.context,
            weights: self.sum.iter().map(|v| v / n).collect(),
            in_bounds: self.in_bounds,
            instances: self.instances,
            out_of_bounds,
        })
    }
}

/// Ranks with ties averaged, 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if x.len() < 2 || sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    pearson(&ranks(x), &ranks(y))
}
