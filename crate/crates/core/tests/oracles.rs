use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

use g2p_core::corpus::{build_inventory, samples, stratified_kfold, AnnotatedSentence, PronunciationDictionary};
use g2p_core::encoder::{mask_for_mlm, EncoderConfig, EncoderModel, MASK};
use g2p_core::eval::{cross_validate, rotations, AttentionAccumulator};
use g2p_core::heads::{HeadArch, HeadConfig, HeadRegistry};
use g2p_core::nn::{init_tensor, Init};
use g2p_core::pca::pca;
use g2p_core::rng;
use g2p_core::synth::{generate_synthetic, SynthConfig};
use g2p_core::Tensor;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    init_tensor(rows, cols, Init::Normal(2.0), &mut rng::rng(seed))
}

/// Brute-force covariance and nalgebra's symmetric eigendecomposition.
fn oracle_components(data: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (data.rows(), data.cols());
    let m = DMatrix::from_row_slice(n, d, data.data());
    let mean = m.row_mean();
    let centred = DMatrix::from_fn(n, d, |r, c| m[(r, c)] - mean[c]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

#[test]
fn pca_matches_brute_force_eigendecomposition() {
    for seed in 0..200 {
        let data = random_matrix(5, 3, seed);
        let p = pca(&data, 3).unwrap();
        let (values, vectors) = oracle_components(&data);
        for k in 0..3 {
            assert_abs_diff_eq!(p.variances[k], values[k].max(0.0), epsilon = 1e-6);
            let ours = p.components.row(k);
            let sign = if ours.iter().zip(&vectors[k]).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
            for (a, b) in ours.iter().zip(&vectors[k]) {
                assert_abs_diff_eq!(*a, sign * b, epsilon = 1e-6);
            }
            // projection onto the oracle axis, same sign
            for r in 0..5 {
                let centred: Vec<f64> = data.row(r).iter().zip(&p.mean).map(|(x, m)| x - m).collect();
                let proj: f64 = centred.iter().zip(&vectors[k]).map(|(x, v)| x * v).sum();
                assert_abs_diff_eq!(p.coords.row(r)[k], sign * proj, epsilon = 1e-6);
            }
        }
    }
}

#[test]
fn pca_sign_convention() {
    for seed in 0..50 {
        let p = pca(&random_matrix(7, 4, seed), 2).unwrap();
        for k in 0..2 {
            let row = p.components.row(k);
            let big = row
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }
}

fn corpus_from(chars: &[(char, usize)], seed: u64) -> (Vec<AnnotatedSentence>, PronunciationDictionary) {
    let mut r = rng::rng(seed);
    let mut dict = PronunciationDictionary::new();
    let mut corpus = Vec::new();
    for &(ch, n) in chars {
        dict.insert(ch, vec!["a1".into(), "a2".into()]).unwrap();
        for _ in 0..n {
            let label = if r.gen::<bool>() { "a1" } else { "a2" };
            corpus.push(AnnotatedSentence::single(&ch.to_string(), 0, label).unwrap());
        }
    }
    (corpus, dict)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_folds_by_exhaustive_count(
        counts in prop::collection::vec(1usize..60, 1..6),
        k in 2usize..11,
        seed in 0u64..10_000,
    ) {
        let chars: Vec<(char, usize)> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| (char::from_u32(0x4E00 + i as u32).unwrap(), n))
            .collect();
        let (corpus, dict) = corpus_from(&chars, seed);
        let inventory = build_inventory(&corpus, &dict, 0).unwrap();
        let folds = stratified_kfold(&corpus, &inventory, k, seed).unwrap().folds;
        let s = samples(&corpus);
        prop_assert_eq!(folds.len(), s.len());

        // every sample in exactly one fold
        let mut seen = vec![0usize; s.len()];
        for f in 0..k {
            for i in folds.fold(f) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));

        // per character and overall, fold counts differ by at most one
        let mut table: BTreeMap<char, Vec<usize>> = BTreeMap::new();
        for (i, sr) in s.iter().enumerate() {
            table.entry(corpus[sr.sentence].target_char(sr.target)).or_insert_with(|| vec![0; k])[folds.assignment[i]] += 1;
        }
        for (ch, row) in &table {
            let (lo, hi) = (row.iter().min().unwrap(), row.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{} {:?}", ch, row);
            let total: usize = row.iter().sum();
            prop_assert_eq!(total, chars.iter().find(|c| c.0 == *ch).unwrap().1);
        }
        let sizes = folds.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rotations_partition_folds(k in 3usize..15) {
        let rots = rotations(k).unwrap();
        prop_assert_eq!(rots.len(), k);
        for r in &rots {
            prop_assert_ne!(r.test, r.dev);
            prop_assert_eq!(r.train.len(), k - 2);
            prop_assert!(!r.train.contains(&r.test) && !r.train.contains(&r.dev));
        }
        let mut tests: Vec<usize> = rots.iter().map(|r| r.test).collect();
        tests.sort_unstable();
        prop_assert_eq!(tests, (0..k).collect::<Vec<_>>());
    }
}

#[test]
fn ten_fold_rotation_is_eight_one_one() {
    let rots = rotations(10).unwrap();
    assert_eq!(rots.len(), 10);
    assert!(rots.iter().all(|r| r.train.len() == 8));
}

#[test]
fn majority_predictor_scores_majority_rate() {
    let (corpus, dict) = corpus_from(&[('甲', 97), ('乙', 53)], 7);
    let inventory = build_inventory(&corpus, &dict, 0).unwrap();
    let folds = stratified_kfold(&corpus, &inventory, 5, 3).unwrap().folds;
    let s = samples(&corpus);
    let chars: Vec<char> = s.iter().map(|x| corpus[x.sentence].target_char(x.target)).collect();
    let gold: Vec<String> = s
        .iter()
        .map(|x| corpus[x.sentence].targets[x.target].label.clone())
        .collect();
    let mut majority = BTreeMap::new();
    for ch in ['甲', '乙'] {
        let a1 = (0..gold.len()).filter(|&i| chars[i] == ch && gold[i] == "a1").count();
        let total = chars.iter().filter(|&&c| c == ch).count();
        majority.insert(ch, if 2 * a1 >= total { "a1" } else { "a2" });
    }
    let expected = (0..gold.len()).filter(|&i| gold[i] == majority[&chars[i]]).count() as f64 / gold.len() as f64;
    let report = cross_validate("majority", &folds, &chars, &gold, |_, split| {
        Ok(split.test.iter().map(|&i| majority[&chars[i]].to_string()).collect())
    })
    .unwrap();
    assert_abs_diff_eq!(report.overall(), expected, epsilon = 1e-12);
    let oracle = cross_validate("oracle", &folds, &chars, &gold, |_, split| {
        Ok(split.test.iter().map(|&i| gold[i].clone()).collect())
    })
    .unwrap();
    assert!(oracle.fold_accuracies().iter().all(|&a| a == 1.0));
}

#[test]
fn encoder_attention_rows_sum_to_one() {
    let mut r = rng::rng(2024);
    for m in 0..100u64 {
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let width = heads * r.gen_range(1..5);
        let vocab_size = r.gen_range(6..20);
        let config = EncoderConfig {
            vocab_size,
            width,
            layers: r.gen_range(1..3),
            heads,
            ff_width: r.gen_range(4..20),
            max_len: 24,
            dropout: 0.1,
        };
        let model = EncoderModel::new(config, m).unwrap();
        let len = r.gen_range(1..20);
        let tokens: Vec<usize> = (0..len).map(|_| r.gen_range(3..vocab_size)).collect();
        let (_, layers) = model.encode_with_attention(&tokens).unwrap();
        for att in layers {
            for row in att.data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
    }
}

#[test]
fn head_attention_rows_sum_to_one() {
    for m in 0..100u64 {
        let mut config = HeadConfig::sized(HeadArch::Transformer, 6, 8);
        config.heads = [1, 2, 4, 8][(m % 4) as usize];
        let mut reg = HeadRegistry::new(config, m).unwrap();
        reg.register_polyphone('中', vec!["a".into(), "b".into()]).unwrap();
        let len = 1 + (m as usize % 11);
        let features = random_matrix(len, 6, m + 500);
        let att = reg.attention(&features, len / 2, '中').unwrap();
        assert_eq!(att.shape(), &[config.heads, len, len]);
        for row in att.data().chunks(len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn crop_averaging_order_matches_flat_mean() {
    let a = Tensor::new(
        vec![2, 3, 3],
        random_matrix(6, 3, 1).data().iter().map(|x| x.abs()).collect(),
    )
    .unwrap();
    let b = Tensor::new(
        vec![2, 3, 3],
        random_matrix(6, 3, 2).data().iter().map(|x| x.abs()).collect(),
    )
    .unwrap();
    let mut acc = AttentionAccumulator::new(1).unwrap();
    acc.add(&a, 1).unwrap();
    acc.add(&b, 1).unwrap();
    let map = acc.finish().unwrap();
    for q in 0..3 {
        for k in 0..3 {
            let flat = [&a, &b]
                .iter()
                .flat_map(|t| (0..2).map(move |h| t.data()[h * 9 + q * 3 + k]))
                .sum::<f64>()
                / 4.0;
            assert_abs_diff_eq!(map.get(q, k), flat, epsilon = 1e-12);
        }
    }
}

#[test]
fn single_character_attention_is_one_at_centre() {
    let mut acc = AttentionAccumulator::new(5).unwrap();
    acc.add(&Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap(), 0).unwrap();
    let map = acc.finish().unwrap();
    assert_eq!(map.size(), 11);
    for q in 0..11 {
        for k in 0..11 {
            assert_eq!(map.get(q, k), if (q, k) == (5, 5) { 1.0 } else { 0.0 });
        }
    }
}

/// |x - n·p| within five binomial standard deviations.
fn within_binomial(x: usize, n: usize, p: f64) -> bool {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (x as f64 - n as f64 * p).abs() <= 5.0 * sd
}

#[test]
fn mlm_selection_and_corruption_rates() {
    let vocab = 40;
    let mut r = rng::rng(11);
    let (mut eligible, mut selected, mut masked, mut replaced, mut kept) = (0, 0, 0, 0, 0);
    for _ in 0..10_000 {
        let len = r.gen_range(5..30);
        let mut tokens = vec![3];
        tokens.extend((0..len).map(|_| r.gen_range(5..vocab)));
        tokens.push(4);
        let m = mask_for_mlm(&tokens, 0.15, vocab, &mut r).unwrap();
        eligible += len;
        selected += m.targets.len();
        assert_eq!(m.tokens[0], 3);
        assert_eq!(m.tokens[len + 1], 4);
        for &(pos, orig) in &m.targets {
            assert_eq!(tokens[pos], orig);
            match m.tokens[pos] {
                MASK => masked += 1,
                t if t == orig => kept += 1,
                _ => replaced += 1,
            }
        }
        let touched: Vec<usize> = m.targets.iter().map(|t| t.0).collect();
        for (i, (&got, &orig)) in m.tokens.iter().zip(&tokens).enumerate() {
            if !touched.contains(&i) {
                assert_eq!(got, orig);
            }
        }
    }
    // stochastic rounding keeps the expected fraction exact; the only
    // randomness is one Bernoulli per sentence
    assert!(
        (selected as f64 / eligible as f64 - 0.15).abs() < 0.002,
        "{selected}/{eligible}"
    );
    let same = 1.0 / (vocab - 5) as f64;
    assert!(within_binomial(masked, selected, 0.8));
    assert!(within_binomial(replaced, selected, 0.1 * (1.0 - same)));
    assert!(within_binomial(kept, selected, 0.1 + 0.1 * same));
}

#[test]
fn synthetic_labels_are_uniform_per_character() {
    let config = SynthConfig::default();
    let s = generate_synthetic(&config, 5).unwrap();
    for (&p, &n) in s.polyphones.iter().zip(&config.candidates) {
        let labels = s.dictionary.get(p).unwrap();
        for l in labels {
            let count = s
                .corpus
                .iter()
                .filter(|x| x.target_char(0) == p && &x.targets[0].label == l)
                .count();
            assert!(
                within_binomial(count, config.samples_per_char, 1.0 / n as f64),
                "{p} {l}: {count}"
            );
        }
    }
}
