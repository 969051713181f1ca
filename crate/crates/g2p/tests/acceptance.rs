//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};

use g2p::config::RunConfig;
use g2p::pipeline;
use g2p_core::baseline::{label_space, tokenize_and_tag, BaselineConfig, BaselineModel, Lexicon};
use g2p_core::corpus::{build_inventory, samples, stratified_kfold};
use g2p_core::encoder::{EncoderConfig, EncoderModel, Vocabulary};
use g2p_core::eval::{cross_validate, rotations, AttentionAccumulator};
use g2p_core::gradcheck::{check_encoder, check_heads, check_ops};
use g2p_core::heads::{featurize, train_head, HeadArch, HeadConfig, HeadRegistry};
use g2p_core::nn::{init_tensor, Init};
use g2p_core::pca::pca;
use g2p_core::rng;
use g2p_core::synth::{generate_synthetic, SynthConfig};
use g2p_core::train::TrainConfig;
use g2p_core::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn cfg_in(dir: &Path, preset: &str, extra: &[&str]) -> Result<RunConfig, String> {
    let mut overrides = vec![format!("paths.out_dir={:?}", dir.display().to_string())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::layered(preset, None, &overrides).map_err(e2s)
}

fn gradients() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let ops = check_ops(17).map_err(e2s)?;
    let mut worst = 0.0f64;
    for (name, r) in &ops {
        check(r.passes(TOL), format!("op {name}: {r:?}"))?;
        worst = worst.max(r.max_rel_error);
    }
    let enc = check_encoder(5).map_err(e2s)?;
    check(enc.passes(TOL), format!("encoder: {enc:?}"))?;
    worst = worst.max(enc.max_rel_error);
    let heads = check_heads(3).map_err(e2s)?;
    check(heads.len() == 3, "three head architectures")?;
    for (arch, r) in &heads {
        check(r.passes(TOL), format!("{arch:?}: {r:?}"))?;
        worst = worst.max(r.max_rel_error);
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(120), format!("suite took {took:?}"))?;
    Ok(format!(
        "{} ops, encoder ({} entries), 3 heads; max rel error {worst:.2e}; {took:.1?}",
        ops.len(),
        enc.checked
    ))
}

fn paper_numbers() -> Outcome {
    let mut acc = AttentionAccumulator::new(5).map_err(e2s)?;
    let att = Tensor::new(vec![2, 20, 20], vec![1.0 / 20.0; 800]).map_err(e2s)?;
    acc.add(&att, 9).map_err(e2s)?;
    let map = acc.finish().map_err(e2s)?;
    check(map.size() == 11, format!("crop size {}", map.size()))?;
    check(map.in_bounds_mean(5, 5).is_some(), "polyphone cell at (5, 5)")?;

    let rots = rotations(10).map_err(e2s)?;
    check(rots.len() == 10, "10 rotations")?;
    for r in &rots {
        check(
            r.train.len() == 8 && r.test != r.dev,
            format!("rotation {r:?} is not 8/1/1"),
        )?;
    }
    let tests: BTreeSet<usize> = rots.iter().map(|r| r.test).collect();
    check(tests.len() == 10, "every fold is tested once")?;

    let paper = RunConfig::preset("paper").map_err(e2s)?;
    let fc = paper.head_config(HeadArch::Fc, 768);
    check(fc.width == 512 && fc.dropout == 0.5, format!("fc {fc:?}"))?;
    let lstm = paper.head_config(HeadArch::Lstm, 768);
    check(lstm.width == 512 && lstm.lstm_layers == 2, format!("lstm {lstm:?}"))?;
    let tr = paper.head_config(HeadArch::Transformer, 768);
    check(tr.width == 512 && tr.heads == 8, format!("transformer {tr:?}"))?;
    for arch in [HeadArch::Fc, HeadArch::Lstm] {
        let lr = paper.head_train_config(arch, 0).adam.lr;
        check(lr == 5e-4, format!("{arch:?} lr {lr}"))?;
    }
    check(paper.eval.folds == 10, "paper preset uses 10 folds")?;
    Ok("crop 11x11 centred at (5,5); 10 rotations 8/1/1; paper preset 512 FC/0.5, 512x2 BLSTM, 512/8 transformer, lr 5e-4".into())
}

struct Learned {
    locality: Option<f64>,
}

fn learnability(root: &Path) -> (Outcome, Learned) {
    let mut learned = Learned { locality: None };
    let outcome = (|| {
        let start = Instant::now();
        let dir = root.join("desk");
        let cfg = cfg_in(&dir, "desk", &["method=\"fc,lstm,transformer\""])?;
        let synth = cfg.synth_config();
        check(synth.candidates.len() >= 5, "at least 5 pseudo-polyphones")?;
        check(
            synth.candidates.iter().all(|c| (2..=4).contains(c)),
            "2-4 candidates each",
        )?;
        check(
            synth.samples_per_char == 2000 && synth.window <= 3,
            "2000 samples/char, marker within ±3",
        )?;
        check(cfg.eval.folds == 10, "10 folds")?;

        pipeline::gen_synth(&cfg).map_err(e2s)?;
        let (_, report) = pipeline::pretrain(&cfg).map_err(e2s)?;
        let (first, last) = (report.initial(), report.last());
        let pretrained = format!(
            "MLM {:.3}->{:.3}, NSP acc {:.3}",
            first.mlm_loss, last.mlm_loss, last.nsp_accuracy
        );
        check(
            last.mlm_loss < 0.5 * first.mlm_loss,
            format!("{pretrained}: MLM did not halve"),
        )?;
        check(last.nsp_accuracy > 0.9, format!("{pretrained}: NSP accuracy too low"))?;

        let (_, eval) = pipeline::eval_with_progress(&cfg, |m| eprintln!("  {m}")).map_err(e2s)?;
        learned.locality = eval.locality;
        let scores: Vec<String> = eval
            .reports
            .iter()
            .map(|r| format!("{} {:.4}±{:.4}", r.method, r.mean(), r.stddev()))
            .collect();
        let took = start.elapsed();
        let summary = format!("{pretrained}; {}; {took:.0?}", scores.join(", "));
        check(eval.reports.len() == 3, "three head methods")?;
        for r in &eval.reports {
            check(r.fold_accuracies().len() == 10, format!("{}: not 10 folds", r.method))?;
            check(r.mean() >= 0.95, format!("{summary}: {} below 0.95", r.method))?;
        }
        if took > Duration::from_secs(30 * 60) {
            eprintln!("  note: runtime {took:.0?} exceeds the 30 minute target");
        }
        Ok(summary)
    })();
    (outcome, learned)
}

fn structure() -> Outcome {
    let labels = |ch: char, n: usize| -> Vec<String> { (0..n).map(|i| format!("{ch}{i}")).collect() };
    let registry = |arch: HeadArch, counts: &[usize], seed: u64| {
        let mut config = HeadConfig::sized(arch, 6, 8);
        config.heads = 2;
        let mut reg = HeadRegistry::new(config, seed).unwrap();
        for (i, &n) in counts.iter().enumerate() {
            let ch = char::from_u32(0x4E00 + i as u32).unwrap();
            reg.register_polyphone(ch, labels(ch, n)).unwrap();
        }
        reg
    };

    let mut runner = TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(64)
    });
    let strategy = (
        prop::sample::select(HeadArch::ALL.to_vec()),
        prop::collection::vec(2usize..=5, 1..5),
        1usize..9,
        0u64..1000,
    );
    runner
        .run(&strategy, |(arch, counts, len, seed)| {
            let reg = registry(arch, &counts, seed);
            let features = init_tensor(len, 6, Init::Normal(3.0), &mut rng::rng(seed + 1));
            for (k, &n) in counts.iter().enumerate() {
                let ch = char::from_u32(0x4E00 + k as u32).unwrap();
                let own = labels(ch, n);
                for position in 0..len {
                    let p = reg.predict(&features, position, ch).unwrap();
                    prop_assert!(own.contains(&p.label));
                }
            }
            Ok(())
        })
        .map_err(|e| format!("candidate property: {e}"))?;

    runner
        .run(
            &(prop::sample::select(HeadArch::ALL.to_vec()), 2usize..=5, 0u64..1000),
            |(arch, extra, seed)| {
                let mut reg = registry(arch, &[2, 3], seed);
                let before: Vec<Vec<u64>> = reg
                    .params()
                    .snapshot()
                    .iter()
                    .map(|v| v.iter().map(|x| x.to_bits()).collect())
                    .collect();
                reg.register_polyphone('丙', labels('丙', extra)).unwrap();
                let after = reg.params().snapshot();
                for (b, a) in before.iter().zip(&after) {
                    prop_assert!(b.iter().zip(a).all(|(x, y)| *x == y.to_bits()));
                }
                Ok(())
            },
        )
        .map_err(|e| format!("registration property: {e}"))?;

    let synth = SynthConfig {
        samples_per_char: 40,
        min_len: 4,
        max_len: 7,
        ..SynthConfig::default()
    };
    let s = generate_synthetic(&synth, 1).map_err(e2s)?;
    let vocab = Vocabulary::from_chars(s.corpus.iter().flat_map(|x| x.chars.iter().copied()));
    let mut config = EncoderConfig::desk(vocab.len());
    config.width = 16;
    config.ff_width = 32;
    let mut encoder = EncoderModel::new(config, 2).map_err(e2s)?;
    encoder.freeze();
    let bits = |e: &EncoderModel| -> Vec<u64> { e.params().snapshot().iter().flatten().map(|x| x.to_bits()).collect() };
    let frozen = bits(&encoder);
    let instances = featurize(&encoder, &vocab, &s.corpus, &samples(&s.corpus)).map_err(e2s)?;
    for arch in HeadArch::ALL {
        let mut hc = HeadConfig::sized(arch, 16, 8);
        hc.heads = 2;
        let mut reg = HeadRegistry::new(hc, 4).map_err(e2s)?;
        for &p in &s.polyphones {
            reg.register_polyphone(p, s.dictionary.get(p).unwrap().to_vec())
                .map_err(e2s)?;
        }
        let mut tc = TrainConfig::for_head(&hc, 5);
        tc.max_epochs = 2;
        let (train, dev) = instances.split_at(instances.len() * 3 / 4);
        train_head(&mut reg, train, dev, &tc).map_err(e2s)?;
        check(
            bits(&encoder) == frozen,
            format!("encoder changed while training {arch:?}"),
        )?;
    }
    Ok("candidate-only outputs (64 cases), registration keeps parameters bit-identical (64 cases), frozen encoder bit-identical after 3 head trainings".into())
}

fn baseline_contrast() -> Outcome {
    let s = generate_synthetic(&SynthConfig::default(), 3).map_err(e2s)?;
    let labels = label_space(&s.dictionary);
    let union: BTreeSet<String> = s
        .polyphones
        .iter()
        .flat_map(|&p| s.dictionary.get(p).unwrap().iter().cloned())
        .collect();
    let ours: BTreeSet<String> = labels[1..].iter().cloned().collect();
    check(ours == union, "label space differs from the union")?;

    let vocab = Vocabulary::from_chars(s.corpus.iter().flat_map(|x| x.chars.iter().copied()));
    let lexicon = Lexicon::from_entries(s.lexicon.iter().map(|(w, t)| (w.as_str(), t.as_str())));
    let model = BaselineModel::new(BaselineConfig::desk(), vocab, &lexicon.tags(), labels.clone(), 9).map_err(e2s)?;
    let pool: Vec<char> = s.dictionary.iter().map(|(c, _)| c).collect();
    let mut r = rng::rng(77);
    let mut outside = 0;
    for _ in 0..1000 {
        use rand::Rng;
        let len = r.gen_range(4..12);
        let mut chars: Vec<char> = (0..len).map(|_| pool[r.gen_range(0..pool.len())]).collect();
        let pos = r.gen_range(0..len);
        let p = s.polyphones[r.gen_range(0..s.polyphones.len())];
        chars[pos] = p;
        let label = model.predict(&tokenize_and_tag(&chars, &lexicon), pos).map_err(e2s)?;
        if !s.dictionary.get(p).unwrap().contains(&label) {
            outside += 1;
        }
    }
    check(outside > 0, "untrained baseline never left the candidate set")?;
    Ok(format!(
        "label space = union of {} pronunciations (+ non-polyphone); untrained model out-of-candidate on {outside}/1000 inputs",
        union.len()
    ))
}

fn oracles() -> Outcome {
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::Rng;

    let mut worst = 0.0f64;
    for seed in 0..100 {
        let data = init_tensor(5, 3, Init::Normal(2.0), &mut rng::rng(seed));
        let p = pca(&data, 3).map_err(e2s)?;
        let m = DMatrix::from_row_slice(5, 3, data.data());
        let mean = m.row_mean();
        let c = DMatrix::from_fn(5, 3, |r, k| m[(r, k)] - mean[k]);
        let eig = SymmetricEigen::new(c.transpose() * &c / 4.0);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &i) in order.iter().enumerate() {
            let v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let ours = p.components.row(k);
            let dot: f64 = ours.iter().zip(&v).map(|(a, b)| a * b).sum();
            let sign = dot.signum();
            for (a, b) in ours.iter().zip(&v) {
                worst = worst.max((a - sign * b).abs());
            }
            worst = worst.max((p.variances[k] - eig.eigenvalues[i].max(0.0)).abs());
        }
    }
    check(worst < 1e-6, format!("PCA deviates by {worst:e}"))?;

    let mut r = rng::rng(5);
    for trial in 0..50 {
        let chars: Vec<(char, usize)> = (0..r.gen_range(1..6))
            .map(|i| (char::from_u32(0x4E00 + i).unwrap(), r.gen_range(1..60)))
            .collect();
        let mut dict = g2p_core::corpus::PronunciationDictionary::new();
        let mut corpus = Vec::new();
        for &(ch, n) in &chars {
            dict.insert(ch, vec!["a1".into(), "a2".into()]).map_err(e2s)?;
            for j in 0..n {
                let label = if j % 3 == 0 { "a1" } else { "a2" };
                corpus.push(g2p_core::corpus::AnnotatedSentence::single(&ch.to_string(), 0, label).map_err(e2s)?);
            }
        }
        let k = r.gen_range(3..11);
        let inventory = build_inventory(&corpus, &dict, 0).map_err(e2s)?;
        let folds = stratified_kfold(&corpus, &inventory, k, trial).map_err(e2s)?.folds;
        for &(ch, n) in &chars {
            let mut per_fold = vec![0usize; k];
            for (i, s) in samples(&corpus).iter().enumerate() {
                if corpus[s.sentence].target_char(s.target) == ch {
                    per_fold[folds.assignment[i]] += 1;
                }
            }
            let (lo, hi) = (*per_fold.iter().min().unwrap(), *per_fold.iter().max().unwrap());
            check(
                hi - lo <= 1 && per_fold.iter().sum::<usize>() == n,
                format!("fold counts {per_fold:?}"),
            )?;
        }
    }

    let mut worst_row = 0.0f64;
    for m in 0..100u64 {
        let heads = [1, 2, 4][(m % 3) as usize];
        let config = EncoderConfig {
            vocab_size: 12,
            width: 4 * heads,
            layers: 1 + (m % 2) as usize,
            heads,
            ff_width: 8,
            max_len: 16,
            dropout: 0.1,
        };
        let model = EncoderModel::new(config, m).map_err(e2s)?;
        let len = 1 + (m as usize % 14);
        let tokens: Vec<usize> = (0..len).map(|i| 5 + (i * 7 + m as usize) % 7).collect();
        let (_, layers) = model.encode_with_attention(&tokens).map_err(e2s)?;
        for att in layers {
            for row in att.data().chunks(len) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let mut hc = HeadConfig::sized(HeadArch::Transformer, 6, 8);
        hc.heads = heads;
        let mut reg = HeadRegistry::new(hc, m).map_err(e2s)?;
        reg.register_polyphone('中', vec!["a".into(), "b".into()])
            .map_err(e2s)?;
        let features = init_tensor(len, 6, Init::Normal(1.0), &mut rng::rng(m + 1));
        let att = reg.attention(&features, len / 2, '中').map_err(e2s)?;
        for row in att.data().chunks(len) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_row < 1e-9, format!("attention row sum off by {worst_row:e}"))?;

    let chars = vec!['甲'; 30];
    let gold: Vec<String> = (0..30)
        .map(|i| if i % 3 == 0 { "x" } else { "y" }.to_string())
        .collect();
    let folds = g2p_core::corpus::FoldAssignment::new(3, (0..30).map(|i| i % 3).collect()).map_err(e2s)?;
    let report = cross_validate("majority", &folds, &chars, &gold, |_, split| {
        Ok(vec!["y".to_string(); split.test.len()])
    })
    .map_err(e2s)?;
    check(
        (report.overall() - 20.0 / 30.0).abs() < 1e-12,
        "majority predictor accuracy",
    )?;
    Ok(format!(
        "PCA max deviation {worst:.1e} over 100 random 5x3; stratified folds exact over 50 random corpora; attention rows within {worst_row:.1e} over 100 models"
    ))
}

fn metric_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(e2s)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism(root: &Path) -> Outcome {
    let reduced = [
        "synth.samples_per_char=60",
        "pretrain.epochs=2",
        "eval.folds=3",
        "head.fc.max_epochs=2",
        "head.lstm.max_epochs=2",
        "head.transformer.max_epochs=2",
        "baseline.max_epochs=2",
        "inventory.min_count=10",
    ];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.join(name);
        let cfg = cfg_in(&dir, "desk", &reduced)?;
        pipeline::gen_synth(&cfg).map_err(e2s)?;
        pipeline::pretrain(&cfg).map_err(e2s)?;
        pipeline::eval(&cfg).map_err(e2s)?;
        for arch in HeadArch::ALL {
            pipeline::train_head(&cfg, arch).map_err(e2s)?;
        }
        pipeline::train_baseline(&cfg).map_err(e2s)?;
        pipeline::attention(&cfg).map_err(e2s)?;
        pipeline::pca(&cfg).map_err(e2s)?;
        runs.push(metric_files(&dir)?);
    }
    check(runs[0].len() >= 5, format!("only {} metric files", runs[0].len()))?;
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    check(runs[0] == runs[1], "metric files differ between identical runs")?;
    Ok(format!(
        "{} metric files byte-identical across two runs: {}",
        names.len(),
        names.join(", ")
    ))
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", gradients()));
    results.push((2, "paper-number fidelity", paper_numbers()));
    let (learn, learned) = learnability(root.path());
    results.push((3, "learnability", learn));
    results.push((4, "structural guarantees", structure()));
    results.push((5, "baseline contrast", baseline_contrast()));
    results.push((6, "oracle equivalences", oracles()));
    results.push((7, "determinism", determinism(root.path())));
    let locality = match learned.locality {
        Some(l) => Ok(format!(
            "spearman(mean weight, |offset|) = {l:.4} ({}; reported, not gated)",
            if l < 0.0 { "local" } else { "not local" }
        )),
        None => Err("no transformer attention map".into()),
    };
    results.push((8, "attention locality", locality));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
