use std::collections::BTreeSet;

use rand::Rng;

use g2p_core::baseline::{label_space, tokenize_and_tag, BaselineConfig, BaselineModel, Lexicon, NOT_POLYPHONE};
use g2p_core::encoder::Vocabulary;
use g2p_core::rng;
use g2p_core::synth::{generate_synthetic, SynthConfig};

#[test]
fn label_space_is_the_union_of_pronunciations() {
    let s = generate_synthetic(&SynthConfig::default(), 3).unwrap();
    let labels = label_space(&s.dictionary);
    assert_eq!(labels[0], NOT_POLYPHONE);
    let union: BTreeSet<String> = s
        .polyphones
        .iter()
        .flat_map(|&p| s.dictionary.get(p).unwrap().iter().cloned())
        .collect();
    let ours: BTreeSet<String> = labels[1..].iter().cloned().collect();
    assert_eq!(ours, union);
    assert_eq!(labels.len() - 1, union.len());
    assert_eq!(union.len(), SynthConfig::default().candidates.iter().sum::<usize>());
}

#[test]
fn untrained_baseline_leaves_the_candidate_set() {
    let s = generate_synthetic(&SynthConfig::default(), 3).unwrap();
    let vocab = Vocabulary::from_chars(s.corpus.iter().flat_map(|x| x.chars.iter().copied()));
    let lexicon = Lexicon::from_entries(s.lexicon.iter().map(|(w, t)| (w.as_str(), t.as_str())));
    let model = BaselineModel::new(
        BaselineConfig::desk(),
        vocab,
        &lexicon.tags(),
        label_space(&s.dictionary),
        9,
    )
    .unwrap();
    let pool: Vec<char> = s.dictionary.iter().map(|(c, _)| c).collect();
    let mut r = rng::rng(77);
    let mut outside = 0;
    for _ in 0..1000 {
        let len = r.gen_range(4..12);
        let mut chars: Vec<char> = (0..len).map(|_| pool[r.gen_range(0..pool.len())]).collect();
        let pos = r.gen_range(0..len);
        let p = s.polyphones[r.gen_range(0..s.polyphones.len())];
        chars[pos] = p;
        let label = model.predict(&tokenize_and_tag(&chars, &lexicon), pos).unwrap();
        if !s.dictionary.get(p).unwrap().contains(&label) {
            outside += 1;
        }
    }
    println!("out-of-candidate predictions: {outside}/1000");
    assert!(outside > 0);
}
