use nmt_core::corpus::{
    compute_sampling_probs, sample_batch, temperature_at_epoch, write_parallel, Direction, MultilingualCorpus,
    SamplingSchedule, SentencePair, Tokenizer, TokenizerMode, Vocabulary, BOS, EOS, UNK,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of p^(1/T) / Σ p^(1/T), no log domain.
fn oracle_probs(sizes: &[usize], t: f64) -> Vec<f64> {
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let w: Vec<f64> = sizes.iter().map(|&s| (s as f64 / total).powf(1.0 / t)).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[test]
fn temperature_five_matches_direct_evaluation() {
    let q = compute_sampling_probs(&[9000, 1000], 5.0).unwrap();
    let oracle = oracle_probs(&[9000, 1000], 5.0);
    assert!((q[0] - 0.60813).abs() < 1e-5 && (q[1] - 0.39187).abs() < 1e-5, "{q:?}");
    for (a, b) in q.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equal_sizes_give_uniform() {
    for t in [0.5, 1.0, 3.0, 100.0] {
        let q = compute_sampling_probs(&[7, 7, 7, 7], t).unwrap();
        assert!(q.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }
}

#[test]
fn huge_temperature_flattens() {
    let q = compute_sampling_probs(&[100000, 10, 1], 1e6).unwrap();
    let spread = q.iter().cloned().fold(f64::MIN, f64::max) - q.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 1e-4);
}

#[test]
fn schedule_defaults() {
    let s = SamplingSchedule::default();
    assert_eq!(temperature_at_epoch(&s, 0), 1.0);
    assert!((temperature_at_epoch(&s, 3) - 3.4).abs() < 1e-12);
    assert_eq!(temperature_at_epoch(&s, 5), 5.0);
    assert_eq!(temperature_at_epoch(&s, 7), 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn probabilities_are_normalized_and_ordered(sizes in prop::collection::vec(1usize..100000, 1..8), t in 0.1f64..50.0) {
        let q = compute_sampling_probs(&sizes, t).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] > sizes[j] {
                    prop_assert!(q[i] >= q[j]);
                }
            }
        }
    }

    #[test]
    fn entropy_grows_with_temperature(sizes in prop::collection::vec(1usize..100000, 2..8), t1 in 1.0f64..20.0, dt in 0.0f64..20.0) {
        let a = entropy(&compute_sampling_probs(&sizes, t1).unwrap());
        let b = entropy(&compute_sampling_probs(&sizes, t1 + dt).unwrap());
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn schedule_is_monotone(t0 in 0.1f64..4.0, extra in 0.0f64..6.0, n in 1usize..10, e in 0usize..30) {
        let s = SamplingSchedule::new(t0, t0 + extra, n).unwrap();
        prop_assert!(temperature_at_epoch(&s, e + 1) >= temperature_at_epoch(&s, e));
        if e >= n {
            prop_assert_eq!(temperature_at_epoch(&s, e), t0 + extra);
        }
    }

    #[test]
    fn char_mode_roundtrip(words in prop::collection::vec("[a-z+]{1,6}", 1..6)) {
        let text = words.join(" ");
        let t = Tokenizer::new(TokenizerMode::Char);
        let (pieces, word_of) = t.pieces(&text);
        let vocab = Vocabulary::new(&["en"], pieces.clone()).unwrap();
        let tok = t.tokenize(&text, &vocab);
        prop_assert_eq!(t.detokenize(&tok.ids, &vocab), text);
        prop_assert_eq!(t.word_boundaries(&tok.ids, &vocab), word_of);
        prop_assert_eq!(tok.word_count(), words.len());
    }
}

#[test]
fn whitespace_roundtrip_and_unk() {
    let vocab = Vocabulary::new(&["en"], ["the", "cat", "sat"].map(String::from)).unwrap();
    let t = Tokenizer::default();
    let ids = t.tokenize("the  cat sat", &vocab).ids;
    assert_eq!(t.detokenize(&ids, &vocab), "the cat sat");
    assert_eq!(t.tokenize("the dog", &vocab).ids[1], UNK);
}

fn toy_corpus(vocab: &Vocabulary) -> MultilingualCorpus {
    let first = vocab.first_content_id();
    let pairs = |n: usize, base: usize| -> Vec<SentencePair> {
        (0..n).map(|i| SentencePair { src: vec![first + (i + base) % 5], tgt: vec![first + i % 5, first] }).collect()
    };
    MultilingualCorpus::new(vec![
        (Direction::new("en", "de"), pairs(30, 0)),
        (Direction::new("de", "en"), pairs(20, 1)),
        (Direction::new("en", "fr"), pairs(10, 2)),
    ])
    .unwrap()
}

fn toy_vocab() -> Vocabulary {
    Vocabulary::new(&["en", "de", "fr"], (0..5).map(|i| format!("w{i}"))).unwrap()
}

#[test]
fn degenerate_distribution_uses_one_direction() {
    let vocab = toy_vocab();
    let corpus = toy_corpus(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let b = sample_batch(&mut rng, &corpus, &[1.0, 0.0, 0.0], 4, &vocab).unwrap();
        assert_eq!(b.direction, 0);
    }
    assert!(sample_batch(&mut rng, &corpus, &[1.0, 0.0], 4, &vocab).is_err());
}

#[test]
fn rows_carry_language_token_and_markers() {
    let vocab = toy_vocab();
    let corpus = toy_corpus(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = compute_sampling_probs(&corpus.sizes(), 5.0).unwrap();
    for _ in 0..200 {
        let b = sample_batch(&mut rng, &corpus, &q, 3, &vocab).unwrap();
        let lang = vocab.lang_id(&corpus.directions()[b.direction].tgt).unwrap();
        for r in 0..3 {
            assert_eq!(b.source.row(r)[0], lang);
            let t = &b.target.row(r)[..b.target.row_len(r)];
            assert_eq!((t[0], *t.last().unwrap()), (BOS, EOS));
        }
        let (input, gold, pad) = b.shifted_target().unwrap();
        assert_eq!(gold.len(), input.batch * input.len);
        assert_eq!(pad.iter().filter(|&&p| !p).count(), b.target_tokens());
    }
}

#[test]
fn empirical_direction_frequencies_track_q() {
    let vocab = toy_vocab();
    let base = toy_corpus(&vocab);
    let two = MultilingualCorpus::new(
        base.directions()[..2].iter().cloned().zip([base.pairs(0).to_vec(), base.pairs(1).to_vec()]).collect(),
    )
    .unwrap();
    let q = [0.6081, 0.3919];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 2];
    let draws = 100_000;
    for _ in 0..draws {
        counts[sample_batch(&mut rng, &two, &q, 1, &vocab).unwrap().direction] += 1;
    }
    let l1: f64 = counts.iter().zip(q).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum();
    assert!(l1 < 0.01, "{counts:?}");
}

#[test]
fn loading_falls_back_to_reverse_file_and_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let long = vec!["w1"; 20].join(" ");
    write_parallel(&dir.path().join("train.en-de.tsv"), &[("w0 w1".into(), "w2".into()), (long.clone(), "w3".into())])
        .unwrap();
    let vocab = toy_vocab();
    let dirs = [Direction::new("en", "de"), Direction::new("de", "en")];
    let corpus = MultilingualCorpus::load(dir.path(), &dirs, &vocab, &Tokenizer::default(), 10).unwrap();
    assert_eq!(corpus.sizes(), [2, 2]);
    assert_eq!(corpus.pairs(1)[0].tgt.len(), 2);
    assert_eq!(corpus.pairs(0)[1].src.len(), 8);
    let missing = [Direction::new("en", "fr")];
    assert!(MultilingualCorpus::load(dir.path(), &missing, &vocab, &Tokenizer::default(), 10).is_err());
}
