use std::collections::BTreeSet;

use nmt_core::corpus::{Tokenizer, Vocabulary};
use nmt_core::init::random_model;
use nmt_core::model::ModelConfig;
use nmt_core::probe::{
    aer, attention_graph, chu_liu_edmonds, classify_probe, corpus_aer, itermax, parse_conllu, probe_align, probe_parse,
    tree_weight, uas, word_vectors, write_conllu, AlignmentSet, ClassifyConfig, ClassifyExample, DependencyTree,
    GoldAlignment, GoldTree,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(pairs: &[(usize, usize)]) -> AlignmentSet {
    pairs.iter().copied().collect()
}

fn first_argmax(vals: impl Iterator<Item = f64>) -> usize {
    let v: Vec<f64> = vals.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x == max).unwrap()
}

/// Every (i, j) checked directly against its row and column.
fn brute_mutual_argmax(sim: &[Vec<f64>]) -> AlignmentSet {
    let (m, n) = (sim.len(), sim[0].len());
    let mut out = AlignmentSet::new();
    for i in 0..m {
        for j in 0..n {
            if first_argmax(sim[i].iter().copied()) == j && first_argmax((0..m).map(|k| sim[k][j])) == i {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Max weight over every head assignment that forms a tree rooted at `root`.
fn brute_arborescence(w: &[Vec<f64>], root: usize) -> f64 {
    let n = w.len();
    let others: Vec<usize> = (0..n).filter(|&v| v != root).collect();
    let choices: Vec<Vec<usize>> = others.iter().map(|&v| (0..n).filter(|&h| h != v).collect()).collect();
    let mut idx = vec![0usize; others.len()];
    let mut best = f64::NEG_INFINITY;
    loop {
        let mut heads = vec![None; n];
        for (k, &v) in others.iter().enumerate() {
            heads[v] = Some(choices[k][idx[k]]);
        }
        let reaches_root = (0..n).all(|start| {
            let mut v = start;
            for _ in 0..n {
                match heads[v] {
                    Some(h) => v = h,
                    None => return v == root,
                }
            }
            v == root
        });
        if reaches_root {
            let total: f64 = others.iter().map(|&v| w[heads[v].unwrap()][v]).sum();
            best = best.max(total);
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < choices[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn itermax_examples() {
    let id: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    assert_eq!(itermax(&id, 1).unwrap(), set(&[(0, 0), (1, 1), (2, 2), (3, 3)]));
    assert_eq!(itermax(&[vec![0.9, 0.1], vec![0.2, 0.8]], 1).unwrap(), set(&[(0, 0), (1, 1)]));
    let m = vec![vec![0.9, 0.8], vec![0.7, 0.6]];
    assert_eq!(itermax(&m, 1).unwrap(), set(&[(0, 0)]));
    assert_eq!(itermax(&m, 2).unwrap(), set(&[(0, 0), (1, 1)]));
    assert!(itermax(&m, 0).is_err());
}

#[test]
fn aer_examples() {
    let a = set(&[(0, 0), (1, 1)]);
    let exact = GoldAlignment::new(a.clone(), a.clone());
    assert_eq!(aer(&a, &exact), 0.0);
    let g = GoldAlignment::new(set(&[(0, 0)]), set(&[(0, 0), (1, 1)]));
    assert!((aer(&a, &g) - 0.0).abs() < 1e-15);
    assert_eq!(aer(&set(&[(0, 1)]), &g), 1.0);
    assert_eq!(aer(&AlignmentSet::new(), &GoldAlignment::default()), 0.0);
    // one of two predictions right against two sure links: 1 - 2/4
    let g2 = GoldAlignment::new(set(&[(0, 0), (1, 1)]), AlignmentSet::new());
    assert!((aer(&set(&[(0, 0), (1, 0)]), &g2) - 0.5).abs() < 1e-15);
    assert!((corpus_aer(&[a.clone(), set(&[(0, 1)])], &[exact, g]).unwrap() - (1.0 - 4.0 / 6.0)).abs() < 1e-15);
}

#[test]
fn pharaoh_parsing() {
    let g = GoldAlignment::parse("0-0 1?2 2-1").unwrap();
    assert_eq!(g.sure, set(&[(0, 0), (2, 1)]));
    assert_eq!(g.possible, set(&[(0, 0), (1, 2), (2, 1)]));
    assert_eq!(GoldAlignment::parse(&g.to_pharaoh()).unwrap(), g);
    assert!(GoldAlignment::parse("0-x").is_err());
    assert_eq!(GoldAlignment::parse("").unwrap(), GoldAlignment::default());
}

#[test]
fn word_vector_examples() {
    let states = [1.0, 2.0, 1.0, 0.0, 0.0, 1.0, 3.0, 3.0];
    let v = word_vectors(&states, 2, &[Some(0), Some(1), Some(1), None]).unwrap();
    assert_eq!(v, vec![vec![1.0, 2.0], vec![0.5, 0.5]]);
    let same = word_vectors(&[4.0f32, 5.0, 4.0, 5.0], 2, &[Some(0), Some(0)]).unwrap();
    assert_eq!(same, vec![vec![4.0, 5.0]]);
    assert!(word_vectors(&states, 2, &[Some(0), Some(2), None, None]).is_err());
}

#[test]
fn attention_graph_examples() {
    // one head, single-piece words between two dropped specials
    let len = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..len * len).map(|_| rng.random()).collect();
    let word_of = [None, Some(0), Some(1), Some(2), None];
    let g = attention_graph(&a, 1, len, &word_of).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(g[i][j], a[(i + 1) * len + j + 1]);
        }
    }
    // M and 2c - M average to c
    let c = 0.25;
    let two: Vec<f64> = a.iter().copied().chain(a.iter().map(|x| 2.0 * c - x)).collect();
    let g = attention_graph(&two, 2, len, &word_of).unwrap();
    assert!(g.iter().flatten().all(|&x| (x - c).abs() < 1e-15));
    // merging two pieces averages rows and columns
    let g = attention_graph(&a, 1, len, &[None, Some(0), Some(0), Some(1), None]).unwrap();
    let want = (a[6] + a[7] + a[11] + a[12]) / 4.0;
    assert!((g[0][0] - want).abs() < 1e-15);
    assert!((g[1][0] - (a[16] + a[17]) / 2.0).abs() < 1e-15);
    assert!(attention_graph(&a, 2, len, &word_of).is_err());
}

#[test]
fn chu_liu_edmonds_examples() {
    let t = chu_liu_edmonds(&[vec![0.0, 1.0], vec![1.0, 0.0]], 0).unwrap();
    assert_eq!(t.heads, vec![None, Some(0)]);
    let ninf = f64::NEG_INFINITY;
    let w = vec![vec![ninf, 10.0, 1.0], vec![ninf, ninf, 5.0], vec![ninf, 2.0, ninf]];
    let t = chu_liu_edmonds(&w, 0).unwrap();
    assert_eq!(t.heads, vec![None, Some(0), Some(1)]);
    assert_eq!(tree_weight(&w, &t), 15.0);
    // node 2 unreachable
    let w = vec![vec![ninf, 1.0, ninf], vec![ninf, ninf, ninf], vec![ninf, 1.0, ninf]];
    assert!(chu_liu_edmonds(&w, 0).is_err());
    assert!(chu_liu_edmonds(&[vec![0.0]], 1).is_err());
    // ties go to the lowest head
    let flat = vec![vec![1.0; 4]; 4];
    let t = chu_liu_edmonds(&flat, 2).unwrap();
    assert_eq!(t, chu_liu_edmonds(&flat, 2).unwrap());
    assert_eq!(tree_weight(&flat, &t), 3.0);
    assert_eq!(t.heads[0], Some(2));
}

#[test]
fn chu_liu_edmonds_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..500 {
        let n = 1 + case % 6;
        let root = rng.random_range(0..n);
        // coarse weights make ties common
        let w: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| if case % 2 == 0 { rng.random_range(-1.0..1.0) } else { rng.random_range(0..4) as f64 }).collect())
            .collect();
        let t = chu_liu_edmonds(&w, root).unwrap();
        assert_eq!(t.root, root);
        assert!(DependencyTree::new(t.heads.clone()).is_ok());
        let want = brute_arborescence(&w, root);
        assert!((tree_weight(&w, &t) - want).abs() < 1e-9, "case {case}: {} vs {want}", tree_weight(&w, &t));
    }
}

#[test]
fn uas_examples() {
    let gold = DependencyTree::new(vec![None, Some(0), Some(1), Some(1), Some(0)]).unwrap();
    assert_eq!(uas(&gold, &gold).unwrap(), 1.0);
    let three = DependencyTree::new(vec![None, Some(0), Some(1), Some(1), Some(3)]).unwrap();
    assert_eq!(uas(&three, &gold).unwrap(), 0.75);
    let wrong = DependencyTree::new(vec![None, Some(4), Some(3), Some(4), Some(2)]);
    assert!(wrong.is_err(), "cycle");
    let wrong = DependencyTree::new(vec![None, Some(2), Some(0), Some(2), Some(3)]).unwrap();
    assert_eq!(uas(&wrong, &gold).unwrap(), 0.0);
    let short = DependencyTree::new(vec![None, Some(0)]).unwrap();
    assert!(uas(&short, &gold).is_err());
    assert!(DependencyTree::new(vec![None, None]).is_err());
}

#[test]
fn conllu_subset() {
    let text = "# sent_id = 1\n1\tthe\t_\t_\t_\t_\t2\tdet\t_\t_\n1-2\tx\t_\t_\t_\t_\t_\t_\t_\t_\n2\tcat\t_\t_\t_\t_\t0\troot\t_\t_\n2.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_\n3\tsat\t_\t_\t_\t_\t2\tdep\t_\t_\n\n1\tgo\t_\t_\t_\t_\t0\troot\t_\t_\n";
    let trees = parse_conllu(text).unwrap();
    assert_eq!(trees.len(), 2);
    assert_eq!(trees[0].forms, ["the", "cat", "sat"]);
    assert_eq!(trees[0].tree.heads, vec![Some(1), None, Some(1)]);
    assert_eq!(trees[0].tree.root, 1);
    assert_eq!(parse_conllu(&write_conllu(&trees)).unwrap(), trees);
    assert!(parse_conllu("1\ta\t_\t_\t_\t_\t0\n3\tb\t_\t_\t_\t_\t1\n").is_err());
}

fn toy_vocab() -> Vocabulary {
    Vocabulary::new(&["en", "de"], (0..12).map(|i| format!("w{i}"))).unwrap()
}

fn tiny(vocab: &Vocabulary) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(vocab.len());
    cfg.dropout = 0.0;
    cfg.attention_dropout = 0.0;
    cfg
}

#[test]
fn identical_sentences_align_diagonally() {
    let vocab = toy_vocab();
    let model = random_model::<f32>(&tiny(&vocab), 5).unwrap();
    let tok = Tokenizer::default();
    let pairs = vec![("w1 w2 w3 w4".to_string(), "w1 w2 w3 w4".to_string()), ("w5 w0".into(), "w5 w0".into())];
    for layer in [None, Some(0), Some(model.config.encoder_layers - 1)] {
        let got = probe_align(&model, &vocab, &tok, &pairs, "en", "en", layer, 3).unwrap();
        let gold = [
            GoldAlignment::new(set(&[(0, 0), (1, 1), (2, 2), (3, 3)]), AlignmentSet::new()),
            GoldAlignment::new(set(&[(0, 0), (1, 1)]), AlignmentSet::new()),
        ];
        assert_eq!(corpus_aer(&got, &gold).unwrap(), 0.0);
    }
    assert!(probe_align(&model, &vocab, &tok, &pairs, "en", "en", Some(99), 1).is_err());
}

#[test]
fn parse_report_covers_every_layer() {
    let vocab = toy_vocab();
    let model = random_model::<f32>(&tiny(&vocab), 6).unwrap();
    let tok = Tokenizer::default();
    let trees = vec![
        GoldTree {
            forms: vec!["w1".into(), "w2".into(), "w3".into()],
            tree: DependencyTree::new(vec![Some(1), None, Some(1)]).unwrap(),
        },
        GoldTree { forms: vec!["w4".into()], tree: DependencyTree::new(vec![None]).unwrap() },
    ];
    let a = probe_parse(&model, &vocab, &tok, "en", &trees).unwrap();
    let b = probe_parse(&model, &vocab, &tok, "en", &trees).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layer_uas.len(), model.config.encoder_layers);
    assert!(a.layer_uas.iter().all(|u| (0.0..=1.0).contains(u)));
    let best = a.layer_uas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_layer, a.layer_uas.iter().position(|&u| u == best).unwrap());
    assert_eq!(a.to_table().lines().count(), 1 + model.config.encoder_layers);
    let bad = vec![GoldTree { forms: vec!["w1 w2".into()], tree: DependencyTree::new(vec![None]).unwrap() }];
    assert!(probe_parse(&model, &vocab, &tok, "en", &bad).is_err());
}

fn classification_set(rng: &mut ChaCha8Rng, n: usize, random_labels: bool) -> Vec<ClassifyExample> {
    (0..n)
        .map(|_| {
            let words = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..rng.random_range(2..6)).map(|_| rng.random_range(0..12)).collect() };
            let p = words(rng);
            let label = if random_labels { rng.random_range(0..2) } else { p[0] % 2 };
            let text = |ws: &[usize]| ws.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            ClassifyExample { premise: text(&p), hypothesis: text(&words(rng)), label }
        })
        .collect()
}

#[test]
fn separable_labels_are_learned() {
    let vocab = toy_vocab();
    let mut model = random_model::<f32>(&tiny(&vocab), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = classification_set(&mut rng, 500, false);
    let test = classification_set(&mut rng, 200, false);
    let cfg = ClassifyConfig { epochs: 6, batch_size: 16, lr: 2e-3, finetune: true, seed: 0 };
    let r = classify_probe(&mut model, &vocab, &Tokenizer::default(), "en", &train, &test, &cfg).unwrap();
    assert!(r.steps <= 200);
    assert_eq!(r.test_accuracy, 1.0, "{r:?}");
    assert_ne!(r.encoder_fingerprint_before, r.encoder_fingerprint_after);
}

#[test]
fn random_labels_stay_at_chance_and_frozen_encoder_is_untouched() {
    let vocab = toy_vocab();
    let mut model = random_model::<f32>(&tiny(&vocab), 8).unwrap();
    let before = model.fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = classification_set(&mut rng, 500, true);
    let test = classification_set(&mut rng, 1000, true);
    let cfg = ClassifyConfig { epochs: 3, batch_size: 16, lr: 1e-3, finetune: false, seed: 0 };
    let r = classify_probe(&mut model, &vocab, &Tokenizer::default(), "en", &train, &test, &cfg).unwrap();
    assert!((r.test_accuracy - 0.5).abs() <= 0.1, "{r:?}");
    assert_eq!(r.encoder_fingerprint_before, r.encoder_fingerprint_after);
    assert_eq!(model.fingerprint(), before);
    assert!(classify_probe(&mut model, &vocab, &Tokenizer::default(), "en", &[], &test, &cfg).is_err());
}

fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec((0u8..6).prop_map(f64::from), n), m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn first_round_is_mutual_argmax(sim in matrix(8)) {
        prop_assert_eq!(itermax(&sim, 1).unwrap(), brute_mutual_argmax(&sim));
    }

    #[test]
    fn itermax_links_are_one_to_one(sim in matrix(8), iters in 1usize..5) {
        let a = itermax(&sim, iters).unwrap();
        let rows: BTreeSet<usize> = a.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = a.iter().map(|p| p.1).collect();
        prop_assert_eq!(rows.len(), a.len());
        prop_assert_eq!(cols.len(), a.len());
        prop_assert!(a.iter().all(|&(i, j)| i < sim.len() && j < sim[0].len()));
    }

    #[test]
    fn aer_bounded_and_monotone(
        sure in prop::collection::btree_set((0usize..5, 0usize..5), 0..8),
        extra in prop::collection::btree_set((0usize..5, 0usize..5), 0..8),
        pred in prop::collection::btree_set((0usize..5, 0usize..5), 0..8),
    ) {
        let gold = GoldAlignment::new(sure.clone(), extra);
        let e = aer(&pred, &gold);
        prop_assert!((0.0..=1.0).contains(&e));
        let mut more = pred.clone();
        for &p in &sure {
            more.insert(p);
            let next = aer(&more, &gold);
            prop_assert!(next <= e + 1e-12);
        }
    }

    #[test]
    fn word_vectors_ignore_piece_order(vals in prop::collection::vec(-5.0f64..5.0, 12), perm in Just(()).prop_perturb(|_, mut r| {
        let mut p = [0usize, 1, 2];
        for i in (1..3).rev() { p.swap(i, r.random_range(0..=i)); }
        p
    })) {
        // positions 0..3 are word 0, positions 3..6 word 1; hidden 2
        let map = [Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)];
        let base = word_vectors(&vals, 2, &map).unwrap();
        let mut shuffled = vals.clone();
        for (k, &src) in perm.iter().enumerate() {
            shuffled[2 * k..2 * k + 2].copy_from_slice(&vals[2 * src..2 * src + 2]);
        }
        let got = word_vectors(&shuffled, 2, &map).unwrap();
        for (a, b) in base.iter().flatten().zip(got.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
