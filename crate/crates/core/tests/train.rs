use nmt_core::corpus::{Direction, MonolingualCorpus, MultilingualCorpus, SentencePair, Vocabulary};
use nmt_core::eval::BeamParams;
use nmt_core::init::{random_model, Checkpoint};
use nmt_core::model::{ModelConfig, Session, TransformerModel};
use nmt_core::train::{
    adam_step, average, backtranslate, label_smoothed_loss, lr_at_step, mask_tokens, mlm_loss, pretrain_mlm, train_translation,
    AdamConfig, LrSchedule, MaskPolicy, OptimizerState, TrainConfig, Trainer,
};
use nmt_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// -log softmax(row)[t], computed directly.
fn plain_ce(row: &[f64], t: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    z.ln() - row[t]
}

fn loss_value(logits: &[f64], vocab: usize, targets: &[usize], pad: &[bool], eps: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(&[targets.len(), vocab], logits.to_vec()).unwrap());
    let l = label_smoothed_loss(&mut tape, x, targets, pad, eps).unwrap();
    tape.value(l).item()
}

#[test]
fn unsmoothed_loss_is_cross_entropy() {
    let logits = [0.3, -1.2, 2.0, 0.1, 1.5, 0.0, -0.5, 0.7, 9.0, 9.0, 9.0, 9.0];
    let targets = [2, 0, 1];
    let pad = [false, false, true];
    let want = (plain_ce(&logits[..4], 2) + plain_ce(&logits[4..8], 0)) / 2.0;
    assert!((loss_value(&logits, 4, &targets, &pad, 0.0) - want).abs() < 1e-9);
}

#[test]
fn uniform_logits_give_log_vocab() {
    for eps in [0.0, 0.1, 0.5, 0.9] {
        assert!((loss_value(&[0.7; 8], 4, &[1, 3], &[false, false], eps) - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn smoothing_floor_is_positive() {
    let l = loss_value(&[60.0, 0.0, 0.0, 0.0], 4, &[0], &[false], 0.1);
    // eps/V * 3 wrong classes * gap of 60
    assert!(l > 0.1 * 0.75 * 59.0, "{l}");
    assert!(loss_value(&[60.0, 0.0, 0.0, 0.0], 4, &[0], &[false], 0.0) < 1e-20);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(label_smoothed_loss(&mut tape, x, &[0], &[true], 0.1).is_err());
}

#[test]
fn lr_schedule_shape() {
    let s = LrSchedule { peak_lr: 5e-4, warmup_steps: 4000 };
    assert_eq!(lr_at_step(&s, 4000), 5e-4);
    assert!((lr_at_step(&s, 16000) - 2.5e-4).abs() < 1e-18);
    assert!((lr_at_step(&s, 2000) - 2.5e-4).abs() < 1e-18);
    assert!((lr_at_step(&s, 4001) - lr_at_step(&s, 4000)).abs() < 1e-7);
    let mut prev = f64::INFINITY;
    for step in 4000..20000 {
        let lr = lr_at_step(&s, step);
        assert!(lr <= prev);
        prev = lr;
    }
}

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 1,
        hidden: 16,
        heads: 2,
        ffn_dim: 32,
        max_positions: 32,
        dropout: 0.0,
        ..ModelConfig::tiny(vocab)
    }
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut model = random_model::<f64>(&small_config(12), 0).unwrap();
    let before = model.clone();
    let mut state = OptimizerState::new(&model.params, AdamConfig::default());
    let grads: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    adam_step(&mut model.params, &grads, &mut state, 1e-3).unwrap();
    assert_eq!(model, before);
    assert_eq!(state.step, 1);
}

#[test]
fn first_adam_step_is_sign_scaled() {
    let mut model = random_model::<f64>(&small_config(12), 0).unwrap();
    let before = model.clone();
    let mut state = OptimizerState::new(&model.params, AdamConfig::default());
    let grads: Vec<Vec<f64>> =
        model.params.iter().map(|(_, t)| (0..t.len()).map(|k| (k as f64 - 3.5) * 0.01).collect()).collect();
    let lr = 1e-3;
    adam_step(&mut model.params, &grads, &mut state, lr).unwrap();
    for (i, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            // bias-corrected moments equal g and g^2 after one step
            let want = before.params.at(i).data()[k] - lr * g[k] / (g[k].abs() + 1e-8);
            assert!((model.params.at(i).data()[k] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn non_finite_gradient_aborts_step() {
    let mut model = random_model::<f32>(&small_config(12), 0).unwrap();
    let before = model.clone();
    let mut state = OptimizerState::new(&model.params, AdamConfig::default());
    let mut grads: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| vec![0.1; t.len()]).collect();
    grads[3][0] = f32::NAN;
    let err = adam_step(&mut model.params, &grads, &mut state, 1e-3).unwrap_err();
    assert!(err.to_string().contains(model.params.name(3)));
    assert_eq!(model, before);
    assert_eq!(state.step, 0);
}

fn copy_corpus(vocab: &Vocabulary, n: usize, seed: u64, len: std::ops::Range<usize>) -> MultilingualCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = vocab.first_content_id();
    let pairs = (0..n)
        .map(|_| {
            let l = rng.random_range(len.clone());
            let s: Vec<usize> = (0..l).map(|_| rng.random_range(first..vocab.len())).collect();
            SentencePair { src: s.clone(), tgt: s }
        })
        .collect();
    MultilingualCorpus::new(vec![(Direction::new("en", "de"), pairs)]).unwrap()
}

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::new(&["en", "de"], (0..n).map(|i| format!("w{i}"))).unwrap()
}

#[test]
fn copy_task_converges() {
    let vocab = vocab(20);
    let corpus = copy_corpus(&vocab, 200, 1, 3..9);
    let config = ModelConfig { dropout: 0.0, ..ModelConfig::tiny(vocab.len()) };
    let mut cfg = TrainConfig::new(32, 2000, LrSchedule { peak_lr: 1e-3, warmup_steps: 200 });
    cfg.label_smoothing = 0.0;
    let mut trainer = Trainer::new(random_model::<f32>(&config, 1).unwrap(), cfg.lr, cfg.adam, 1).unwrap();
    let start = std::time::Instant::now();
    let out = train_translation(&mut trainer, &corpus, &vocab, &cfg, None).unwrap();
    let first_below = out.metrics.iter().position(|r| r.loss < 0.1);
    eprintln!("copy task: {:?}, first below 0.1 at {first_below:?}, tail {}", start.elapsed(), out.tail_loss(50));
    assert!(out.tail_loss(50) < 0.1);

    // a copy model is its own reverse model: back-translation yields (x, x)
    let tok = nmt_core::corpus::Tokenizer::default();
    let mono: Vec<String> = corpus.pairs(0)[..30].iter().map(|p| tok.detokenize(&p.tgt, &vocab)).collect();
    let bt = backtranslate(&trainer.model, &vocab, &tok, &mono, &Direction::new("de", "en"), &BeamParams::default())
        .unwrap();
    assert_eq!(bt.pairs.len() + bt.dropped, mono.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.de-en.tsv");
    nmt_core::corpus::write_parallel(&path, &bt.pairs).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), mono.len() - bt.dropped);
    for (s, t) in &bt.pairs {
        assert_eq!(s, t);
    }
}

#[test]
fn training_is_deterministic() {
    let vocab = vocab(12);
    let corpus = copy_corpus(&vocab, 40, 2, 2..6);
    let config = ModelConfig { dropout: 0.1, ..small_config(vocab.len()) };
    let cfg = TrainConfig { accumulation: 2, ..TrainConfig::new(4, 5, LrSchedule { peak_lr: 1e-3, warmup_steps: 2 }) };
    let run = || {
        let mut t = Trainer::new(random_model::<f32>(&config, 3).unwrap(), cfg.lr, cfg.adam, 3).unwrap();
        let out = train_translation(&mut t, &corpus, &vocab, &cfg, None).unwrap();
        (t.model, t.optimizer, out.metrics.iter().map(|r| r.loss).collect::<Vec<_>>())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn degenerate_probabilities_sample_one_direction() {
    let vocab = vocab(12);
    let base = copy_corpus(&vocab, 20, 2, 2..6);
    let corpus = MultilingualCorpus::new(vec![
        (Direction::new("en", "de"), base.pairs(0).to_vec()),
        (Direction::new("de", "en"), base.pairs(0).to_vec()),
    ])
    .unwrap();
    let cfg = TrainConfig {
        fixed_probabilities: Some(vec![1.0, 0.0]),
        accumulation: 3,
        ..TrainConfig::new(2, 10, LrSchedule { peak_lr: 1e-3, warmup_steps: 2 })
    };
    let mut t = Trainer::new(random_model::<f32>(&small_config(vocab.len()), 3).unwrap(), cfg.lr, cfg.adam, 3).unwrap();
    let out = train_translation(&mut t, &corpus, &vocab, &cfg, None).unwrap();
    assert!(out.metrics.iter().all(|r| r.losses.keys().eq(["en-de"].iter())));
}

#[test]
fn metrics_and_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = vocab(12);
    let corpus = copy_corpus(&vocab, 20, 2, 2..6);
    // 20 pairs at batch 2 is a 10-step epoch
    let cfg = TrainConfig { checkpoint_interval: 10, ..TrainConfig::new(2, 25, LrSchedule { peak_lr: 1e-3, warmup_steps: 2 }) };
    let mut t = Trainer::new(random_model::<f32>(&small_config(vocab.len()), 3).unwrap(), cfg.lr, cfg.adam, 3).unwrap();
    let out = train_translation(&mut t, &corpus, &vocab, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints.len(), 3);
    let last = Checkpoint::<f32>::load(out.checkpoints.last().unwrap()).unwrap().into_model().unwrap();
    assert_eq!(last, t.model);
    let text = std::fs::read_to_string(dir.path().join("logs/train.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 25);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r["step"], k as u64 + 1);
        let epoch = k / 10;
        assert_eq!(r["epoch"], epoch as u64);
        assert_eq!(r["temperature"].as_f64().unwrap(), 1.0 + epoch as f64 * 4.0 / 5.0);
        assert!(r["wall_time"].as_f64().is_some() && r["lr"].as_f64().is_some());
    }
}

/// Accumulating 4 micro-batches of 8 must match one batch of 32 when every
/// micro-batch has the same number of target tokens.
#[test]
fn accumulation_matches_large_batch() {
    let vocab = vocab(12);
    let corpus = copy_corpus(&vocab, 64, 4, 5..6);
    let config = small_config(vocab.len());
    let schedule = LrSchedule { peak_lr: 1e-3, warmup_steps: 3 };
    let model = random_model::<f64>(&config, 5).unwrap();
    let mut big = Trainer::new(model.clone(), schedule, AdamConfig::default(), 0).unwrap();
    let mut small = Trainer::new(model, schedule, AdamConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..4 {
        let idx: Vec<usize> = (0..32).map(|_| rng.random_range(0..64)).collect();
        let whole = corpus.batch(0, &idx, &vocab).unwrap();
        let parts: Vec<_> = idx.chunks(8).map(|c| corpus.batch(0, c, &vocab).unwrap()).collect();
        big.step(&[whole], |s, b| nmt_core::train::translation_loss(s, b, 0.1)).unwrap();
        small.step(&parts, |s, b| nmt_core::train::translation_loss(s, b, 0.1)).unwrap();
    }
    for ((name, a), (_, b)) in big.model.params.iter().zip(small.model.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "{name}: {x} vs {y}");
        }
    }
}

fn mono_sentences(vocab: &Vocabulary, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..rng.random_range(3..12)).map(|_| rng.random_range(vocab.first_content_id()..vocab.len())).collect())
        .collect()
}

#[test]
fn masking_rate_and_corruption_split() {
    let vocab = vocab(50);
    let sents = mono_sentences(&vocab, 3000, 7);
    let refs: Vec<&[usize]> = sents.iter().map(Vec::as_slice).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = mask_tokens(&mut rng, &refs, &MaskPolicy::default(), &vocab).unwrap();
    let content = sents.iter().map(Vec::len).sum::<usize>();
    assert!(content > 10_000);
    let rate = batch.selected_count() as f64 / content as f64;
    assert!((0.13..=0.17).contains(&rate), "{rate}");
    let masked = batch.input.ids.iter().zip(&batch.selected).filter(|(&i, &s)| s && i == 4).count();
    let frac = masked as f64 / batch.selected_count() as f64;
    assert!((0.77..=0.83).contains(&frac), "{frac}");
    for (i, &s) in batch.selected.iter().enumerate() {
        if !s {
            assert_eq!(batch.targets[i], 0);
        }
    }
}

#[test]
fn unselected_logits_do_not_affect_mlm_loss() {
    let vocab = vocab(10);
    let sents = mono_sentences(&vocab, 6, 9);
    let refs: Vec<&[usize]> = sents.iter().map(Vec::as_slice).collect();
    let batch = mask_tokens(&mut ChaCha8Rng::seed_from_u64(1), &refs, &MaskPolicy::default(), &vocab).unwrap();
    let n = batch.targets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits: Vec<f64> = (0..n * vocab.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut zeroed = logits.clone();
    for (i, &s) in batch.selected.iter().enumerate() {
        if !s {
            zeroed[i * vocab.len()..(i + 1) * vocab.len()].fill(0.0);
        }
    }
    let pad: Vec<bool> = batch.selected.iter().map(|s| !s).collect();
    assert_eq!(
        loss_value(&logits, vocab.len(), &batch.targets, &pad, 0.0),
        loss_value(&zeroed, vocab.len(), &batch.targets, &pad, 0.0)
    );
}

#[test]
fn untrained_mlm_loss_is_near_log_vocab() {
    let vocab = vocab(40);
    let config = ModelConfig { decoder_layers: 0, mlm_head: true, ..small_config(vocab.len()) };
    let model = random_model::<f32>(&config, 1).unwrap();
    let sents = mono_sentences(&vocab, 64, 3);
    let refs: Vec<&[usize]> = sents.iter().map(Vec::as_slice).collect();
    let batch = mask_tokens(&mut ChaCha8Rng::seed_from_u64(4), &refs, &MaskPolicy::default(), &vocab).unwrap();
    let mut s = Session::new(&model, false, None);
    let l = mlm_loss(&mut s, &batch).unwrap();
    let v = s.tape.value(l).item() as f64;
    assert!((v - (vocab.len() as f64).ln()).abs() < 0.1, "{v}");
}

#[test]
fn mlm_pretraining_reduces_loss() {
    let vocab = vocab(30);
    // every sentence counts upward, so masked tokens are predictable from neighbours
    let first = vocab.first_content_id();
    let sents: Vec<Vec<usize>> = (0..200).map(|i| (0..8).map(|k| first + (i + k) % 30).collect()).collect();
    let mono = MonolingualCorpus { languages: vec!["en".into()], sentences: vec![sents] };
    let config = ModelConfig { decoder_layers: 0, mlm_head: true, dropout: 0.0, ..small_config(vocab.len()) };
    let cfg = TrainConfig::new(16, 300, LrSchedule { peak_lr: 3e-3, warmup_steps: 30 });
    let mut t = Trainer::new(random_model::<f32>(&config, 1).unwrap(), cfg.lr, cfg.adam, 1).unwrap();
    let out = pretrain_mlm(&mut t, &mono, &vocab, &cfg, None).unwrap();
    let head = out.metrics[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    assert!(out.tail_loss(20) < head * 0.8, "{head} -> {}", out.tail_loss(20));
}

fn checkpoint_of(model: &TransformerModel<f32>) -> Checkpoint<f32> {
    Checkpoint::from_model(model)
}

#[test]
fn averaging_identities() {
    let model = random_model::<f32>(&small_config(12), 1).unwrap();
    let c = checkpoint_of(&model);
    assert_eq!(average(&[c.clone(), c.clone(), c.clone()]).unwrap(), c);
    let mut neg = c.clone();
    neg.tensors.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x = -*x));
    assert!(average(&[c.clone(), neg]).unwrap().tensors.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    // small integers are exact in f32 so W+1 is exact
    let mut w = c.clone();
    w.tensors.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().enumerate().for_each(|(k, x)| *x = (k % 7) as f32));
    let mut w2 = w.clone();
    w2.tensors.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x += 2.0));
    let mid = average(&[w.clone(), w2]).unwrap();
    for ((_, a), (_, b)) in mid.tensors.iter().zip(&w.tensors) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == y + 1.0));
    }
}

#[test]
fn averaging_is_order_independent_and_checks_shapes() {
    let ms: Vec<Checkpoint<f32>> =
        (0..3).map(|s| checkpoint_of(&random_model::<f32>(&small_config(12), s).unwrap())).collect();
    let a = average(&ms).unwrap();
    let b = average(&[ms[2].clone(), ms[0].clone(), ms[1].clone()]).unwrap();
    assert_eq!(a, b);
    let other = checkpoint_of(&random_model::<f32>(&small_config(13), 0).unwrap());
    assert!(average(&[ms[0].clone(), other]).is_err());
    assert!(average::<f32>(&[]).is_err());
}
