use nmt_tensor::{Float, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{probe_prefix, ProbeInput};
use crate::corpus::{read_lines, Tokenizer, Vocabulary, EOS, PAD};
use crate::error::{usage, Error, Result};
use crate::model::{ParamStore, Session, TokenBatch, TransformerModel};
use crate::train::{adam_step, AdamConfig, OptimizerState};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifyExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: usize,
}

/// Reads `premise \t hypothesis \t label` lines.
pub fn read_classification(path: &Path) -> Result<Vec<ClassifyExample>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(k, line)| {
            let err = |message: String| Error::Parse { path: path.into(), line: k + 1, message };
            let cols: Vec<&str> = line.split('\t').collect();
            let [p, h, l] = cols[..] else { return Err(err(format!("expected 3 columns, found {}", cols.len()))) };
            let label = l.trim().parse().map_err(|_| err(format!("bad label {l:?}")))?;
            Ok(ClassifyExample { premise: p.into(), hypothesis: h.into(), label })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Update the encoder too; otherwise only the projection trains.
    #[serde(default)]
    pub finetune: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 16, lr: 1e-3, finetune: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub labels: usize,
    pub steps: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub finetuned: bool,
    pub encoder_fingerprint_before: u64,
    pub encoder_fingerprint_after: u64,
}

/// Input row `[prefix] premise </s> hypothesis </s>`.
fn pair_row(ex: &ClassifyExample, prefix: usize, vocab: &Vocabulary, tok: &Tokenizer, max: usize) -> Result<Vec<usize>> {
    let p = ProbeInput::new(&ex.premise, prefix, vocab, tok, max)?;
    let mut row = p.ids;
    row.extend(tok.tokenize(&ex.hypothesis, vocab).ids);
    row.push(EOS);
    if row.len() > max {
        return usage(format!("classification input of {} tokens exceeds max_positions {max}", row.len()));
    }
    Ok(row)
}

/// Logits `[batch, labels]` from the first-position encoder state.
fn head_logits<F: Float>(
    session: &mut Session<'_, F>,
    head: &ParamStore<F>,
    rows: &[Vec<usize>],
    trainable_head: bool,
) -> Result<(nmt_tensor::Var, nmt_tensor::Var, nmt_tensor::Var)> {
    let batch = TokenBatch::from_rows(rows, PAD)?;
    let enc = session.encoder(&batch)?;
    let first: Vec<usize> = (0..batch.batch).map(|b| b * batch.len).collect();
    let x = session.tape.gather_rows(enc.states, &first)?;
    let mut w = head.at(0).clone();
    let mut b = head.at(1).clone();
    w.requires_grad = trainable_head;
    b.requires_grad = trainable_head;
    let (w, b) = (session.tape.leaf(w), session.tape.leaf(b));
    let y = session.tape.matmul(x, w, false)?;
    Ok((session.tape.add_bias(y, b)?, w, b))
}

fn accuracy<F: Float>(model: &TransformerModel<F>, head: &ParamStore<F>, rows: &[Vec<usize>], gold: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for (chunk, labels) in rows.chunks(64).zip(gold.chunks(64)) {
        let mut s = Session::new(model, false, None);
        let (logits, _, _) = head_logits(&mut s, head, chunk, false)?;
        let v = s.tape.value(logits);
        let k = v.shape()[1];
        for (i, &l) in labels.iter().enumerate() {
            let row = &v.data()[i * k..(i + 1) * k];
            let mut arg = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[arg] {
                    arg = j;
                }
            }
            hits += usize::from(arg == l);
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Trains an affine projection on the first-position encoder state and
/// reports held-out accuracy. With `finetune` the encoder is updated in place.
#[allow(clippy::too_many_arguments)]
pub fn classify_probe<F: Float>(
    model: &mut TransformerModel<F>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    lang: &str,
    train: &[ClassifyExample],
    test: &[ClassifyExample],
    cfg: &ClassifyConfig,
) -> Result<ClassifyReport> {
    if train.is_empty() || test.is_empty() {
        return usage("classification probe needs nonempty train and test splits");
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return usage("classification probe needs positive epochs, batch_size and lr");
    }
    let labels = train.iter().chain(test).map(|e| e.label).max().unwrap_or(0) + 1;
    if labels < 2 {
        return usage("classification probe needs at least two labels");
    }
    let prefix = probe_prefix(model, vocab, lang)?;
    let max = model.config.max_positions;
    let rows = |set: &[ClassifyExample]| -> Result<Vec<Vec<usize>>> {
        set.iter().map(|e| pair_row(e, prefix, vocab, tokenizer, max)).collect()
    };
    let (train_rows, test_rows) = (rows(train)?, rows(test)?);
    let train_gold: Vec<usize> = train.iter().map(|e| e.label).collect();
    let test_gold: Vec<usize> = test.iter().map(|e| e.label).collect();

    let before = model.params.fingerprint_prefix("encoder.");
    let hidden = model.config.hidden;
    let mut head = ParamStore::new(vec![
        ("head.weight".into(), Tensor::zeros(&[hidden, labels])),
        ("head.bias".into(), Tensor::zeros(&[labels])),
    ])?;
    let adam = AdamConfig::default();
    let mut head_opt = OptimizerState::new(&head, adam);
    let mut enc_opt = cfg.finetune.then(|| OptimizerState::new(&model.params, adam));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch_rows: Vec<Vec<usize>> = idx.iter().map(|&i| train_rows[i].clone()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train_gold[i]).collect();
            let (head_grads, enc_grads) = {
                let mut s = Session::new(model, cfg.finetune, None);
                let (logits, w, b) = head_logits(&mut s, &head, &batch_rows, true)?;
                let ones = vec![F::one(); targets.len()];
                let loss = s.tape.cross_entropy(logits, &targets, &ones, F::zero())?;
                s.tape.backward(loss)?;
                let hg = vec![s.tape.take_grad(w).expect("head grad"), s.tape.take_grad(b).expect("head grad")];
                let eg = cfg.finetune.then(|| s.param_grads());
                (hg, eg)
            };
            adam_step(&mut head, &head_grads, &mut head_opt, cfg.lr)?;
            if let (Some(g), Some(opt)) = (enc_grads, enc_opt.as_mut()) {
                adam_step(&mut model.params, &g, opt, cfg.lr)?;
            }
            steps += 1;
        }
    }
    Ok(ClassifyReport {
        labels,
        steps,
        train_accuracy: accuracy(model, &head, &train_rows, &train_gold)?,
        test_accuracy: accuracy(model, &head, &test_rows, &test_gold)?,
        finetuned: cfg.finetune,
        encoder_fingerprint_before: before,
        encoder_fingerprint_after: model.params.fingerprint_prefix("encoder."),
    })
}
