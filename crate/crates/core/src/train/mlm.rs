use nmt_tensor::{Float, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::label_smoothed_loss;
use crate::corpus::{Vocabulary, BOS, EOS, MASK, PAD};
use crate::error::{usage, Result};
use crate::model::{Session, TokenBatch};

/// Selection rate and corruption split for masked-LM training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub select_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { select_rate: 0.15, mask_prob: 0.8, random_prob: 0.1 }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.select_rate > 0.0 && ok(self.select_rate) && ok(self.mask_prob) && ok(self.random_prob))
            || self.mask_prob + self.random_prob > 1.0
        {
            return usage(format!("invalid mask policy {self:?}"));
        }
        Ok(())
    }
}

/// Corrupted input rows `[<s>, x…, </s>]` with the original ids as targets at selected positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input: TokenBatch,
    pub targets: Vec<usize>,
    pub selected: Vec<bool>,
}

impl MaskedBatch {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Selects content positions independently at `select_rate`; if nothing in the
/// batch is selected, one selectable position is drawn uniformly instead.
pub fn mask_tokens<R: Rng>(
    rng: &mut R,
    sentences: &[&[usize]],
    policy: &MaskPolicy,
    vocab: &Vocabulary,
) -> Result<MaskedBatch> {
    let rows: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| {
            let mut r = Vec::with_capacity(s.len() + 2);
            r.push(BOS);
            r.extend_from_slice(s);
            r.push(EOS);
            r
        })
        .collect();
    let clean = TokenBatch::from_rows(&rows, PAD)?;
    let first = vocab.first_content_id();
    let selectable: Vec<usize> = (0..clean.ids.len()).filter(|&i| !clean.pad[i] && clean.ids[i] >= first).collect();
    if selectable.is_empty() {
        return usage("masked-LM batch has no maskable tokens");
    }
    let mut selected = vec![false; clean.ids.len()];
    for &i in &selectable {
        selected[i] = rng.random_bool(policy.select_rate);
    }
    if !selected.iter().any(|&s| s) {
        selected[selectable[rng.random_range(0..selectable.len())]] = true;
    }
    let mut input = clean.clone();
    for (i, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        let u: f64 = rng.random();
        if u < policy.mask_prob {
            input.ids[i] = MASK;
        } else if u < policy.mask_prob + policy.random_prob {
            input.ids[i] = rng.random_range(first..vocab.len());
        }
    }
    let targets = clean.ids.iter().zip(&selected).map(|(&t, &s)| if s { t } else { PAD }).collect();
    Ok(MaskedBatch { input, targets, selected })
}

/// Cross-entropy of the masked-LM head at selected positions only.
pub fn mlm_loss<F: Float>(session: &mut Session<'_, F>, batch: &MaskedBatch) -> Result<Var> {
    let enc = session.encoder(&batch.input)?;
    let logits = session.mlm_logits(enc.states)?;
    let pad: Vec<bool> = batch.selected.iter().map(|s| !s).collect();
    label_smoothed_loss(&mut session.tape, logits, &batch.targets, &pad, 0.0)
}
