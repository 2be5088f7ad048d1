use log::info;
use nmt_tensor::Float;

use crate::corpus::{Direction, Tokenizer, Vocabulary};
use crate::error::Result;
use crate::eval::{translate, BeamParams};
use crate::model::TransformerModel;

/// Synthetic pairs for `direction` and the number of sentences dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Backtranslation {
    pub pairs: Vec<(String, String)>,
    pub dropped: usize,
}

/// Pairs each target-language sentence with its translation into the source
/// language by `reverse_model`. Empty translations are dropped.
pub fn backtranslate<F: Float>(
    reverse_model: &TransformerModel<F>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    monolingual: &[String],
    direction: &Direction,
    params: &BeamParams,
) -> Result<Backtranslation> {
    let outputs = translate(reverse_model, vocab, tokenizer, monolingual, &direction.src, params)?;
    let mut pairs = Vec::with_capacity(monolingual.len());
    let mut dropped = 0;
    for (target, (source, _)) in monolingual.iter().zip(outputs) {
        if source.trim().is_empty() {
            dropped += 1;
        } else {
            pairs.push((source, target.clone()));
        }
    }
    if dropped > 0 {
        info!("{direction}: dropped {dropped} of {} back-translations with empty output", monolingual.len());
    }
    Ok(Backtranslation { pairs, dropped })
}
