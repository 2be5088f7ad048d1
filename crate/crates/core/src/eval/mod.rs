//! Beam-search decoding and BLEU.

mod beam;
mod bleu;
mod translate;

pub use beam::{beam_search, normalized_score, BeamParams, Hypothesis, StepScorer};
pub use bleu::{bleu, bleu_text, BleuStats, MAX_ORDER};
pub use translate::{banned_tokens, evaluate_bleu, translate, translate_ids, ModelScorer, DECODE_CHUNK};
