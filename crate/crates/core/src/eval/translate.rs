use nmt_tensor::{Float, Tensor};

use super::beam::{beam_search, BeamParams, Hypothesis, StepScorer};
use super::bleu::bleu_text;
use crate::corpus::{source_row, Tokenizer, Vocabulary, BOS, EOS, MASK, PAD};
use crate::error::{usage, Result};
use crate::model::{encode, EncodedBatch, Session, TokenBatch, TransformerModel};

/// Scores decoder prefixes against a batch of encoded sources.
pub struct ModelScorer<'m, F: Float = f32> {
    model: &'m TransformerModel<F>,
    enc: EncodedBatch<F>,
    banned: Vec<usize>,
}

impl<'m, F: Float> ModelScorer<'m, F> {
    pub fn new(model: &'m TransformerModel<F>, sources: &TokenBatch, banned: Vec<usize>) -> Result<Self> {
        Ok(Self { model, enc: encode(model, sources)?, banned })
    }
}

impl<F: Float> StepScorer for ModelScorer<'_, F> {
    fn next_log_probs(&mut self, rows: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let (len, h) = (self.enc.len, self.model.config.hidden);
        let prefixes: Vec<Vec<usize>> = rows.iter().map(|(_, p)| p.to_vec()).collect();
        let tgt = TokenBatch::from_rows(&prefixes, PAD)?;
        let src = self.enc.states.data();
        let mut states = Vec::with_capacity(rows.len() * len * h);
        let mut pad = Vec::with_capacity(rows.len() * len);
        for &(s, _) in rows {
            if s >= self.enc.batch {
                return usage(format!("sentence {s} outside batch of {}", self.enc.batch));
            }
            states.extend_from_slice(&src[s * len * h..(s + 1) * len * h]);
            pad.extend_from_slice(&self.enc.pad[s * len..(s + 1) * len]);
        }
        let mut session = Session::new(self.model, false, None);
        let states = session.tape.constant(Tensor::from_vec(&[rows.len() * len, h], states)?);
        let dec = session.decoder(&tgt, states, &pad, len)?;
        let last: Vec<usize> = (0..rows.len()).map(|r| r * tgt.len + tgt.row_len(r) - 1).collect();
        let last = session.tape.gather_rows(dec.states, &last)?;
        let logits = session.output_logits(last)?;
        let v = self.model.config.vocab_size;
        let data = session.tape.value(logits).data();
        Ok(data
            .chunks_exact(v)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                let mut out: Vec<f64> = row.iter().map(|x| x - log_z).collect();
                for &b in &self.banned {
                    if b < out.len() {
                        out[b] = f64::NEG_INFINITY;
                    }
                }
                out
            })
            .collect())
    }
}

/// Tokens never generated: pad, bos, mask and every language token.
pub fn banned_tokens(vocab: &Vocabulary) -> Vec<usize> {
    let mut out = vec![PAD, BOS, MASK];
    out.extend(crate::corpus::SPECIALS.len()..vocab.first_content_id());
    out
}

/// Sentences processed per decoder call.
pub const DECODE_CHUNK: usize = 64;

/// Beam-search translation of content-id sequences into `tgt_lang`.
pub fn translate_ids<F: Float>(
    model: &TransformerModel<F>,
    vocab: &Vocabulary,
    sources: &[Vec<usize>],
    tgt_lang: &str,
    params: &BeamParams,
) -> Result<Vec<Hypothesis>> {
    params.validate(model.config.max_positions)?;
    let lang = vocab.lang_id(tgt_lang)?;
    let cap = model.config.max_positions.saturating_sub(2);
    let banned = banned_tokens(vocab);
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_CHUNK) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|s| source_row(lang, &s[..s.len().min(cap)])).collect();
        let batch = TokenBatch::from_rows(&rows, PAD)?;
        let mut scorer = ModelScorer::new(model, &batch, banned.clone())?;
        out.extend(beam_search(&mut scorer, rows.len(), params, BOS, EOS)?);
    }
    Ok(out)
}

/// Text-in, text-out translation.
pub fn translate<F: Float>(
    model: &TransformerModel<F>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    sources: &[String],
    tgt_lang: &str,
    params: &BeamParams,
) -> Result<Vec<(String, Hypothesis)>> {
    let ids: Vec<Vec<usize>> = sources.iter().map(|s| tokenizer.tokenize(s, vocab).ids).collect();
    let hyps = translate_ids(model, vocab, &ids, tgt_lang, params)?;
    Ok(hyps.into_iter().map(|h| (tokenizer.detokenize(h.content(), vocab), h)).collect())
}

/// Translates the source side of `pairs` and scores against the target side.
pub fn evaluate_bleu<F: Float>(
    model: &TransformerModel<F>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    pairs: &[(String, String)],
    tgt_lang: &str,
    params: &BeamParams,
) -> Result<(f64, Vec<String>)> {
    let sources: Vec<String> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let refs: Vec<String> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let hyps: Vec<String> = translate(model, vocab, tokenizer, &sources, tgt_lang, params)?.into_iter().map(|(t, _)| t).collect();
    Ok((bleu_text(&hyps, &refs)?, hyps))
}
