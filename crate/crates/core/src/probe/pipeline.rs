use std::fmt::Write as _;

use nmt_tensor::Float;
use serde::Serialize;

use super::align::{itermax, similarity_matrix, word_vectors, AlignmentSet};
use super::tree::{attention_graph, chu_liu_edmonds, uas, GoldTree};
use crate::corpus::{Tokenizer, Vocabulary, BOS, EOS, PAD};
use crate::error::{usage, Result};
use crate::model::{encode, EncodedBatch, TokenBatch, TransformerModel};

/// Sentences per encoder call.
const PROBE_CHUNK: usize = 64;

/// First input token: `<s>` for an encoder-only model, the language token otherwise.
pub fn probe_prefix<F: Float>(model: &TransformerModel<F>, vocab: &Vocabulary, lang: &str) -> Result<usize> {
    if model.config.decoder_layers == 0 {
        Ok(BOS)
    } else {
        vocab.lang_id(lang)
    }
}

/// A tokenized probe input: `[prefix, pieces.., </s>]` and the word of each position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeInput {
    pub ids: Vec<usize>,
    pub word_of: Vec<Option<usize>>,
    pub words: usize,
}

impl ProbeInput {
    pub fn new(text: &str, prefix: usize, vocab: &Vocabulary, tokenizer: &Tokenizer, max_positions: usize) -> Result<Self> {
        let t = tokenizer.tokenize(text, vocab);
        if t.ids.is_empty() {
            return usage(format!("empty probe sentence {text:?}"));
        }
        if t.ids.len() + 2 > max_positions {
            return usage(format!("probe sentence of {} pieces exceeds max_positions {max_positions}", t.ids.len()));
        }
        let mut ids = Vec::with_capacity(t.ids.len() + 2);
        ids.push(prefix);
        ids.extend(&t.ids);
        ids.push(EOS);
        let mut word_of = vec![None];
        word_of.extend(t.word_of.iter().map(|&w| Some(w)));
        word_of.push(None);
        Ok(Self { ids, word_of, words: t.word_count() })
    }
}

/// Encodes inputs in chunks, handing each chunk and its offset to `f`.
fn encode_chunks<F: Float>(
    model: &TransformerModel<F>,
    inputs: &[ProbeInput],
    mut f: impl FnMut(usize, &EncodedBatch<F>) -> Result<()>,
) -> Result<()> {
    for (c, chunk) in inputs.chunks(PROBE_CHUNK).enumerate() {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|p| p.ids.clone()).collect();
        let batch = TokenBatch::from_rows(&rows, PAD)?;
        f(c * PROBE_CHUNK, &encode(model, &batch)?)?;
    }
    Ok(())
}

/// Row `b` of a `[batch, len, hidden]` layer, or the final states when `layer` is `None`.
fn layer_row<F: Float>(enc: &EncodedBatch<F>, layer: Option<usize>, b: usize) -> &[F] {
    let t = match layer {
        Some(l) => &enc.layers[l],
        None => &enc.states,
    };
    let width = enc.len * t.shape()[2];
    &t.data()[b * width..(b + 1) * width]
}

/// Word alignments from cosine similarity of encoder word vectors.
/// `layer` selects an encoder layer (0-based); `None` uses the final output.
#[allow(clippy::too_many_arguments)]
pub fn probe_align<F: Float>(
    model: &TransformerModel<F>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    pairs: &[(String, String)],
    src_lang: &str,
    tgt_lang: &str,
    layer: Option<usize>,
    iterations: usize,
) -> Result<Vec<AlignmentSet>> {
    if let Some(l) = layer.filter(|&l| l >= model.config.encoder_layers) {
        return usage(format!("layer {l} outside encoder of {} layers", model.config.encoder_layers));
    }
    let max = model.config.max_positions;
    let (sp, tp) = (probe_prefix(model, vocab, src_lang)?, probe_prefix(model, vocab, tgt_lang)?);
    let src: Vec<ProbeInput> =
        pairs.iter().map(|(s, _)| ProbeInput::new(s, sp, vocab, tokenizer, max)).collect::<Result<_>>()?;
    let tgt: Vec<ProbeInput> =
        pairs.iter().map(|(_, t)| ProbeInput::new(t, tp, vocab, tokenizer, max)).collect::<Result<_>>()?;
    let hidden = model.config.hidden;
    let vectors = |inputs: &[ProbeInput]| -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(inputs.len());
        encode_chunks(model, inputs, |offset, enc| {
            for b in 0..enc.batch {
                let p = &inputs[offset + b];
                let mut word_of = p.word_of.clone();
                word_of.resize(enc.len, None);
                out.push(word_vectors(layer_row(enc, layer, b), hidden, &word_of)?);
            }
            Ok(())
        })?;
        Ok(out)
    };
    let (sv, tv) = (vectors(&src)?, vectors(&tgt)?);
    sv.iter().zip(&tv).map(|(s, t)| itermax(&similarity_matrix(s, t), iterations)).collect()
}

/// Per-layer UAS of attention-derived trees.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParseReport {
    pub layer_uas: Vec<f64>,
    pub best_layer: usize,
    pub sentences: usize,
}

impl ParseReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("layer\tuas\n");
        for (l, u) in self.layer_uas.iter().enumerate() {
            let mark = if l == self.best_layer { "\t*" } else { "" };
            let _ = writeln!(s, "{l}\t{:.4}{mark}", u);
        }
        s
    }
}

/// Parses each sentence with every encoder layer's head-averaged attention
/// (rooted at the gold root) and scores it against the gold heads.
pub fn probe_parse<F: Float>(
    model: &TransformerModel<F>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    lang: &str,
    trees: &[GoldTree],
) -> Result<ParseReport> {
    if trees.is_empty() {
        return usage("no sentences to parse");
    }
    let layers = model.config.encoder_layers;
    let prefix = probe_prefix(model, vocab, lang)?;
    let inputs: Vec<ProbeInput> = trees
        .iter()
        .map(|t| {
            let p = ProbeInput::new(&t.forms.join(" "), prefix, vocab, tokenizer, model.config.max_positions)?;
            if p.words != t.forms.len() {
                return usage(format!("tokenizer found {} words in a {}-word tree", p.words, t.forms.len()));
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let heads = model.config.heads;
    let mut sums = vec![0.0; layers];
    encode_chunks(model, &inputs, |offset, enc| {
        let len = enc.len;
        for b in 0..enc.batch {
            let gold = &trees[offset + b].tree;
            let mut word_of = inputs[offset + b].word_of.clone();
            word_of.resize(len, None);
            for (l, attn) in enc.attention.iter().enumerate() {
                let block = &attn.data()[b * heads * len * len..(b + 1) * heads * len * len];
                let graph = attention_graph(block, heads, len, &word_of)?;
                // a dependent attends to its head
                let n = graph.len();
                let weights: Vec<Vec<f64>> = (0..n).map(|h| (0..n).map(|d| graph[d][h]).collect()).collect();
                let tree = chu_liu_edmonds(&weights, gold.root)?;
                sums[l] += uas(&tree, gold)?;
            }
        }
        Ok(())
    })?;
    let layer_uas: Vec<f64> = sums.iter().map(|s| s / trees.len() as f64).collect();
    let mut best_layer = 0;
    for (l, &u) in layer_uas.iter().enumerate() {
        if u > layer_uas[best_layer] {
            best_layer = l;
        }
    }
    Ok(ParseReport { layer_uas, best_layer, sentences: trees.len() })
}
