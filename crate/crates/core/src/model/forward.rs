use nmt_tensor::{AttentionSpec, Float, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TransformerModel;
use crate::error::{usage, Result};

/// Right-padded id matrix with its padding mask (`true` = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        if rows.is_empty() {
            return usage("empty batch");
        }
        if rows.iter().any(|r| r.is_empty()) {
            return usage("empty sequence in batch");
        }
        let len = rows.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut pad = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            pad.extend(std::iter::repeat_n(false, r.len()));
            ids.extend(std::iter::repeat_n(pad_id, len - r.len()));
            pad.extend(std::iter::repeat_n(true, len - r.len()));
        }
        Ok(TokenBatch { batch: rows.len(), len, ids, pad })
    }

    /// Unpadded prefix of row `b`.
    pub fn row(&self, b: usize) -> &[usize] {
        let n = self.row_len(b);
        &self.ids[b * self.len..b * self.len + n]
    }

    pub fn row_len(&self, b: usize) -> usize {
        self.pad[b * self.len..(b + 1) * self.len].iter().filter(|&&p| !p).count()
    }
}

/// Inverted-scaling dropout driven by a seeded generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub attention_rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, attention_rate: f64, seed: u64) -> Self {
        Dropout { rate, attention_rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn mask<F: Float>(&mut self, n: usize, rate: f64) -> Vec<F> {
        let keep = F::lit(1.0 / (1.0 - rate));
        (0..n).map(|_| if self.rng.random::<f64>() < rate { F::zero() } else { keep }).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// `[batch * len, hidden]`.
    pub states: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
    /// Output of each layer, before any final layer norm.
    pub layers: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub states: Var,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

/// Output of [`encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch<F: Float = f32> {
    /// `[batch, len, hidden]`.
    pub states: Tensor<F>,
    /// Per layer, `[batch, heads, len, len]`.
    pub attention: Vec<Tensor<F>>,
    /// Per layer output, `[batch, len, hidden]`.
    pub layers: Vec<Tensor<F>>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Output of [`decode`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput<F: Float = f32> {
    /// `[batch, tgt_len, vocab]`.
    pub logits: Tensor<F>,
    pub self_attention: Vec<Tensor<F>>,
    pub cross_attention: Vec<Tensor<F>>,
}

/// One forward (and optionally backward) pass: a tape with every model
/// parameter loaded as a leaf.
pub struct Session<'m, F: Float = f32> {
    pub model: &'m TransformerModel<F>,
    pub tape: Tape<F>,
    params: Vec<Var>,
    dropout: Option<Dropout>,
}

impl<'m, F: Float> Session<'m, F> {
    /// `trainable` records gradients for every parameter; `dropout` enables
    /// training-mode masks.
    pub fn new(model: &'m TransformerModel<F>, trainable: bool, dropout: Option<Dropout>) -> Self {
        let mut tape = Tape::new();
        let params = model
            .params
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                tape.leaf(t)
            })
            .collect();
        Session { model, tape, params, dropout }
    }

    pub fn param(&self, name: &str) -> Var {
        let i = self.model.params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.params[i]
    }

    /// Gradients aligned with the model's parameter order (after backward).
    pub fn param_grads(&mut self) -> Vec<Vec<F>> {
        let vars = self.params.clone();
        vars.into_iter()
            .map(|v| self.tape.take_grad(v).unwrap_or_else(|| vec![F::zero(); self.tape.value(v).len()]))
            .collect()
    }

    pub fn into_dropout(self) -> Option<Dropout> {
        self.dropout
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        let cfg = &self.model.config;
        if tokens.len > cfg.max_positions {
            return usage(format!("sequence length {} exceeds max_positions {}", tokens.len, cfg.max_positions));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return usage(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }
        if tokens.ids.len() != tokens.batch * tokens.len || tokens.pad.len() != tokens.ids.len() {
            return usage("malformed token batch");
        }
        if (0..tokens.batch).any(|b| tokens.pad[b * tokens.len]) {
            return usage("sequences must be nonempty and right-padded");
        }
        Ok(())
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            Some(d) if d.rate > 0.0 => {
                let rate = d.rate;
                let mask = d.mask(self.tape.value(x).len(), rate);
                Ok(self.tape.mask_mul(x, mask)?)
            }
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let y = self.tape.matmul(x, w, false)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        Ok(self.tape.layer_norm(x, g, b, F::lit(LAYER_NORM_EPS))?)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// Returns (projected output, attention node).
    fn attention(&mut self, prefix: &str, queries: Var, keys: Var, spec: AttentionSpec) -> Result<(Var, Var)> {
        let q = self.linear(queries, &format!("{prefix}.q_proj"))?;
        let k = self.linear(keys, &format!("{prefix}.k_proj"))?;
        let v = self.linear(keys, &format!("{prefix}.v_proj"))?;
        let drop = match self.dropout.as_mut() {
            Some(d) if d.attention_rate > 0.0 => {
                let rate = d.attention_rate;
                Some(d.mask(spec.batch * spec.heads * spec.q_len * spec.k_len, rate))
            }
            _ => None,
        };
        let a = self.tape.attention_with_dropout(q, k, v, spec, drop)?;
        let o = self.linear(a, &format!("{prefix}.out_proj"))?;
        Ok((o, a))
    }

    /// Residual sublayer in either post-norm or pre-norm arrangement.
    fn residual<G>(&mut self, x: Var, norm: &str, body: G) -> Result<(Var, Option<Var>)>
    where
        G: FnOnce(&mut Self, Var) -> Result<(Var, Option<Var>)>,
    {
        if self.model.config.post_layernorm {
            let (y, extra) = body(self, x)?;
            let y = self.dropout(y)?;
            let s = self.tape.add(x, y)?;
            Ok((self.norm(s, norm)?, extra))
        } else {
            let h = self.norm(x, norm)?;
            let (y, extra) = body(self, h)?;
            let y = self.dropout(y)?;
            Ok((self.tape.add(x, y)?, extra))
        }
    }

    fn embed(&mut self, side: &str, tokens: &TokenBatch) -> Result<Var> {
        let cfg = self.model.config.clone();
        let table = if side == "encoder" { cfg.encoder_embedding_name() } else { cfg.decoder_embedding_name() };
        let table = self.param(table);
        let mut x = self.tape.embedding(table, &tokens.ids)?;
        if cfg.scale_embeddings {
            x = self.tape.scale(x, F::lit((cfg.hidden as f64).sqrt()));
        }
        let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.len).collect();
        let pos_table = self.param(&format!("{side}.embed_positions.weight"));
        let p = self.tape.embedding(pos_table, &positions)?;
        x = self.tape.add(x, p)?;
        if cfg.embed_layernorm {
            x = self.norm(x, &format!("{side}.layernorm_embedding"))?;
        }
        self.dropout(x)
    }

    /// Encoder over `src`; states are `[batch * len, hidden]`.
    pub fn encoder(&mut self, src: &TokenBatch) -> Result<EncoderVars> {
        self.check_tokens(src)?;
        let cfg = self.model.config.clone();
        let mut x = self.embed("encoder", src)?;
        let mut attention = Vec::with_capacity(cfg.encoder_layers);
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let l = format!("encoder.layers.{i}");
            let spec = AttentionSpec {
                batch: src.batch,
                heads: cfg.heads,
                q_len: src.len,
                k_len: src.len,
                causal: false,
                key_padding: Some(src.pad.clone()),
            };
            let prefix = format!("{l}.self_attn");
            let (y, attn) = self.residual(x, &format!("{l}.self_attn_layer_norm"), |s, h| {
                let (o, a) = s.attention(&prefix, h, h, spec)?;
                Ok((o, Some(a)))
            })?;
            attention.push(attn.expect("attention node"));
            let (y, _) =
                self.residual(y, &format!("{l}.final_layer_norm"), |s, h| Ok((s.feed_forward(h, &l)?, None)))?;
            x = y;
            layers.push(x);
        }
        if !cfg.post_layernorm {
            x = self.norm(x, "encoder.layer_norm")?;
        }
        Ok(EncoderVars { states: x, attention, layers })
    }

    /// Decoder over `tgt` attending to encoder `states` (`[batch * src_len, hidden]`).
    pub fn decoder(&mut self, tgt: &TokenBatch, states: Var, src_pad: &[bool], src_len: usize) -> Result<DecoderVars> {
        self.check_tokens(tgt)?;
        let cfg = self.model.config.clone();
        if cfg.decoder_layers == 0 {
            return usage("model has no decoder");
        }
        if src_pad.len() != tgt.batch * src_len {
            return usage("source mask does not match target batch");
        }
        let mut x = self.embed("decoder", tgt)?;
        let mut self_attention = Vec::with_capacity(cfg.decoder_layers);
        let mut cross_attention = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let l = format!("decoder.layers.{i}");
            let self_spec = AttentionSpec {
                batch: tgt.batch,
                heads: cfg.heads,
                q_len: tgt.len,
                k_len: tgt.len,
                causal: true,
                key_padding: Some(tgt.pad.clone()),
            };
            let prefix = format!("{l}.self_attn");
            let (y, a) = self.residual(x, &format!("{l}.self_attn_layer_norm"), |s, h| {
                let (o, a) = s.attention(&prefix, h, h, self_spec)?;
                Ok((o, Some(a)))
            })?;
            self_attention.push(a.expect("attention node"));
            let cross_spec = AttentionSpec {
                batch: tgt.batch,
                heads: cfg.heads,
                q_len: tgt.len,
                k_len: src_len,
                causal: false,
                key_padding: Some(src_pad.to_vec()),
            };
            let prefix = format!("{l}.encoder_attn");
            let (y, a) = self.residual(y, &format!("{l}.encoder_attn_layer_norm"), |s, h| {
                let (o, a) = s.attention(&prefix, h, states, cross_spec)?;
                Ok((o, Some(a)))
            })?;
            cross_attention.push(a.expect("attention node"));
            let (y, _) =
                self.residual(y, &format!("{l}.final_layer_norm"), |s, h| Ok((s.feed_forward(h, &l)?, None)))?;
            x = y;
        }
        if !cfg.post_layernorm {
            x = self.norm(x, "decoder.layer_norm")?;
        }
        Ok(DecoderVars { states: x, self_attention, cross_attention })
    }

    /// Vocabulary logits through the (possibly tied) output projection.
    pub fn output_logits(&mut self, states: Var) -> Result<Var> {
        let w = self.param(self.model.config.output_projection_name());
        Ok(self.tape.matmul(states, w, true)?)
    }

    /// Masked-LM prediction head: dense, GELU, layer norm, tied projection, bias.
    pub fn mlm_logits(&mut self, states: Var) -> Result<Var> {
        if !self.model.config.mlm_head {
            return usage("model has no masked-LM head");
        }
        let h = self.linear(states, "lm_head.dense")?;
        let h = self.tape.gelu(h);
        let h = self.norm(h, "lm_head.layer_norm")?;
        let w = self.param(self.model.config.encoder_embedding_name());
        let logits = self.tape.matmul(h, w, true)?;
        let b = self.param("lm_head.bias");
        Ok(self.tape.add_bias(logits, b)?)
    }
}

/// Inference-mode encoder pass with captured attention maps.
pub fn encode<F: Float>(model: &TransformerModel<F>, tokens: &TokenBatch) -> Result<EncodedBatch<F>> {
    let mut s = Session::new(model, false, None);
    let out = s.encoder(tokens)?;
    let h = model.config.hidden;
    let states = s.tape.value(out.states).clone().reshape(&[tokens.batch, tokens.len, h])?;
    let attention = out.attention.iter().map(|&a| s.tape.attention_probs(a).expect("attention node")).collect();
    let layers = out
        .layers
        .iter()
        .map(|&v| s.tape.value(v).clone().reshape(&[tokens.batch, tokens.len, h]))
        .collect::<std::result::Result<_, _>>()?;
    Ok(EncodedBatch { states, attention, layers, pad: tokens.pad.clone(), batch: tokens.batch, len: tokens.len })
}

/// Inference-mode decoder pass over teacher-forced targets.
pub fn decode<F: Float>(model: &TransformerModel<F>, tgt: &TokenBatch, enc: &EncodedBatch<F>) -> Result<DecodeOutput<F>> {
    if tgt.batch != enc.batch {
        return usage("target and source batch sizes differ");
    }
    let mut s = Session::new(model, false, None);
    let h = model.config.hidden;
    let states = s.tape.constant(enc.states.clone().reshape(&[enc.batch * enc.len, h])?);
    let dec = s.decoder(tgt, states, &enc.pad, enc.len)?;
    let logits = s.output_logits(dec.states)?;
    let v = model.config.vocab_size;
    let logits = s.tape.value(logits).clone().reshape(&[tgt.batch, tgt.len, v])?;
    let grab = |vars: &[Var]| vars.iter().map(|&a| s.tape.attention_probs(a).expect("attention node")).collect();
    Ok(DecodeOutput { logits, self_attention: grab(&dec.self_attention), cross_attention: grab(&dec.cross_attention) })
}
