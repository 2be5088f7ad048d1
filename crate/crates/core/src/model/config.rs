use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// Longest sequence the model accepts, including language and bos tokens.
pub const MAX_SEQUENCE_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Architecture of the encoder-decoder.
///
/// The `post_layernorm`, `embed_layernorm`, `scale_embeddings` and
/// `tie_embeddings` flags select between the layout of a masked-LM encoder
/// (see [`ModelConfig::pretrain_compatible`]) and a conventional pre-norm
/// translation Transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub post_layernorm: bool,
    pub embed_layernorm: bool,
    pub scale_embeddings: bool,
    #[serde(default)]
    pub activation: Activation,
    pub tie_embeddings: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub attention_dropout: f64,
    /// Carries a masked-LM prediction head (pretraining checkpoints).
    #[serde(default)]
    pub mlm_head: bool,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// 12-layer encoder, 6-layer decoder, 768 hidden, 12 heads, 3072 FFN.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            encoder_layers: 12,
            decoder_layers: 6,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab_size,
            max_positions: MAX_SEQUENCE_LIMIT,
            ..Self::tiny(vocab_size)
        }
    }

    /// Desk-scale layout matching a masked-LM encoder.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            encoder_layers: 4,
            decoder_layers: 2,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_positions: 64,
            post_layernorm: true,
            embed_layernorm: true,
            scale_embeddings: false,
            activation: Activation::Gelu,
            tie_embeddings: true,
            dropout: 0.1,
            attention_dropout: 0.0,
            mlm_head: false,
        }
    }

    /// Conventional pre-norm layout with scaled embeddings and no embedding norm.
    pub fn with_baseline_layout(mut self) -> Self {
        self.post_layernorm = false;
        self.embed_layernorm = false;
        self.scale_embeddings = true;
        self
    }

    pub fn pretrain_compatible(&self) -> bool {
        self.post_layernorm
            && self.embed_layernorm
            && !self.scale_embeddings
            && self.activation == Activation::Gelu
            && self.tie_embeddings
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return usage(format!("hidden ({}) must be a positive multiple of heads ({})", self.hidden, self.heads));
        }
        if self.encoder_layers == 0 {
            return usage("encoder_layers must be at least 1");
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 {
            return usage("ffn_dim and vocab_size must be positive");
        }
        if self.max_positions == 0 || self.max_positions > MAX_SEQUENCE_LIMIT {
            return usage(format!("max_positions must lie in 1..={MAX_SEQUENCE_LIMIT}"));
        }
        for (name, rate) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return usage(format!("{name} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Canonical parameter names and shapes. Linear weights are `[in, out]`.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, v, p) = (self.hidden, self.ffn_dim, self.vocab_size, self.max_positions);
        let mut t: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| t.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str, i: usize, o: usize| {
            push(format!("{prefix}.weight"), vec![i, o]);
            push(format!("{prefix}.bias"), vec![o]);
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            push(format!("{prefix}.weight"), vec![h]);
            push(format!("{prefix}.bias"), vec![h]);
        };
        let attention = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                linear(push, &format!("{prefix}.{proj}"), h, h);
            }
        };

        if self.tie_embeddings {
            push("embed_tokens.weight".into(), vec![v, h]);
        } else {
            push("encoder.embed_tokens.weight".into(), vec![v, h]);
        }
        push("encoder.embed_positions.weight".into(), vec![p, h]);
        if self.embed_layernorm {
            norm(&mut push, "encoder.layernorm_embedding");
        }
        for i in 0..self.encoder_layers {
            let l = format!("encoder.layers.{i}");
            attention(&mut push, &format!("{l}.self_attn"));
            norm(&mut push, &format!("{l}.self_attn_layer_norm"));
            linear(&mut push, &format!("{l}.fc1"), h, f);
            linear(&mut push, &format!("{l}.fc2"), f, h);
            norm(&mut push, &format!("{l}.final_layer_norm"));
        }
        if !self.post_layernorm {
            norm(&mut push, "encoder.layer_norm");
        }

        if self.decoder_layers > 0 {
            if !self.tie_embeddings {
                push("decoder.embed_tokens.weight".into(), vec![v, h]);
            }
            push("decoder.embed_positions.weight".into(), vec![p, h]);
            if self.embed_layernorm {
                norm(&mut push, "decoder.layernorm_embedding");
            }
            for i in 0..self.decoder_layers {
                let l = format!("decoder.layers.{i}");
                attention(&mut push, &format!("{l}.self_attn"));
                norm(&mut push, &format!("{l}.self_attn_layer_norm"));
                attention(&mut push, &format!("{l}.encoder_attn"));
                norm(&mut push, &format!("{l}.encoder_attn_layer_norm"));
                linear(&mut push, &format!("{l}.fc1"), h, f);
                linear(&mut push, &format!("{l}.fc2"), f, h);
                norm(&mut push, &format!("{l}.final_layer_norm"));
            }
            if !self.post_layernorm {
                norm(&mut push, "decoder.layer_norm");
            }
            if !self.tie_embeddings {
                push("output_projection.weight".into(), vec![v, h]);
            }
        }

        if self.mlm_head {
            linear(&mut push, "lm_head.dense", h, h);
            norm(&mut push, "lm_head.layer_norm");
            push("lm_head.bias".into(), vec![v]);
        }
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.shape_table().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Name of the encoder's input token embedding.
    pub fn encoder_embedding_name(&self) -> &'static str {
        if self.tie_embeddings {
            "embed_tokens.weight"
        } else {
            "encoder.embed_tokens.weight"
        }
    }

    pub fn decoder_embedding_name(&self) -> &'static str {
        if self.tie_embeddings {
            "embed_tokens.weight"
        } else {
            "decoder.embed_tokens.weight"
        }
    }

    pub fn output_projection_name(&self) -> &'static str {
        if self.tie_embeddings {
            "embed_tokens.weight"
        } else {
            "output_projection.weight"
        }
    }
}
