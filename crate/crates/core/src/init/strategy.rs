use nmt_tensor::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::error::{usage, Result};
use crate::model::{ModelConfig, ParamStore, TransformerModel};

/// Standard deviation of the random scheme for matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossAttentionInit {
    /// Copy the same source layer's self-attention weights.
    ShareSelfAttn,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderLayerSource {
    /// Decoder layer k <- encoder layer k.
    #[default]
    Bottom,
    /// Decoder layer k <- encoder layer (source_layers - decoder_layers + k).
    Top,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    Random,
    EncoderOnly,
    EncoderAndDecoder { cross_attention: CrossAttentionInit, layers: DecoderLayerSource },
}

impl InitStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::EncoderOnly => "enc.",
            InitStrategy::EncoderAndDecoder { .. } => "enc.+dec.",
        }
    }
}

fn is_norm_gain(name: &str) -> bool {
    (name.contains("layer_norm") || name.contains("layernorm")) && name.ends_with(".weight")
}

/// Fresh weights: N(0, 0.02) matrices, zero biases, unit layer-norm gains.
pub fn random_model<F: Float>(config: &ModelConfig, seed: u64) -> Result<TransformerModel<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let entries = config
        .shape_table()
        .into_iter()
        .map(|(name, shape)| {
            let t = if is_norm_gain(&name) {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let n = shape.iter().product();
                Tensor::from_vec(&shape, (0..n).map(|_| F::lit(normal.sample(&mut rng))).collect()).unwrap()
            };
            (name, t)
        })
        .collect();
    TransformerModel::new(config.clone(), ParamStore::new(entries)?)
}

fn check_compatible(target: &ModelConfig, source: &ModelConfig, strategy: InitStrategy) -> Result<()> {
    if (target.hidden, target.heads, target.ffn_dim) != (source.hidden, source.heads, source.ffn_dim) {
        return usage(format!(
            "source dims (hidden {}, heads {}, ffn {}) differ from target (hidden {}, heads {}, ffn {})",
            source.hidden, source.heads, source.ffn_dim, target.hidden, target.heads, target.ffn_dim
        ));
    }
    if (target.post_layernorm, target.embed_layernorm, target.scale_embeddings, target.activation)
        != (source.post_layernorm, source.embed_layernorm, source.scale_embeddings, source.activation)
    {
        return usage("target layout flags (layer-norm placement, embedding norm/scaling, activation) must match the source");
    }
    if target.encoder_layers > source.encoder_layers {
        return usage(format!(
            "target has {} encoder layers but the source only {}",
            target.encoder_layers, source.encoder_layers
        ));
    }
    if matches!(strategy, InitStrategy::EncoderAndDecoder { .. }) && target.decoder_layers > source.encoder_layers {
        return usage(format!(
            "cannot initialize {} decoder layers from {} source layers",
            target.decoder_layers, source.encoder_layers
        ));
    }
    Ok(())
}

/// Copies the leading rows of `src` into `dst` (both `[rows, dim]` with equal `dim`).
fn copy_rows<F: Float>(dst: &mut Tensor<F>, src: &Tensor<F>) {
    let n = dst.len().min(src.len());
    dst.data_mut()[..n].copy_from_slice(&src.data()[..n]);
}

fn copy_into<F: Float>(params: &mut ParamStore<F>, target: &str, source: &Checkpoint<F>, from: &str) -> Result<()> {
    let src = match source.get(from) {
        Some(t) => t,
        None => return usage(format!("source checkpoint lacks {from}")),
    };
    let dst = match params.get_mut(target) {
        Some(t) => t,
        None => return usage(format!("target model lacks {target}")),
    };
    if dst.shape() == src.shape() {
        dst.data_mut().copy_from_slice(src.data());
    } else if dst.rank() == 2 && src.rank() == 2 && dst.shape()[1] == src.shape()[1] {
        copy_rows(dst, src);
    } else {
        return usage(format!("cannot copy {from} {:?} into {target} {:?}", src.shape(), dst.shape()));
    }
    Ok(())
}

const NORM_PARTS: [&str; 2] = ["weight", "bias"];
const ATTN_PARTS: [&str; 8] = [
    "q_proj.weight",
    "q_proj.bias",
    "k_proj.weight",
    "k_proj.bias",
    "v_proj.weight",
    "v_proj.bias",
    "out_proj.weight",
    "out_proj.bias",
];

/// Builds a model for `config` under `strategy`.
///
/// Non-random strategies overwrite a seeded random model with weights copied
/// from `source`; embedding rows beyond the source vocabulary (new language
/// tokens) keep their random values.
pub fn initialize<F: Float>(
    config: &ModelConfig,
    strategy: InitStrategy,
    source: Option<&Checkpoint<F>>,
    seed: u64,
) -> Result<TransformerModel<F>> {
    let mut model = random_model::<F>(config, seed)?;
    if strategy == InitStrategy::Random {
        return Ok(model);
    }
    let Some(source) = source else {
        return usage(format!("initialization strategy {} requires a source checkpoint", strategy.label()));
    };
    let sc = &source.config;
    check_compatible(config, sc, strategy)?;
    let params = &mut model.params;
    let src_embed = sc.encoder_embedding_name();

    copy_into(params, config.encoder_embedding_name(), source, src_embed)?;
    copy_into(params, "encoder.embed_positions.weight", source, "encoder.embed_positions.weight")?;
    if config.embed_layernorm {
        for p in NORM_PARTS {
            copy_into(params, &format!("encoder.layernorm_embedding.{p}"), source, &format!("encoder.layernorm_embedding.{p}"))?;
        }
    }
    for i in 0..config.encoder_layers {
        let names: Vec<String> = params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with(&format!("encoder.layers.{i}.")))
            .collect();
        for n in names {
            copy_into(params, &n, source, &n)?;
        }
    }
    if !config.post_layernorm {
        for p in NORM_PARTS {
            copy_into(params, &format!("encoder.layer_norm.{p}"), source, &format!("encoder.layer_norm.{p}"))?;
        }
    }
    if config.mlm_head && sc.mlm_head {
        let names: Vec<String> =
            params.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("lm_head.")).collect();
        for n in names {
            copy_into(params, &n, source, &n)?;
        }
    }

    if let InitStrategy::EncoderAndDecoder { cross_attention, layers } = strategy {
        if !config.tie_embeddings {
            copy_into(params, "decoder.embed_tokens.weight", source, src_embed)?;
            copy_into(params, "output_projection.weight", source, src_embed)?;
        }
        copy_into(params, "decoder.embed_positions.weight", source, "encoder.embed_positions.weight")?;
        if config.embed_layernorm {
            for p in NORM_PARTS {
                copy_into(params, &format!("decoder.layernorm_embedding.{p}"), source, &format!("encoder.layernorm_embedding.{p}"))?;
            }
        }
        let offset = match layers {
            DecoderLayerSource::Bottom => 0,
            DecoderLayerSource::Top => sc.encoder_layers - config.decoder_layers,
        };
        for k in 0..config.decoder_layers {
            let dst = format!("decoder.layers.{k}");
            let src = format!("encoder.layers.{}", k + offset);
            for p in ATTN_PARTS {
                copy_into(params, &format!("{dst}.self_attn.{p}"), source, &format!("{src}.self_attn.{p}"))?;
                if cross_attention == CrossAttentionInit::ShareSelfAttn {
                    copy_into(params, &format!("{dst}.encoder_attn.{p}"), source, &format!("{src}.self_attn.{p}"))?;
                }
            }
            for p in NORM_PARTS {
                copy_into(params, &format!("{dst}.self_attn_layer_norm.{p}"), source, &format!("{src}.self_attn_layer_norm.{p}"))?;
                if cross_attention == CrossAttentionInit::ShareSelfAttn {
                    copy_into(params, &format!("{dst}.encoder_attn_layer_norm.{p}"), source, &format!("{src}.self_attn_layer_norm.{p}"))?;
                }
                copy_into(params, &format!("{dst}.final_layer_norm.{p}"), source, &format!("{src}.final_layer_norm.{p}"))?;
            }
            for fc in ["fc1", "fc2"] {
                for p in NORM_PARTS {
                    copy_into(params, &format!("{dst}.{fc}.{p}"), source, &format!("{src}.{fc}.{p}"))?;
                }
            }
        }
        if !config.post_layernorm {
            for p in NORM_PARTS {
                copy_into(params, &format!("decoder.layer_norm.{p}"), source, &format!("encoder.layer_norm.{p}"))?;
            }
        }
    }
    Ok(model)
}
