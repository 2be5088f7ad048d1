//! Transformer encoder-decoder with retrievable per-layer attention maps.

mod config;
mod forward;
mod params;

pub use config::{Activation, ModelConfig, MAX_SEQUENCE_LIMIT};
pub use forward::{decode, encode, DecodeOutput, Dropout, EncodedBatch, EncoderVars, Session, TokenBatch};
pub use params::ParamStore;

use nmt_tensor::{Float, Tensor};

use crate::error::{usage, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<F: Float = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Float> TransformerModel<F> {
    /// Wraps parameters after checking them against the config's shape table.
    pub fn new(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let table = config.shape_table();
        if table.len() != params.len() {
            return usage(format!("expected {} parameters, got {}", table.len(), params.len()));
        }
        for (i, (name, shape)) in table.iter().enumerate() {
            let t = params.at(i);
            if params.name(i) != name || t.shape() != shape.as_slice() {
                return usage(format!(
                    "parameter {i}: expected {name} {shape:?}, got {} {:?}",
                    params.name(i),
                    t.shape()
                ));
            }
        }
        Ok(TransformerModel { config, params })
    }

    /// All-zero weights (layer-norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let entries = config.shape_table().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        Self::new(config, ParamStore::new(entries)?)
    }

    pub fn param(&self, name: &str) -> &Tensor<F> {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn encoder_token_embedding(&self) -> &Tensor<F> {
        self.param(self.config.encoder_embedding_name())
    }

    pub fn decoder_token_embedding(&self) -> &Tensor<F> {
        self.param(self.config.decoder_embedding_name())
    }

    pub fn output_projection(&self) -> &Tensor<F> {
        self.param(self.config.output_projection_name())
    }

    pub fn cast<G: Float>(&self) -> TransformerModel<G> {
        let entries = self.params.iter().map(|(n, t)| (n.to_string(), t.cast::<G>())).collect();
        TransformerModel { config: self.config.clone(), params: ParamStore::new(entries).expect("unique names") }
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }
}
