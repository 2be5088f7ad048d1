//! Checkpoint serialization and initialization strategies.

mod checkpoint;
mod strategy;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use strategy::{initialize, random_model, CrossAttentionInit, DecoderLayerSource, InitStrategy, INIT_STD};
