//! Vocabulary, tokenization, multilingual corpora and temperature sampling.

mod data;
mod sampling;
mod tokenize;
mod vocab;

pub use data::{
    monolingual_file_name, read_lines, read_parallel, sample_batch, sample_direction, source_row, target_row,
    tokenize_pairs, write_parallel, Batch, Direction, MonolingualCorpus, MultilingualCorpus, SentencePair,
    MAX_PAIR_LEN,
};
pub use sampling::{compute_sampling_probs, steps_per_epoch, temperature_at_epoch, SamplingSchedule};
pub use tokenize::{Tokenized, Tokenizer, TokenizerMode, CONTINUATION};
pub use vocab::{language_token, Vocabulary, BOS, EOS, MASK, PAD, SPECIALS, UNK};
