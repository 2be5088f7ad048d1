//! Word alignment, attention parsing and classification probes.

mod align;
mod classify;
mod pipeline;
mod tree;

pub use align::{
    aer, corpus_aer, itermax, read_gold_alignments, similarity_matrix, word_vectors, AlignmentSet, GoldAlignment,
};
pub use classify::{classify_probe, read_classification, ClassifyConfig, ClassifyExample, ClassifyReport};
pub use pipeline::{probe_align, probe_parse, probe_prefix, ParseReport, ProbeInput};
pub use tree::{
    attention_graph, chu_liu_edmonds, parse_conllu, read_conllu, tree_weight, uas, write_conllu, DependencyTree,
    GoldTree,
};
