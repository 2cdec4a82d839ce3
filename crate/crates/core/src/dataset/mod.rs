//! Trial records, the line-delimited embedding file format, padding, splits
//! and the synthetic generator.

mod batch;
mod records;
mod split;
mod synth;

pub use batch::{pad_and_mask, PaddedBatch};
pub use records::{load_dataset, write_dataset, DatasetManifest, Phase, StatementEmbedding, TrialRecord};
pub use split::{class_weights, quantile_split_date, temporal_split, ClassWeights, Splits};
pub use synth::{synthesize, synthesize_with, SynthSpec, SIGNAL_SHIFT};

#[cfg(test)]
mod tests;
