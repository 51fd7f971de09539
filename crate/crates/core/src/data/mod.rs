//! On-disk formats and the synthetic feature generator.

pub mod checkpoint;
pub mod features;
pub mod splits;
pub mod synth;
pub mod text;

pub use checkpoint::Checkpoint;
pub use features::{read_features, write_features, FeatureFileHeader, FeatureReader};
pub use splits::{read_splits, write_splits};
pub use synth::{synth_generate, SynthConfig, SynthData, SynthWorld};
pub use text::{read_word_table, write_word_table, WordTable};
