//! Feature files, manifests, batching and the synthetic corpus.

pub mod batch;
pub mod features;
pub mod manifest;
pub mod synth;

pub use batch::{batch_iter, pad_batch, Batch, BatchItem, BatchIter, CaptionSampling};
pub use features::{read_feature_file, read_features, write_feature_file, write_features};
pub use manifest::{build_vocab, load_split, CorpusManifest, ManifestEntry, Split, Video};
pub use synth::{
    generate_synthetic_corpus, synth_accuracy, Motion, Shape, SynthAccuracy, SynthLabel, SynthSpec, SyntheticCorpus,
};
