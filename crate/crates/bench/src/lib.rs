//! Shared fixtures for the benchmarks.

use stats_core::data::{build_vocab, generate_synthetic_corpus, Split, SynthSpec, Video};
use stats_core::model::{Branch, Model, ModelConfig, TemporalScheme};
use stats_core::rng::{substream, INIT};
use stats_core::Vocabulary;

/// A small synthetic corpus with its vocabulary.
pub struct Fixture {
    pub vocab: Vocabulary,
    pub train: Vec<Video>,
    pub val: Vec<Video>,
    pub spec: SynthSpec,
}

impl Fixture {
    pub fn new(videos: usize) -> Self {
        let spec = SynthSpec {
            num_videos: videos,
            val_videos: videos / 5,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).expect("valid synthetic spec");
        let vocab = build_vocab(&corpus.manifest, 1).expect("non-empty vocabulary");
        Fixture {
            vocab,
            train: corpus.split(Split::Train),
            val: corpus.split(Split::Val),
            spec,
        }
    }

    /// Freshly initialised desk-sized model.
    pub fn model(&self, scheme: TemporalScheme, branch: Branch) -> Model {
        let cfg = ModelConfig {
            scheme,
            branch,
            ..ModelConfig::desk(self.spec.dim, self.vocab.len())
        };
        Model::new(cfg, &mut substream(0, INIT, 0)).expect("valid model config")
    }
}
