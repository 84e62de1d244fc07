//! Run configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use stats_core::data::SynthSpec;
use stats_core::model::ModelConfig;
use stats_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; synthesis, initialisation, shuffling and sampling all derive from it.
    pub seed: u64,
    /// Words seen fewer times than this map to `<unk>`.
    pub min_count: usize,
    pub synth: SynthSpec,
    /// `feature_dim` and `vocab_size` are taken from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        RunConfig {
            seed: synth.seed,
            min_count: 1,
            model: ModelConfig::desk(synth.dim, 0),
            synth,
            train: TrainConfig::desk(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults with `file` (if any) merged over them key by key.
    pub fn load(file: Option<&Path>) -> Result<Self, String> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            if !over.is_object() {
                return Err(format!("{}: config must be a JSON object", path.display()));
            }
            merge(&mut value, over);
        }
        serde_json::from_value(value).map_err(|e| format!("config: {e}"))
    }

    /// Pushes the root seed into every component.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.rng_seed = self.seed;
    }
}
