//! Corpus manifests and vocabulary construction.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::VideoFeatures;
use crate::data::features::read_feature_file;
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::vocab::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative to the corpus root.
    pub feature_path: String,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.video_id) {
                return Err(Error::Contract(format!("duplicate video id {}", e.video_id)));
            }
            if e.captions.iter().all(|c| tokenize(c).is_empty()) {
                return Err(Error::Contract(format!("video {} has no caption", e.video_id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads `manifest.json` from a corpus root.
    pub fn load(root: &Path) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_slice(&fs::read(root.join(MANIFEST_FILE))?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Tokens with at least `min_count` occurrences across every caption, ordered
/// by descending frequency and then lexicographically.
pub fn build_vocab(manifest: &CorpusManifest, min_count: usize) -> Result<Vocabulary> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("cannot build a vocabulary from an empty manifest"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in &manifest.entries {
        for c in &e.captions {
            for t in tokenize(c) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    if words.is_empty() {
        return Err(Error::Vocabulary(format!("no token occurs at least {min_count} times")));
    }
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_words(words.into_iter().map(|(w, _)| w))
}

/// A video with its features loaded and its references tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: VideoFeatures,
    pub references: Vec<Vec<String>>,
}

impl Video {
    pub fn new(id: impl Into<String>, features: VideoFeatures, captions: &[String]) -> Self {
        Video {
            id: id.into(),
            features,
            references: captions.iter().map(|c| tokenize(c)).filter(|t| !t.is_empty()).collect(),
        }
    }
}

/// Loads every video of `split` from a corpus root.
pub fn load_split(root: &Path, manifest: &CorpusManifest, split: Split) -> Result<Vec<Video>> {
    manifest
        .split(split)
        .map(|e| {
            let path: PathBuf = root.join(&e.feature_path);
            let features = read_feature_file(&path).map_err(|err| match err {
                Error::Format { offset, message } => Error::Format {
                    offset,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            Ok(Video::new(e.video_id.clone(), features, &e.captions))
        })
        .collect()
}
