//! Synthetic grid videos with templated captions.
//!
//! Every video holds one shape in a grid. The shape is visible in any single
//! frame; the motion is only visible in how frames change over time, and
//! `moves_left` is exactly the frame reversal of `moves_right`, so a temporal
//! mean cannot tell those two apart.
//!
//! Feature channels: 0..3 are the shape prototypes, 3 and 4 the column and
//! row coordinates of an occupied cell, the rest a fixed per-cell background.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{Layout, VideoFeatures};
use crate::data::features::write_feature_file;
use crate::data::manifest::{CorpusManifest, ManifestEntry, Split, Video};
use crate::error::{Error, Result};
use crate::rng::{substream, SYNTH};
use crate::tensor::Tensor;

const PROTOTYPE_CHANNELS: usize = 3;
const COL_CHANNEL: usize = 3;
const ROW_CHANNEL: usize = 4;
const MIN_DIM: usize = PROTOTYPE_CHANNELS + 2;
const BACKGROUND_SEED: u64 = 0x5eed_0bac;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn noun(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    MovesLeft,
    MovesRight,
    Grows,
    Blinks,
    Still,
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::MovesLeft, Motion::MovesRight, Motion::Grows, Motion::Blinks, Motion::Still];

    /// The two-word verb phrase used in captions.
    pub fn phrase(self) -> &'static str {
        match self {
            Motion::MovesLeft => "moves left",
            Motion::MovesRight => "moves right",
            Motion::Grows => "is growing",
            Motion::Blinks => "is blinking",
            Motion::Still => "sits still",
        }
    }

    pub fn is_directional(self) -> bool {
        matches!(self, Motion::MovesLeft | Motion::MovesRight)
    }

    /// Shape amplitude at frame `t` of `frames`; 0 means the shape is absent.
    fn amplitude(self, t: usize, frames: usize) -> f64 {
        match self {
            Motion::Grows => 0.4 + 1.2 * t as f64 / (frames - 1) as f64,
            Motion::Blinks => {
                if t % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 1.0,
        }
    }
}

/// Ground truth of one synthetic video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLabel {
    pub shape: Shape,
    pub motion: Motion,
    pub row: usize,
    /// Starting column of static shapes; ignored for moving ones.
    pub col: usize,
}

impl SynthLabel {
    pub fn caption(&self) -> String {
        format!("a {} {}", self.shape.noun(), self.motion.phrase())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub frames: usize,
    pub num_videos: usize,
    /// The last `val_videos` videos form the validation split.
    pub val_videos: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            rows: 3,
            cols: 3,
            dim: 16,
            frames: 8,
            num_videos: 600,
            val_videos: 100,
            seed: 7,
            noise_sigma: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.rows == 0 || self.cols < 2 {
            return fail(format!(
                "a {}x{} grid leaves no room for horizontal motion; need rows >= 1 and cols >= 2",
                self.rows, self.cols
            ));
        }
        if self.dim < MIN_DIM {
            return fail(format!("feature dim {} cannot hold 3 prototypes and 2 coordinates", self.dim));
        }
        if self.frames < 2 {
            return fail(format!("{} frame(s) cannot show motion", self.frames));
        }
        if self.num_videos == 0 || self.val_videos > self.num_videos {
            return fail(format!("{} videos with {} for validation", self.num_videos, self.val_videos));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise sigma {} must be finite and nonnegative", self.noise_sigma));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn layout(&self) -> Layout {
        Layout::Grid {
            rows: self.rows,
            cols: self.cols,
        }
    }

    fn coord(i: usize, extent: usize) -> f64 {
        if extent < 2 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (extent - 1) as f64
        }
    }

    /// Column occupied at frame `t` by a shape moving right across the grid.
    fn rightward_col(&self, t: usize) -> usize {
        t * self.cols / self.frames
    }

    fn background(&self) -> Vec<f64> {
        let mut rng = substream(BACKGROUND_SEED, "background", (self.regions() * 1000 + self.dim) as u64);
        let tail = self.dim - MIN_DIM;
        (0..self.regions() * tail).map(|_| rng.random_range(0.05..0.15)).collect()
    }

    /// Noise-free `[T, n, d]` features for `label`.
    pub fn render(&self, label: &SynthLabel) -> Result<Tensor> {
        self.validate()?;
        if label.row >= self.rows || label.col >= self.cols {
            return Err(Error::Spec(format!("cell ({}, {}) is outside the grid", label.row, label.col)));
        }
        let (t_len, n, d) = (self.frames, self.regions(), self.dim);
        let tail = d - MIN_DIM;
        let bg = self.background();
        let mut data = vec![0.0; t_len * n * d];
        for t in 0..t_len {
            for j in 0..n {
                let base = (t * n + j) * d;
                data[base + MIN_DIM..base + d].copy_from_slice(&bg[j * tail..(j + 1) * tail]);
            }
            let col = match label.motion {
                Motion::MovesRight => self.rightward_col(t),
                Motion::MovesLeft => self.rightward_col(t_len - 1 - t),
                _ => label.col,
            };
            let amp = label.motion.amplitude(t, t_len);
            if amp == 0.0 {
                continue;
            }
            let base = (t * n + label.row * self.cols + col) * d;
            data[base + label.shape.channel()] = amp;
            data[base + COL_CHANNEL] = Self::coord(col, self.cols);
            data[base + ROW_CHANNEL] = Self::coord(label.row, self.rows);
        }
        Tensor::new(vec![t_len, n, d], data)
    }
}

/// Word-level accuracy of generated captions against synthetic labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthAccuracy {
    /// Whole caption correct.
    pub exact: f64,
    /// Shape noun correct.
    pub shape: f64,
    /// Motion phrase correct.
    pub motion: f64,
    /// Motion phrase correct on `moves left` / `moves right` videos only.
    pub directional: f64,
    pub videos: usize,
    pub directional_videos: usize,
}

/// Scores captions (as words) position-free: the noun is found anywhere, the
/// motion phrase must appear as a contiguous word pair.
pub fn synth_accuracy(captions: &[Vec<String>], labels: &[SynthLabel]) -> Result<SynthAccuracy> {
    if captions.len() != labels.len() {
        return Err(Error::Alignment(vec![format!(
            "{} captions for {} labels",
            captions.len(),
            labels.len()
        )]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no captions to score"));
    }
    let has_phrase = |c: &[String], m: Motion| {
        let words: Vec<&str> = m.phrase().split(' ').collect();
        c.windows(words.len()).any(|w| w.iter().zip(&words).all(|(a, b)| a == b))
    };
    let (mut exact, mut shape, mut motion, mut dir, mut dir_total) = (0, 0, 0, 0, 0);
    for (c, l) in captions.iter().zip(labels) {
        exact += usize::from(c.join(" ") == l.caption());
        shape += usize::from(c.iter().any(|w| w == l.shape.noun()));
        let ok = has_phrase(c, l.motion);
        motion += usize::from(ok);
        if l.motion.is_directional() {
            dir_total += 1;
            dir += usize::from(ok);
        }
    }
    let n = labels.len() as f64;
    Ok(SynthAccuracy {
        exact: exact as f64 / n,
        shape: shape as f64 / n,
        motion: motion as f64 / n,
        directional: if dir_total == 0 { 0.0 } else { dir as f64 / dir_total as f64 },
        videos: labels.len(),
        directional_videos: dir_total,
    })
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    pub manifest: CorpusManifest,
    pub videos: Vec<Video>,
    pub labels: Vec<SynthLabel>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> Vec<Video> {
        self.manifest
            .entries
            .iter()
            .zip(&self.videos)
            .filter(|(e, _)| e.split == split)
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn labels_of(&self, split: Split) -> Vec<SynthLabel> {
        self.manifest
            .entries
            .iter()
            .zip(&self.labels)
            .filter(|(e, _)| e.split == split)
            .map(|(_, l)| *l)
            .collect()
    }

    /// Writes the manifest, one feature file per video and `labels.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("features"))?;
        for (entry, video) in self.manifest.entries.iter().zip(&self.videos) {
            write_feature_file(&root.join(&entry.feature_path), &video.features)?;
        }
        self.manifest.save(root)?;
        let mut labels = serde_json::to_string_pretty(&self.labels)?;
        labels.push('\n');
        fs::write(root.join("labels.json"), labels)?;
        Ok(())
    }
}

/// Generates `spec.num_videos` videos; each video draws its label and noise
/// from its own substream of `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let mut entries = Vec::with_capacity(spec.num_videos);
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut labels = Vec::with_capacity(spec.num_videos);
    let width = spec.num_videos.to_string().len().max(4);
    for i in 0..spec.num_videos {
        let mut rng = substream(spec.seed, SYNTH, i as u64);
        let label = SynthLabel {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            motion: Motion::ALL[rng.random_range(0..Motion::ALL.len())],
            row: rng.random_range(0..spec.rows),
            col: rng.random_range(0..spec.cols),
        };
        let mut values = spec.render(&label)?;
        if spec.noise_sigma > 0.0 {
            for v in values.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let id = format!("vid{i:0width$}");
        let split = if i >= spec.num_videos - spec.val_videos {
            Split::Val
        } else {
            Split::Train
        };
        let caption = label.caption();
        let features = VideoFeatures::new(values, spec.layout())?;
        entries.push(ManifestEntry {
            video_id: id.clone(),
            feature_path: format!("features/{id}.stft"),
            captions: vec![caption.clone()],
            split,
        });
        videos.push(Video::new(id, features, &[caption]));
        labels.push(label);
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        manifest: CorpusManifest { entries },
        videos,
        labels,
    })
}
