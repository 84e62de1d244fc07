//! Shuffled, padded mini-batches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::VideoFeatures;
use crate::data::manifest::Video;
use crate::error::{Error, Result};
use crate::rng::{substream, SHUFFLE};
use crate::vocab::{Vocabulary, EOS, PAD};

/// How reference captions are turned into training targets each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSampling {
    /// One randomly chosen reference per video per epoch.
    #[default]
    OnePerEpoch,
    /// Every reference becomes its own item.
    AllCaptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Index into the video slice the iterator was built from.
    pub video: usize,
    /// Features zero-padded along time to the batch's frame count.
    pub features: VideoFeatures,
    pub frame_mask: Vec<bool>,
    /// Target tokens (caption then EOS), padded with PAD.
    pub targets: Vec<usize>,
    pub target_mask: Vec<bool>,
}

impl BatchItem {
    /// `None` when no frame is padding.
    pub fn mask(&self) -> Option<&[bool]> {
        if self.frame_mask.iter().all(|&m| m) {
            None
        } else {
            Some(&self.frame_mask)
        }
    }

    pub fn num_targets(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn num_targets(&self) -> usize {
        self.items.iter().map(BatchItem::num_targets).sum()
    }
}

pub struct BatchIter<'a> {
    videos: &'a [Video],
    vocab: &'a Vocabulary,
    units: Vec<(usize, usize)>,
    pos: usize,
    batch_size: usize,
}

/// Batches for one epoch. Order and reference choice depend only on `(seed, epoch)`.
pub fn batch_iter<'a>(
    videos: &'a [Video],
    vocab: &'a Vocabulary,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    sampling: CaptionSampling,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut rng = substream(seed, SHUFFLE, epoch as u64);
    let mut units = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        if v.references.is_empty() {
            return Err(Error::Contract(format!("video {} has no reference caption", v.id)));
        }
        match sampling {
            CaptionSampling::OnePerEpoch => units.push((i, rng.random_range(0..v.references.len()))),
            CaptionSampling::AllCaptions => units.extend((0..v.references.len()).map(|r| (i, r))),
        }
    }
    units.shuffle(&mut rng);
    Ok(BatchIter {
        videos,
        vocab,
        units,
        pos: 0,
        batch_size,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.units.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.units.len());
        let units = &self.units[self.pos..end];
        self.pos = end;
        Some(pad_batch(self.videos, self.vocab, units))
    }
}

/// Pads the given `(video, reference)` pairs to a common frame count and caption length.
pub fn pad_batch(videos: &[Video], vocab: &Vocabulary, units: &[(usize, usize)]) -> Batch {
    let frames = units.iter().map(|&(v, _)| videos[v].features.frames()).max().unwrap_or(0);
    let encoded: Vec<Vec<usize>> = units
        .iter()
        .map(|&(v, r)| {
            let mut t = vocab.encode(&videos[v].references[r]);
            t.push(EOS);
            t
        })
        .collect();
    let len = encoded.iter().map(Vec::len).max().unwrap_or(0);
    let items = units
        .iter()
        .zip(encoded)
        .map(|(&(v, _), mut targets)| {
            let vf = &videos[v].features;
            let frame_mask = (0..frames).map(|t| t < vf.frames()).collect();
            let target_mask = (0..len).map(|i| i < targets.len()).collect();
            targets.resize(len, PAD);
            BatchItem {
                video: v,
                features: vf.padded(frames),
                frame_mask,
                targets,
                target_mask,
            }
        })
        .collect();
    Batch { items }
}
