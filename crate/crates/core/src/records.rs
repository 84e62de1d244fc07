//! Machine-readable outputs: caption JSON lines and per-word attention dumps.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Generation;
use crate::vocab::Vocabulary;

/// Attention weights behind one generated word. Weights of mechanisms the
/// model does not use are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub word_index: usize,
    pub word: String,
    pub temporal_weights: Option<Vec<f64>>,
    pub spatial_weights: Option<Vec<f64>>,
    pub ts_frame_weights: Option<Vec<f64>>,
    pub ts_spatial_weights: Option<Vec<f64>>,
    pub branch_weights: Option<Vec<f64>>,
}

/// One record per decoding step, the final EOS step included.
pub fn attention_records(generation: &Generation, vocab: &Vocabulary) -> Result<Vec<AttentionRecord>> {
    generation
        .dumps
        .iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(AttentionRecord {
                word_index: i,
                word: vocab.token(d.token)?.to_string(),
                temporal_weights: d.temporal.clone(),
                spatial_weights: d.st_spatial.clone(),
                ts_frame_weights: d.ts_frames.clone(),
                ts_spatial_weights: d.ts_spatial.clone(),
                branch_weights: d.branch.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub caption: Vec<String>,
    pub log_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dumps: Option<Vec<AttentionRecord>>,
}

impl CaptionRecord {
    pub fn new(video_id: impl Into<String>, generation: &Generation, vocab: &Vocabulary, dumps: bool) -> Result<Self> {
        Ok(CaptionRecord {
            video_id: video_id.into(),
            caption: vocab.decode(&generation.tokens)?,
            log_prob: generation.log_prob,
            dumps: if dumps { Some(attention_records(generation, vocab)?) } else { None },
        })
    }
}

/// Reads caption JSON lines, skipping blank lines. Errors carry the line number.
pub fn read_caption_records<R: BufRead>(r: R) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset: i as u64 + 1,
            message: format!("caption line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepDump;
    use crate::vocab::EOS;

    #[test]
    fn records_follow_steps() {
        let vocab = Vocabulary::from_words(["a", "dog"]).unwrap();
        let dog = vocab.id("dog");
        let generation = Generation {
            tokens: vec![dog],
            log_prob: -0.5,
            dumps: vec![
                StepDump {
                    token: dog,
                    temporal: Some(vec![0.25, 0.75]),
                    ..Default::default()
                },
                StepDump {
                    token: EOS,
                    ..Default::default()
                },
            ],
        };
        let rec = CaptionRecord::new("v1", &generation, &vocab, true).unwrap();
        let dumps = rec.dumps.as_ref().unwrap();
        assert_eq!(dumps.len(), 2);
        assert_eq!(dumps[1].word, "<eos>");
        assert_eq!(dumps[0].temporal_weights.as_deref(), Some(&[0.25, 0.75][..]));
        let line = serde_json::to_string(&rec).unwrap();
        let back = read_caption_records(format!("{line}\n\n{line}\n").as_bytes()).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
        assert!(matches!(read_caption_records(&b"{}\n"[..]), Err(Error::Format { offset: 1, .. })));
    }
}
