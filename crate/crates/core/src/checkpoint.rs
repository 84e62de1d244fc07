//! Model checkpoints: a length-prefixed JSON header followed by the parameter
//! tensors in `ModelParams::named` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_exact_at, read_u32, Tensor};
use crate::training::TrainConfig;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 4] = b"STCK";
const MAX_HEADER: u32 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub vocab_hash: u64,
    pub vocab: Vec<String>,
    pub params: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub vocab: Vocabulary,
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    vocab: &Vocabulary,
    epoch: usize,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        train: train.cloned(),
        epoch,
        vocab_hash: vocab.hash(),
        vocab: vocab.tokens().to_vec(),
        params: model.params.names(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_params(w, model)
}

/// Just the tensor payload; two models with equal payloads are bitwise identical.
pub fn write_params<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    for (_, _, t) in model.params.named() {
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let len = read_u32(r, &mut offset)?;
    if len > MAX_HEADER {
        return Err(Error::Format {
            offset: 4,
            message: format!("implausible header length {len}"),
        });
    }
    let mut json = vec![0u8; len as usize];
    read_exact_at(r, &mut json, &mut offset)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::Format {
        offset: 8,
        message: format!("bad header: {e}"),
    })?;
    let vocab = Vocabulary::new(header.vocab.clone())?;
    if vocab.hash() != header.vocab_hash {
        return Err(Error::Vocabulary(format!(
            "checkpoint vocabulary hash {:016x} does not match its tokens ({:016x})",
            header.vocab_hash,
            vocab.hash()
        )));
    }
    if vocab.len() != header.model.vocab_size {
        return Err(Error::Vocabulary(format!(
            "model expects {} tokens, checkpoint vocabulary has {}",
            header.model.vocab_size,
            vocab.len()
        )));
    }
    let mut model = Model::zeros(header.model.clone())?;
    let names = model.params.names();
    if names != header.params {
        return Err(Error::Format {
            offset: 8,
            message: format!("parameter list differs from the model layout ({} vs {} names)", header.params.len(), names.len()),
        });
    }
    for (name, slot) in names.iter().zip(model.params.tensors_mut()) {
        let start = offset;
        let t = Tensor::read_from(r, &mut offset)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                offset: start,
                message: format!("{name}: stored shape {:?}, expected {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Ok(Checkpoint { header, model, vocab })
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary, epoch: usize, train: Option<&TrainConfig>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, vocab, epoch, train)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
