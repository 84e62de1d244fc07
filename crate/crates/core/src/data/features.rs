//! Binary feature files.
//!
//! Layout (all little-endian): magic `STFT`, then seven `u32`s (version,
//! layout tag, grid rows, grid cols, T, n, d) for a 32-byte header, followed by
//! `T * n * d` `f32` values in `[T, n, d]` row-major order. Layout tag 0 is a
//! grid, 1 is detection boxes (rows and cols are then 0).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{Layout, VideoFeatures};
use crate::error::{Error, Result};
use crate::tensor::{read_exact_at, read_u32, Tensor};

pub const MAGIC: &[u8; 4] = b"STFT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;

pub fn write_features<W: Write>(w: &mut W, vf: &VideoFeatures) -> Result<()> {
    let (tag, rows, cols) = match vf.layout() {
        Layout::Grid { rows, cols } => (0u32, rows as u32, cols as u32),
        Layout::DetectionBoxes => (1, 0, 0),
    };
    w.write_all(MAGIC)?;
    for v in [VERSION, tag, rows, cols, vf.frames() as u32, vf.regions() as u32, vf.dim() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &x in vf.values().data() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<VideoFeatures> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"STFT\""),
        });
    }
    let version = read_u32(r, &mut offset)?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let tag = read_u32(r, &mut offset)?;
    let rows = read_u32(r, &mut offset)? as usize;
    let cols = read_u32(r, &mut offset)? as usize;
    let t = read_u32(r, &mut offset)? as usize;
    let n = read_u32(r, &mut offset)? as usize;
    let d = read_u32(r, &mut offset)? as usize;
    let layout = match tag {
        0 => Layout::Grid { rows, cols },
        1 => Layout::DetectionBoxes,
        other => {
            return Err(Error::Format {
                offset: 8,
                message: format!("unknown layout tag {other}"),
            })
        }
    };
    if t == 0 || n == 0 || d == 0 {
        return Err(Error::Format {
            offset: 20,
            message: format!("empty feature block T={t} n={n} d={d}"),
        });
    }
    if let Layout::Grid { rows, cols } = layout {
        if rows * cols != n {
            return Err(Error::Format {
                offset: 12,
                message: format!("grid {rows}x{cols} does not hold n={n} regions"),
            });
        }
    }
    let count = t
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .filter(|&c| c <= (1 << 31))
        .ok_or_else(|| Error::Format {
            offset: 20,
            message: format!("implausible feature block T={t} n={n} d={d}"),
        })?;
    let mut bytes = vec![0u8; count * 4];
    read_exact_at(r, &mut bytes, &mut offset)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let values = Tensor::new(vec![t, n, d], data)?;
    VideoFeatures::new(values, layout).map_err(|e| Error::Format {
        offset: HEADER_LEN,
        message: e.to_string(),
    })
}

pub fn write_feature_file(path: &Path, vf: &VideoFeatures) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, vf)?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<VideoFeatures> {
    read_features(&mut BufReader::new(File::open(path)?))
}
