//! Big-endian IDX files as distributed for MNIST.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{DataError, RawDigits};
use crate::diffengine::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded content of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `N×rows×cols` pixels scaled to `[0,1]`.
    Images(Tensor),
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    let chunk = bytes.get(offset..end).ok_or(DataError::Truncated {
        offset: bytes.len(),
        needed: end,
    })?;
    Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], DataError> {
    let end = offset + len;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            needed: end,
        });
    }
    if bytes.len() > end {
        return Err(DataError::DimMismatch {
            offset: end,
            detail: format!("{} trailing bytes after declared payload", bytes.len() - end),
        });
    }
    Ok(&bytes[offset..end])
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    match read_u32(bytes, 0)? {
        IMAGES_MAGIC => {
            let n = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            if n == 0 || rows == 0 || cols == 0 {
                return Err(DataError::DimMismatch {
                    offset: 4,
                    detail: format!("zero dimension in {n}x{rows}x{cols}"),
                });
            }
            let raw = payload(bytes, 16, n * rows * cols)?;
            let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxData::Images(Tensor::new(vec![n, rows, cols], data)?))
        }
        LABELS_MAGIC => {
            let n = read_u32(bytes, 4)? as usize;
            Ok(IdxData::Labels(payload(bytes, 8, n)?.to_vec()))
        }
        other => Err(DataError::BadMagic {
            found: other,
            offset: 0,
        }),
    }
}

/// Reads a file, inflating it first when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    } else {
        file.read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

/// Locates `<prefix>-<kind>-idxN-ubyte[.gz]` under `dir`.
fn locate(dir: &Path, split: MnistSplit, kind: &str, ndim: u8) -> Result<PathBuf, DataError> {
    let stem = format!("{}-{kind}-idx{ndim}-ubyte", split.prefix());
    let plain = dir.join(&stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DataError::MissingFile(plain))
}

pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<RawDigits, DataError> {
    let image_path = locate(dir, split, "images", 3)?;
    let label_path = locate(dir, split, "labels", 1)?;
    let images = match parse_idx(&read_maybe_gz(&image_path)?)? {
        IdxData::Images(t) => t,
        IdxData::Labels(_) => {
            return Err(DataError::BadMagic {
                found: LABELS_MAGIC,
                offset: 0,
            })
        }
    };
    let labels = match parse_idx(&read_maybe_gz(&label_path)?)? {
        IdxData::Labels(l) => l,
        IdxData::Images(_) => {
            return Err(DataError::BadMagic {
                found: IMAGES_MAGIC,
                offset: 0,
            })
        }
    };
    RawDigits::new(images, labels)
}
