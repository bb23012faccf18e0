//! Binary checkpoints.
//!
//! Layout (little-endian): magic `DTCCK\0`, version `u16`, epoch `u64`,
//! validation accuracy `f64`, config hash (`u16` length + UTF-8), member count
//! `u32`, critic flag `u8`, critic normalize flag `u8`, critic block count
//! `u32`, then every tensor as rank `u8`, dims `u64 × rank`, data `f64 × len`.
//! Member tensors come first, in [`Params`] order, then the critic's.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Activation, Critic, Dense, LinearClassifier, Member, Mlp, ModelCollection, Params, RepresentationModel, CRITIC_SLOPE};
use crate::diffengine::Tensor;

const MAGIC: &[u8; 6] = b"DTCCK\0";
pub const CHECKPOINT_VERSION: u16 = 1;
const MEMBER_TENSORS: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("checkpoint version {0} is not supported")]
    Version(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub collection: ModelCollection,
    pub critic: Option<Critic>,
    pub config_hash: String,
    pub epoch: usize,
    pub val_accuracy: f64,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.epoch as u64).to_le_bytes());
    out.extend_from_slice(&ck.val_accuracy.to_le_bytes());
    out.extend_from_slice(&(ck.config_hash.len() as u16).to_le_bytes());
    out.extend_from_slice(ck.config_hash.as_bytes());
    out.extend_from_slice(&(ck.collection.n() as u32).to_le_bytes());
    out.push(u8::from(ck.critic.is_some()));
    out.push(u8::from(ck.critic.as_ref().is_some_and(|c| c.normalize)));
    out.extend_from_slice(&(ck.critic.as_ref().map_or(0, |c| c.blocks) as u32).to_le_bytes());
    let mut tensors = ck.collection.tensors();
    if let Some(c) = &ck.critic {
        tensors.extend(c.tensors());
    }
    for t in tensors {
        put_tensor(&mut out, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.corrupt(format!("need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > 2 {
            return Err(self.corrupt(format!("tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| self.corrupt("tensor size overflows"))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| self.corrupt("tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| self.corrupt(e.to_string()))
    }
}

fn dense_from(w: Tensor, b: Tensor) -> Result<Dense, String> {
    match (w.dims2(), b.shape()) {
        (Some((_, out)), [bl]) if out == *bl => Ok(Dense { weight: w, bias: b }),
        _ => Err(format!("layer shapes {:?} / {:?}", w.shape(), b.shape())),
    }
}

fn mlp_from(tensors: Vec<Tensor>, activation: Activation) -> Result<Mlp, String> {
    let mut it = tensors.into_iter();
    let mut layers = Vec::new();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        let d = dense_from(w, b)?;
        if let Some(prev) = layers.last().map(Dense::fan_out) {
            if prev != d.fan_in() {
                return Err(format!("layer {} input {} after output {prev}", layers.len(), d.fan_in()));
            }
        }
        layers.push(d);
    }
    Ok(Mlp { layers, activation })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(CheckpointError::Corrupt {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let epoch = r.u64()? as usize;
    let val_accuracy = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let hash_len = r.u16()? as usize;
    let config_hash = String::from_utf8(r.take(hash_len)?.to_vec()).map_err(|_| r.corrupt("config hash is not UTF-8"))?;
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(r.corrupt("empty collection"));
    }
    let has_critic = r.u8()? == 1;
    let normalize = r.u8()? == 1;
    let blocks = r.u32()? as usize;

    let mut members = Vec::with_capacity(n);
    for _ in 0..n {
        let ts = (0..MEMBER_TENSORS).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
        let mut ts = ts.into_iter();
        let rep: Vec<Tensor> = ts.by_ref().take(6).collect();
        let (w, b) = (ts.next().expect("8 tensors"), ts.next().expect("8 tensors"));
        let mlp = mlp_from(rep, Activation::Relu).map_err(|e| r.corrupt(e))?;
        let layer = dense_from(w, b).map_err(|e| r.corrupt(e))?;
        if mlp.output_dim() != layer.fan_in() {
            return Err(r.corrupt("classifier does not match representation width"));
        }
        members.push(Member {
            rep: RepresentationModel { mlp },
            clf: LinearClassifier { layer },
        });
    }
    let critic = if has_critic {
        let mut ts = Vec::new();
        while r.pos < bytes.len() {
            ts.push(r.tensor()?);
        }
        if ts.is_empty() || ts.len() % 2 != 0 {
            return Err(r.corrupt("critic tensors come in weight/bias pairs"));
        }
        let mlp = mlp_from(ts, Activation::LeakyRelu(CRITIC_SLOPE)).map_err(|e| r.corrupt(e))?;
        if blocks == 0 || mlp.input_dim() % blocks != 0 {
            return Err(r.corrupt("critic input width is not a multiple of the block count"));
        }
        Some(Critic {
            block_dim: mlp.input_dim() / blocks,
            mlp,
            blocks,
            normalize,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    let collection = ModelCollection { members };
    let dim = collection.input_dim();
    if collection.members.iter().any(|m| m.rep.input_dim() != dim) {
        return Err(r.corrupt("members disagree on input dimension"));
    }
    Ok(Checkpoint {
        collection,
        critic,
        config_hash,
        epoch,
        val_accuracy,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_checkpoint(&bytes)
}
