//! On-disk dataset cache.
//!
//! Layout (little-endian): magic `DTCDS\0`, format version `u16`, variant
//! `u8`, role `u8`, seed `u64`, rows `u64`, cols `u64`, `rows·cols` `f64`
//! inputs, `rows` label bytes, then five provenance bytes per row
//! (digit group, clean label, colour, colour2, common cause; `0xff` marks an
//! absent bit).

use std::fs;
use std::path::{Path, PathBuf};

use super::{ColoredDataset, DataError, GeneratorConfig, Provenance, Role, Variant};
use crate::diffengine::Tensor;

const MAGIC: &[u8; 6] = b"DTCDS\0";
pub const FORMAT_VERSION: u16 = 1;
const ABSENT: u8 = 0xff;

/// File name of a cached dataset, keyed by variant, role, seed and config hash.
pub fn cache_file_name(variant: Variant, role: Role, cfg: &GeneratorConfig) -> String {
    format!(
        "{variant}-{}-seed{}-{}.bin",
        format!("{role:?}").to_lowercase(),
        cfg.rng_seed,
        cfg.config_hash(variant)
    )
}

pub fn cache_path(dir: &Path, variant: Variant, role: Role, cfg: &GeneratorConfig) -> PathBuf {
    dir.join(cache_file_name(variant, role, cfg))
}

pub fn encode_dataset(ds: &ColoredDataset) -> Vec<u8> {
    let (rows, cols) = ds.inputs.dims2().expect("inputs are a matrix");
    let mut out = Vec::with_capacity(40 + rows * cols * 8 + rows * 6);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ds.variant.code());
    out.push(ds.role.code());
    out.extend_from_slice(&ds.rng_seed.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in ds.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.labels);
    for p in &ds.provenance {
        out.extend_from_slice(&[
            p.digit_group,
            p.clean_label,
            p.colour_bit,
            p.colour2_bit.unwrap_or(ABSENT),
            p.common_cause_bit.unwrap_or(ABSENT),
        ]);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            DataError::Truncated {
                offset: self.bytes.len(),
                needed: self.pos.saturating_add(n),
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ColoredDataset, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(DataError::BadCache("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(DataError::BadCache(format!("unsupported version {version}")));
    }
    let head = r.take(2)?;
    let variant = Variant::from_code(head[0]).ok_or_else(|| DataError::BadCache("variant".into()))?;
    let role = Role::from_code(head[1]).ok_or_else(|| DataError::BadCache("role".into()))?;
    let rng_seed = r.u64()?;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let data = r
        .take(rows.saturating_mul(cols).saturating_mul(8))?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = r.take(rows)?.to_vec();
    let opt = |b: u8| (b != ABSENT).then_some(b);
    let provenance = r
        .take(rows * 5)?
        .chunks_exact(5)
        .map(|c| Provenance {
            digit_group: c[0],
            clean_label: c[1],
            colour_bit: c[2],
            colour2_bit: opt(c[3]),
            common_cause_bit: opt(c[4]),
        })
        .collect();
    if r.pos != bytes.len() {
        return Err(DataError::BadCache(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ColoredDataset {
        variant,
        role,
        rng_seed,
        inputs: Tensor::matrix(rows, cols, data)?,
        labels,
        provenance,
    })
}

pub fn save_dataset(path: &Path, ds: &ColoredDataset) -> Result<(), DataError> {
    fs::write(path, encode_dataset(ds)).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_dataset(path: &Path) -> Result<ColoredDataset, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_rcmnist_train, make_tcmnist_train, RawDigits};

    fn tiny_raw() -> RawDigits {
        let data = (0..3 * 784).map(|i| (i % 7) as f64 / 7.0).collect();
        RawDigits::new(Tensor::new(vec![3, 28, 28], data).unwrap(), vec![1, 6, 9]).unwrap()
    }

    #[test]
    fn roundtrip_keeps_optional_bits() {
        let cfg = GeneratorConfig::default();
        for ds in [
            make_rcmnist_train(&tiny_raw(), &cfg).unwrap(),
            make_tcmnist_train(&tiny_raw(), &cfg).unwrap(),
        ] {
            assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
        }
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let ds = make_rcmnist_train(&tiny_raw(), &GeneratorConfig::default()).unwrap();
        let bytes = encode_dataset(&ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(DataError::BadCache(_))));
    }

    #[test]
    fn key_tracks_config() {
        let a = GeneratorConfig::default();
        let b = GeneratorConfig {
            colour2_flip_prob: 0.3,
            ..a.clone()
        };
        assert_ne!(
            cache_file_name(Variant::TcMnist, Role::Train, &a),
            cache_file_name(Variant::TcMnist, Role::Train, &b)
        );
        assert_eq!(
            cache_file_name(Variant::TcMnist, Role::Train, &a),
            cache_file_name(Variant::TcMnist, Role::Train, &a.clone())
        );
    }
}
