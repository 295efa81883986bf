//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"DRCN"`, `u32` version, `u32` metadata length, JSON metadata,
//! `u32` tensor count, then per tensor `u32` name length, name bytes,
//! `u32` rank, `u32` dims, `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DrcnModel;
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DRCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    spec: NetworkSpec,
    p_keep: f64,
    has_decoder: bool,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &DrcnModel) -> Vec<u8> {
    let meta = Metadata {
        spec: model.spec().clone(),
        p_keep: model.p_keep(),
        has_decoder: model.has_decoder(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serialises");
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut out, meta.len());
    out.extend_from_slice(&meta);
    push_u32(&mut out, params.len());
    for (_, name, t) in params {
        push_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.rank());
        for &d in t.shape() {
            push_u32(&mut out, d);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Length(format!("checkpoint truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<DrcnModel> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("checkpoint: expected magic \"DRCN\", found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let mut model = DrcnModel::build(meta.spec, meta.p_keep, meta.has_decoder, 0)?;
    let count = r.u32("tensor count")?;
    let mut params = model.named_params_mut();
    if count != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture declares {}",
            params.len()
        )));
    }
    for (_, name, slot) in params.iter_mut() {
        let len = r.u32("tensor name length")?;
        let found = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format("checkpoint: tensor name is not utf-8".into()))?;
        if found != name {
            return Err(Error::Format(format!("checkpoint: expected tensor `{name}`, found `{found}`")));
        }
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Format(format!(
                "checkpoint: tensor `{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let raw = r.take(slot.len() * 8, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        **slot = Tensor::new(shape, data)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Length(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.at
        )));
    }
    drop(params);
    Ok(model)
}

pub fn save(model: &DrcnModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<DrcnModel> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(decoder: bool) -> DrcnModel {
        DrcnModel::build(NetworkSpec::with_channels([1, 28, 28], 3, [2, 3, 4], 300), 0.5, decoder, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for decoder in [true, false] {
            let m = model(decoder);
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn header_checked() {
        let mut b = encode(&model(false));
        assert_eq!(&b[..4], b"DRCN");
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_detected() {
        let b = encode(&model(false));
        assert!(matches!(decode(&b[..b.len() - 3]), Err(Error::Length(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(true);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }
}
