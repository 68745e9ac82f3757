//! Binary checkpoint container.
//!
//! Layout: the magic `PTCKPT01`, a little-endian `u64` header length, a JSON
//! header listing tensors in store order, then each tensor's values as raw
//! little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PTCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: DTYPE.to_string(),
        tensors: params
            .iter()
            .map(|(n, t)| TensorHeader {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.total_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decode a checkpoint. Tags are not stored here; see the model sidecar.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype `{}`", header.dtype)));
    }
    let mut payload = &body[hlen..];
    let mut store = ParamStore::new();
    for th in header.tensors {
        let n: usize = th.shape.iter().product();
        if payload.len() < n * 8 {
            return Err(Error::Truncated(format!("payload of `{}`", th.name)));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[n * 8..];
        store.insert(th.name, Tensor::new(th.shape, data)?, None)?;
    }
    if !payload.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", payload.len())));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.5, -0.0, f64::MIN_POSITIVE]), None)
            .unwrap();
        p.insert("b", Tensor::matrix(2, 1, vec![1e300, -3.25]).unwrap(), None)
            .unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        assert!(back.bit_eq(&p));
    }

    #[test]
    fn truncation_detected() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]), None).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }
}
