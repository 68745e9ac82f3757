//! The `.masks` container.
//!
//! Layout: the magic `PTMASK01`, a little-endian `u64` header length, a JSON
//! header, then for every tensor its ownership codes bit-packed LSB-first at
//! `bits_per_element` bits each. Each tensor payload carries a CRC32.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DomainEntry, DomainId, MaskRegistry, OwnerTensor, FIRST_DOMAIN};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PTMASK01";
pub const MASKS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    multi_domain: bool,
    bits_per_element: u32,
    domains: Vec<DomainHeader>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DomainHeader {
    name: String,
    ordinal: u16,
    ancestors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    byte_len: usize,
    crc32: u32,
}

fn bits_for(max_code: u16) -> u32 {
    (16 - max_code.leading_zeros()).max(1)
}

fn pack(codes: &[u16], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack(bytes: &[u8], n: usize, bits: u32) -> Vec<u16> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let mut c = 0u16;
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                c |= 1 << b;
            }
            pos += 1;
        }
        out.push(c);
    }
    out
}

pub fn encode_masks(registry: &MaskRegistry) -> Result<Vec<u8>> {
    let max_code = registry.domains.len() as u16 + FIRST_DOMAIN - 1;
    let bits = bits_for(max_code);
    let payloads: Vec<Vec<u8>> = registry.tensors.values().map(|t| pack(&t.codes, bits)).collect();
    let header = Header {
        format_version: MASKS_VERSION,
        multi_domain: registry.multi_domain,
        bits_per_element: bits,
        domains: registry
            .domains
            .iter()
            .map(|d| DomainHeader {
                name: d.id.name.clone(),
                ordinal: d.id.ordinal,
                ancestors: d
                    .ancestors
                    .iter()
                    .map(|&o| registry.domains[o as usize].id.name.clone())
                    .collect(),
            })
            .collect(),
        tensors: registry
            .tensors
            .iter()
            .zip(&payloads)
            .map(|((name, t), p)| TensorHeader {
                name: name.clone(),
                shape: t.shape.clone(),
                byte_len: p.len(),
                crc32: crc32fast::hash(p),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payloads.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &payloads {
        out.extend_from_slice(p);
    }
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<MaskRegistry> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("mask file preamble".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a mask file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Truncated("mask file header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.format_version != MASKS_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: MASKS_VERSION,
        });
    }
    if header.bits_per_element == 0 || header.bits_per_element > 16 {
        return Err(Error::Format(format!("bad bits_per_element {}", header.bits_per_element)));
    }

    let mut domains: Vec<DomainEntry> = Vec::with_capacity(header.domains.len());
    for (i, d) in header.domains.into_iter().enumerate() {
        if d.ordinal as usize != i {
            return Err(Error::Format(format!("domain `{}` out of order", d.name)));
        }
        let mut anc = Vec::with_capacity(d.ancestors.len());
        for a in &d.ancestors {
            let o = domains
                .iter()
                .find(|e| &e.id.name == a)
                .ok_or_else(|| Error::Format(format!("ancestor `{a}` of `{}` not declared earlier", d.name)))?;
            anc.push(o.id.ordinal);
        }
        domains.push(DomainEntry {
            id: DomainId {
                name: d.name,
                ordinal: d.ordinal,
            },
            ancestors: anc,
        });
    }
    let max_code = domains.len() as u16 + FIRST_DOMAIN - 1;

    let mut payload = &body[hlen..];
    let mut tensors = IndexMap::new();
    for th in header.tensors {
        let n: usize = th.shape.iter().product();
        let expected = (n * header.bits_per_element as usize).div_ceil(8);
        if th.byte_len != expected {
            return Err(Error::Format(format!("`{}` declares {} bytes, needs {expected}", th.name, th.byte_len)));
        }
        if payload.len() < th.byte_len {
            return Err(Error::Truncated(format!("payload of `{}`", th.name)));
        }
        let chunk = &payload[..th.byte_len];
        payload = &payload[th.byte_len..];
        if crc32fast::hash(chunk) != th.crc32 {
            return Err(Error::Checksum { tensor: th.name });
        }
        let codes = unpack(chunk, n, header.bits_per_element);
        if let Some(i) = codes.iter().position(|&c| c > max_code) {
            return Err(Error::Format(format!("`{}` index {i} has unknown owner code", th.name)));
        }
        if tensors
            .insert(th.name.clone(), OwnerTensor { shape: th.shape, codes })
            .is_some()
        {
            return Err(Error::Format(format!("duplicate tensor `{}`", th.name)));
        }
    }
    if !payload.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", payload.len())));
    }
    Ok(MaskRegistry {
        multi_domain: header.multi_domain,
        tensors,
        domains,
    })
}

pub fn save_masks(registry: &MaskRegistry, path: &Path) -> Result<()> {
    let bytes = encode_masks(registry)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_masks(path: &Path) -> Result<MaskRegistry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_masks(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_round_trip() {
        for bits in 1..=5 {
            let codes: Vec<u16> = (0..37).map(|i| (i * 7 % (1 << bits)) as u16).collect();
            assert_eq!(unpack(&pack(&codes, bits), codes.len(), bits), codes);
        }
    }

    #[test]
    fn bit_width() {
        assert_eq!(bits_for(1), 1);
        assert_eq!(bits_for(2), 2);
        assert_eq!(bits_for(3), 2);
        assert_eq!(bits_for(4), 3);
    }
}
