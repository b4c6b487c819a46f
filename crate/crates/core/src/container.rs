//! Binary tensor container shared by LM checkpoints, CLT checkpoints and
//! activation-store shards.
//!
//! Layout:
//!
//! ```text
//! magic "CLTTRACE" | byte-order mark u32 | header length u64 | header JSON
//! | payload (little-endian f32, row-major) | checksum u64
//! ```
//!
//! All integers are little-endian. The checksum is the first eight bytes of
//! the SHA-256 of the payload, read as a little-endian `u64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 8] = b"CLTTRACE";
pub const FORMAT_VERSION: u32 = 1;
const BYTE_ORDER_MARK: u32 = 0x0A0B_0C0D;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorIndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub kind: String,
    pub byte_order: String,
    /// Digest of the configuration that produced this artifact.
    pub config_digest: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorIndexEntry>,
}

pub type Entries = Vec<(String, Vec<usize>, Vec<f32>)>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn json_digest<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    sha256_hex(&bytes)
}

pub fn encode(kind: &str, config: &serde_json::Value, entries: &Entries) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut index = Vec::with_capacity(entries.len());
    for (name, shape, data) in entries {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        index.push(TensorIndexEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = ContainerHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        byte_order: "little".into(),
        config_digest: json_digest(config),
        config: config.clone(),
        tensors: index,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BYTE_ORDER_MARK.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum64(&payload).to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ContainerHeader, Entries)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        bail!(Format, "not a tensor container (bad magic)");
    }
    let bom = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if bom != BYTE_ORDER_MARK {
        if bom == BYTE_ORDER_MARK.swap_bytes() {
            bail!(Format, "container was written with foreign (big-endian) byte order");
        }
        bail!(Format, "corrupt byte-order mark {bom:#x}");
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated container header".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[20..header_end])?;
    if header.format_version != FORMAT_VERSION {
        bail!(
            Format,
            "unsupported container version {} (expected {FORMAT_VERSION})",
            header.format_version
        );
    }
    if header.byte_order != "little" {
        bail!(Format, "unsupported byte order `{}`", header.byte_order);
    }
    let payload_len: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if bytes.len() != header_end + payload_len + 8 {
        bail!(
            Format,
            "container size mismatch: expected {} bytes, found {} (truncated?)",
            header_end + payload_len + 8,
            bytes.len()
        );
    }
    let payload = &bytes[header_end..header_end + payload_len];
    let stored = u64::from_le_bytes(bytes[header_end + payload_len..].try_into().unwrap());
    if stored != checksum64(payload) {
        bail!(Format, "payload checksum mismatch");
    }
    let mut entries = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.dtype != "f32" {
            bail!(Format, "unsupported dtype `{}` for `{}`", t.dtype, t.name);
        }
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            bail!(Format, "tensor `{}` overruns payload", t.name);
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((t.name.clone(), t.shape.clone(), data));
    }
    Ok((header, entries))
}

pub fn write(path: &Path, kind: &str, config: &serde_json::Value, entries: &Entries) -> Result<()> {
    let bytes = encode(kind, config, entries);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write-then-rename so readers never observe a partial file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, expected_kind: &str) -> Result<(ContainerHeader, Entries)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, entries) = decode(&bytes)?;
    if header.kind != expected_kind {
        bail!(
            Format,
            "{}: expected a `{expected_kind}` container, found `{}`",
            path.display(),
            header.kind
        );
    }
    Ok((header, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Entries {
        vec![
            ("a".into(), vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]),
            ("b".into(), vec![1], vec![f32::MAX]),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode("test", &serde_json::json!({"x": 1}), &sample());
        let (h, e) = decode(&bytes).unwrap();
        assert_eq!(h.kind, "test");
        assert_eq!(e, sample());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode("test", &serde_json::json!({}), &sample());
        for cut in [5, 19, 40, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode("test", &serde_json::json!({}), &sample());
        let n = bytes.len();
        bytes[n - 12] ^= 0x10;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn foreign_endianness_rejected_by_header() {
        let mut bytes = encode("test", &serde_json::json!({}), &sample());
        bytes[8..12].copy_from_slice(&BYTE_ORDER_MARK.to_be_bytes());
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("big-endian"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode("test", &serde_json::json!({}), &sample());
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'9';
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
