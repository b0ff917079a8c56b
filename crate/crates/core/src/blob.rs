//! Versioned, integrity-checked binary container for tensors plus JSON
//! metadata. Every checkpoint kind in the crate uses it.
//!
//! Layout: magic `RELITBLB`, `u32` format version, `u64` payload length,
//! a safetensors payload (JSON metadata stored under `"relit"`), then the
//! SHA-256 of the payload. Writes go to a sibling temp file that is renamed
//! into place, so an interrupted write leaves the previous file intact.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RELITBLB";
pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "relit";
const HEADER: usize = 8 + 4 + 8;

/// Serialises `tensors` and `meta`; `meta` must be a JSON object and gains
/// a `"kind"` field.
pub fn encode(kind: &str, tensors: &BTreeMap<String, Tensor>, mut meta: Value) -> Result<Vec<u8>> {
    meta.as_object_mut()
        .ok_or_else(|| Error::Validation("blob metadata must be a JSON object".into()))?
        .insert("kind".into(), Value::String(kind.into()));
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let payload = safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(info))?;
    let mut out = Vec::with_capacity(HEADER + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

/// Parses and verifies a blob of the given kind. `origin` only labels errors.
pub fn decode(bytes: &[u8], kind: &str, origin: &Path) -> Result<(BTreeMap<String, Tensor>, Value)> {
    let bad = |reason: String| Error::Integrity {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a relit blob".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != HEADER + len + 32 {
        return Err(bad(format!(
            "length mismatch: header says {len} payload bytes, file has {}",
            bytes.len().saturating_sub(HEADER + 32)
        )));
    }
    let payload = &bytes[HEADER..HEADER + len];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER + len..] {
        return Err(bad("checksum mismatch".into()));
    }
    let (_, header) = SafeTensors::read_metadata(payload).map_err(|e| bad(e.to_string()))?;
    let meta_str = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing metadata".into()))?;
    let meta: Value = serde_json::from_str(meta_str)?;
    let found = meta.get("kind").and_then(Value::as_str).unwrap_or("");
    if found != kind {
        return Err(bad(format!("expected a '{kind}' blob, found '{found}'")));
    }
    let tensors = candle_core::safetensors::load_buffer(payload, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok((tensors, meta))
}

pub fn write(path: &Path, kind: &str, tensors: &BTreeMap<String, Tensor>, meta: Value) -> Result<()> {
    let bytes = encode(kind, tensors, meta)?;
    write_atomic(path, &bytes)
}

pub fn read(path: &Path, kind: &str) -> Result<(BTreeMap<String, Tensor>, Value)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, kind, path)
}

/// Write-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
