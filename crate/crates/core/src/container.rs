//! Versioned binary container used for dataset caches and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 8     | magic                           |
//! | 4     | format version (u32)            |
//! | 8     | payload length (u64)            |
//! | n     | bincode payload                 |
//! | 32    | SHA-256 of the payload          |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a {expected} file")]
    BadMagic { expected: String },
    #[error("format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("payload encoding: {0}")]
    Encoding(#[from] bincode::Error),
}

pub fn encode<T: Serialize>(magic: &[u8; 8], version: u32, value: &T) -> Result<Vec<u8>, ContainerError> {
    let payload = bincode::serialize(value)?;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<T, ContainerError> {
    let label = String::from_utf8_lossy(magic).trim_end_matches('\0').to_owned();
    if bytes.len() < 20 {
        return Err(if bytes.len() >= 8 && &bytes[..8] != magic {
            ContainerError::BadMagic { expected: label }
        } else {
            ContainerError::Truncated
        });
    }
    if &bytes[..8] != magic {
        return Err(ContainerError::BadMagic { expected: label });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(ContainerError::Version { found, expected: version });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).ok_or(ContainerError::Truncated)?;
    if bytes.len() != end + 32 {
        return Err(ContainerError::Truncated);
    }
    let payload = &bytes[20..end];
    if Sha256::digest(payload).as_slice() != &bytes[end..] {
        return Err(ContainerError::Checksum);
    }
    Ok(bincode::deserialize(payload)?)
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<T: Serialize>(path: &Path, magic: &[u8; 8], version: u32, value: &T) -> Result<(), ContainerError> {
    write_atomic(path, &encode(magic, version, value)?)
}

pub fn load<T: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<T, ContainerError> {
    decode(magic, version, &fs::read(path)?)
}
