//! Binary checkpoint container.
//!
//! Layout: ASCII magic "EMDIFF", a 1-byte format version, a length-prefixed
//! structured-text block (TOML), then named little-endian f32 arrays, each
//! preceded by a u16 name length, the name bytes, and a u32 element count.
//! The file ends with a 64-bit FNV-1a checksum of every preceding byte,
//! verified before anything else is parsed, so any corrupted byte surfaces
//! as a checksum error rather than a misload.

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"EMDIFF";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config_text: String,
    pub arrays: Vec<(String, Vec<f32>)>,
}

pub fn encode(config_text: &str, arrays: &[(String, &[f32])]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    let cfg = config_text.as_bytes();
    if cfg.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument("config block too large".into()));
    }
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    for (name, data) in arrays {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("array name '{name}' too long")));
        }
        if data.len() > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("array '{name}' too large")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData> {
    const HEADER: usize = 6 + 1 + 4;
    if bytes.len() < HEADER + 8 {
        return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    if &payload[..6] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = payload[6];
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let cfg_len = u32::from_le_bytes(payload[7..11].try_into().unwrap()) as usize;
    let mut pos = HEADER;
    if pos + cfg_len > payload.len() {
        return Err(Error::CorruptCheckpoint("config block runs past end of file".into()));
    }
    let config_text = String::from_utf8(payload[pos..pos + cfg_len].to_vec())
        .map_err(|_| Error::CorruptCheckpoint("config block is not UTF-8".into()))?;
    pos += cfg_len;

    let mut arrays = Vec::new();
    while pos < payload.len() {
        if pos + 2 > payload.len() {
            return Err(Error::CorruptCheckpoint("truncated array name length".into()));
        }
        let name_len = u16::from_le_bytes(payload[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + name_len + 4 > payload.len() {
            return Err(Error::CorruptCheckpoint("truncated array header".into()));
        }
        let name = String::from_utf8(payload[pos..pos + name_len].to_vec())
            .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?;
        pos += name_len;
        let count = u32::from_le_bytes(payload[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + count * 4 > payload.len() {
            return Err(Error::CorruptCheckpoint(format!("array '{name}' truncated")));
        }
        let data: Vec<f32> = payload[pos..pos + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += count * 4;
        arrays.push((name, data));
    }
    Ok(CheckpointData { config_text, arrays })
}

pub fn write(path: &Path, config_text: &str, arrays: &[(String, &[f32])]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(config_text, arrays)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<CheckpointData> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = vec![1.0f32, -2.5, 3.25];
        let b = vec![0.125f32];
        encode(
            "iteration = 3\n",
            &[("w0".to_string(), a.as_slice()), ("b0".to_string(), b.as_slice())],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let bytes = sample();
        let data = decode(&bytes).unwrap();
        assert_eq!(data.config_text, "iteration = 3\n");
        assert_eq!(data.arrays.len(), 2);
        assert_eq!(data.arrays[0], ("w0".to_string(), vec![1.0, -2.5, 3.25]));
        assert_eq!(data.arrays[1], ("b0".to_string(), vec![0.125]));
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let bytes = sample();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            let err = decode(&bad).unwrap_err();
            assert!(
                matches!(err, Error::ChecksumMismatch { .. }),
                "byte {i}: unexpected error {err:?}"
            );
        }
    }

    #[test]
    fn future_version_is_an_explicit_error() {
        let mut bytes = sample();
        // bump the version byte and fix up the checksum so only the version
        // differs
        bytes[6] = FORMAT_VERSION + 1;
        let n = bytes.len();
        let sum = fnv1a64(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&sum.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found, .. } if found == FORMAT_VERSION + 1));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = sample();
        for cut in [0usize, 5, 12, bytes.len() - 9] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
