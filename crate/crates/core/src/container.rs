//! Binary container shared by datasets (`SBK1`) and checkpoints (`SBM1`).
//!
//! ```text
//! magic[4] | header_len: u64 | header (UTF-8 JSON) | payload_len: u64 | payload | crc32(payload): u32
//! ```
//!
//! All integers are little-endian. The last magic byte is the format version.

use std::path::Path;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"SBK1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SBM1";

pub fn encode(magic: [u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 + header.len() + 8 + payload.len() + 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| {
            Error::Truncated(format!(
                "{what} needs {n} bytes at offset {at}, file has {}",
                bytes.len()
            ))
        })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u64(bytes: &[u8], at: &mut usize, what: &str) -> Result<u64> {
    let s = take(bytes, at, 8, what)?;
    Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
}

/// Splits a container into `(header, payload)`, checking magic, length and CRC.
pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let mut at = 0;
    let found: [u8; 4] = take(bytes, &mut at, 4, "magic")?.try_into().expect("4 bytes");
    if found != magic {
        if found[..3] == magic[..3] {
            return Err(Error::VersionMismatch {
                expected: String::from_utf8_lossy(&magic).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        return Err(Error::BadMagic { found });
    }
    let hlen = read_u64(bytes, &mut at, "header length")? as usize;
    let header = take(bytes, &mut at, hlen, "header")?;
    let plen = read_u64(bytes, &mut at, "payload length")? as usize;
    let payload = take(bytes, &mut at, plen, "payload")?;
    let crc = take(bytes, &mut at, 4, "checksum")?;
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if at != bytes.len() {
        return Err(Error::Header(format!(
            "{} trailing bytes after checksum",
            bytes.len() - at
        )));
    }
    Ok((header, payload))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_failure_modes() {
        let bytes = encode(DATASET_MAGIC, b"{}", &[1, 2, 3, 4, 5]);
        let (h, p) = decode(DATASET_MAGIC, &bytes).unwrap();
        assert_eq!((h, p), (&b"{}"[..], &[1u8, 2, 3, 4, 5][..]));

        let mut bad = bytes.clone();
        bad[4 + 8 + 2 + 8 + 1] ^= 0xff;
        assert!(matches!(decode(DATASET_MAGIC, &bad), Err(Error::Checksum { .. })));

        assert!(matches!(
            decode(DATASET_MAGIC, &bytes[..bytes.len() - 6]),
            Err(Error::Truncated(_))
        ));

        let mut v2 = bytes.clone();
        v2[3] = b'2';
        assert!(matches!(decode(DATASET_MAGIC, &v2), Err(Error::VersionMismatch { .. })));
        assert!(matches!(decode(CHECKPOINT_MAGIC, &bytes), Err(Error::BadMagic { .. })));
    }
}
