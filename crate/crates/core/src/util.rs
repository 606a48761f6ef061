//! Small shared helpers: content digests, seed derivation, and the binary
//! container format used by weight and model files.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

/// FNV-1a 64-bit hash, used for cheap content/provenance digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digest rendered as a fixed-width hex string for embedding in headers.
pub fn digest_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Derives a child seed from a master seed and a purpose label so that
/// independent pipeline stages never share an RNG stream.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    fnv1a64(&buf)
}

/// Errors from the shared container codec.
#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: [u8; 8] },
    #[error("header is not valid UTF-8 JSON: {0}")]
    BadHeader(String),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
}

/// Layout shared by the weight and model files:
/// 8-byte magic, u32-LE header length, UTF-8 JSON header, raw payload,
/// CRC32 trailer over everything before the trailer.
pub fn write_container<W: Write>(
    mut w: W,
    magic: &[u8; 8],
    header_json: &str,
    payload: &[u8],
) -> Result<(), ContainerError> {
    let mut hasher = crc32fast::Hasher::new();
    let mut put = |w: &mut W, bytes: &[u8]| -> io::Result<()> {
        hasher.update(bytes);
        w.write_all(bytes)
    };
    put(&mut w, magic)?;
    let mut len = [0u8; 4];
    (&mut len[..]).write_u32::<LittleEndian>(header_json.len() as u32)?;
    put(&mut w, &len)?;
    put(&mut w, header_json.as_bytes())?;
    put(&mut w, payload)?;
    let crc = hasher.finalize();
    w.write_u32::<LittleEndian>(crc)?;
    Ok(())
}

/// Reads a container written by [`write_container`], returning the JSON
/// header and the raw payload after verifying magic and checksum.
pub fn read_container<R: Read>(
    mut r: R,
    magic: &[u8; 8],
) -> Result<(String, Vec<u8>), ContainerError> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    // magic + header length + trailer is the minimum possible file
    if all.len() < 8 + 4 + 4 {
        return Err(ContainerError::Truncated);
    }
    let (body, trailer) = all.split_at(all.len() - 4);
    let stored = (&trailer[..]).read_u32::<LittleEndian>()?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        // distinguish truncation of the payload from bit corruption below
        if &body[..8] != magic {
            return Err(ContainerError::BadMagic { expected: *magic });
        }
        return Err(ContainerError::ChecksumMismatch { stored, computed });
    }
    if &body[..8] != magic {
        return Err(ContainerError::BadMagic { expected: *magic });
    }
    let header_len = (&body[8..12]).read_u32::<LittleEndian>()? as usize;
    if body.len() < 12 + header_len {
        return Err(ContainerError::Truncated);
    }
    let header = std::str::from_utf8(&body[12..12 + header_len])
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?
        .to_string();
    let payload = body[12 + header_len..].to_vec();
    Ok((header, payload))
}

/// Serializes a slice of f32 as little-endian bytes.
pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads little-endian f32 values; errors if the byte count is not 4-aligned.
pub fn f32s_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>, ContainerError> {
    if bytes.len() % 4 != 0 {
        return Err(ContainerError::Truncated);
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serializes a slice of f64 as little-endian bytes.
pub fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads little-endian f64 values; errors if the byte count is not 8-aligned.
pub fn f64s_from_le_bytes(bytes: &[u8]) -> Result<Vec<f64>, ContainerError> {
    if bytes.len() % 8 != 0 {
        return Err(ContainerError::Truncated);
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}
