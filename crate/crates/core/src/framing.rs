//! Shared container layout of every binary file this crate writes:
//!
//! ```text
//! magic (8 bytes) | header length (u64, little-endian) | JSON header | payload
//! ```
//!
//! Payload values are always little-endian regardless of host order.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("file truncated at byte {offset}: {what}")]
    Truncated { offset: usize, what: String },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub const MAGIC_LEN: usize = 8;

pub fn write_frame(magic: &[u8; MAGIC_LEN], header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("JSON values always serialize");
    let mut out = Vec::with_capacity(MAGIC_LEN + 8 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

/// Split a framed buffer into its parsed header and raw payload.
pub fn read_frame<'a>(magic: &[u8; MAGIC_LEN], bytes: &'a [u8]) -> Result<(serde_json::Value, &'a [u8]), FrameError> {
    if bytes.len() < MAGIC_LEN || &bytes[..MAGIC_LEN] != magic {
        let found = &bytes[..bytes.len().min(MAGIC_LEN)];
        return Err(FrameError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let len_end = MAGIC_LEN + 8;
    if bytes.len() < len_end {
        return Err(FrameError::Truncated {
            offset: bytes.len(),
            what: "header length".into(),
        });
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC_LEN..len_end]);
    let header_len = u64::from_le_bytes(len) as usize;
    let header_end = len_end
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or(FrameError::Truncated {
            offset: bytes.len(),
            what: format!("JSON header of {header_len} bytes"),
        })?;
    let header = serde_json::from_slice(&bytes[len_end..header_end])?;
    Ok((header, &bytes[header_end..]))
}

/// Byte offset of the payload inside a framed buffer, for error reporting.
pub fn payload_start(bytes: &[u8]) -> usize {
    if bytes.len() < MAGIC_LEN + 8 {
        return bytes.len();
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC_LEN..MAGIC_LEN + 8]);
    MAGIC_LEN + 8 + u64::from_le_bytes(len) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let header = serde_json::json!({"a": 1, "b": [1, 2]});
        let bytes = write_frame(b"TESTMAGC", &header, &[1, 2, 3]);
        let (h, p) = read_frame(b"TESTMAGC", &bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(p, &[1, 2, 3]);
        assert_eq!(payload_start(&bytes), bytes.len() - 3);
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        let bytes = write_frame(b"TESTMAGC", &serde_json::json!({}), &[]);
        assert!(matches!(read_frame(b"OTHERMAG", &bytes), Err(FrameError::BadMagic { .. })));
        assert!(matches!(
            read_frame(b"TESTMAGC", &bytes[..12]),
            Err(FrameError::Truncated { .. })
        ));
    }
}
