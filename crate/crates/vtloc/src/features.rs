//! Binary per-video feature files.
//!
//! Layout (little-endian):
//!   magic  b"ULFT"
//!   version u32 (currently 1)
//!   n      u32  rows (frames), at least 1
//!   k      u32  columns (feature width)
//!   data   n*k  f32, row-major
//!   mask   n    bytes, 0 = padded, 1 = valid

use std::fs;
use std::path::Path;

use vtloc_core::encoders::FrameTokens;
use vtloc_core::mat::Mat;

use crate::FormatError;

pub const MAGIC: &[u8; 4] = b"ULFT";
pub const VERSION: u32 = 1;

pub fn write_features(path: &Path, tokens: &FrameTokens) -> Result<(), FormatError> {
    let n = tokens.tokens.rows();
    let k = tokens.tokens.cols();
    let mut buf = Vec::with_capacity(16 + 4 * n * k + n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    for v in tokens.tokens.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(tokens.mask.iter().map(|&m| u8::from(m)));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FrameTokens, FormatError> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    parse_features(&bytes, &display)
}

pub fn parse_features(bytes: &[u8], path: &str) -> Result<FrameTokens, FormatError> {
    let need = |offset: usize, len: usize| -> Result<(), FormatError> {
        if bytes.len() < offset + len {
            Err(FormatError::Truncated {
                path: path.to_string(),
                offset: bytes.len(),
                needed: offset + len - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 16)?;
    if &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            path: path.to_string(),
            expected: "ULFT",
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::BadVersion {
            path: path.to_string(),
            version,
            offset: 4,
        });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(FormatError::InvalidField {
            path: path.to_string(),
            field: "n",
            offset: 8,
            message: "frame count must be at least 1".to_string(),
        });
    }
    if k == 0 {
        return Err(FormatError::InvalidField {
            path: path.to_string(),
            field: "k",
            offset: 12,
            message: "feature width must be at least 1".to_string(),
        });
    }
    let data_len = 4 * n * k;
    need(16, data_len + n)?;
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n * k {
        let at = 16 + 4 * i;
        data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
    }
    let mask_off = 16 + data_len;
    let mut mask = Vec::with_capacity(n);
    for (i, &b) in bytes[mask_off..mask_off + n].iter().enumerate() {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            other => {
                return Err(FormatError::InvalidField {
                    path: path.to_string(),
                    field: "mask",
                    offset: mask_off + i,
                    message: format!("mask byte must be 0 or 1, got {other}"),
                })
            }
        }
    }
    let total = mask_off + n;
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes {
            path: path.to_string(),
            extra: bytes.len() - total,
        });
    }
    FrameTokens::new(Mat::from_vec(n, k, data), mask)
        .map_err(|e| FormatError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vtloc_core::rng::Rng;

    fn sample_tokens(n: usize, k: usize, seed: u64) -> FrameTokens {
        let mut rng = Rng::new(seed);
        let mut mask = vec![true; n];
        if n > 2 {
            mask[n - 1] = false;
        }
        FrameTokens::new(Mat::randn(n, k, 1.0, &mut rng), mask).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("vtloc-feat-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("clip.ulft");
        let tokens = sample_tokens(128, 512, 3);
        write_features(&path, &tokens).unwrap();
        let loaded = read_features(&path).unwrap();
        assert_eq!(loaded.tokens, tokens.tokens);
        assert_eq!(loaded.mask, tokens.mask);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let tokens = sample_tokens(4, 3, 5);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        for v in tokens.tokens.as_slice().iter().take(5) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match parse_features(&buf, "mem") {
            Err(FormatError::Truncated { offset, .. }) => assert_eq!(offset, buf.len()),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            parse_features(&buf, "mem"),
            Err(FormatError::InvalidField { field: "n", .. })
        ));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            parse_features(&buf, "mem"),
            Err(FormatError::BadMagic { .. })
        ));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&9u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            parse_features(&buf, "mem"),
            Err(FormatError::BadVersion { version: 9, .. })
        ));
    }
}
