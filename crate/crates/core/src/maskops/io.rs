//! Mask files.
//!
//! PGM (`P5`, maxval 255, 0/255) for inspection, and a raw bitset for the
//! pipeline: magic `b"CAMK"`, height u32 LE, width u32 LE, then the cells
//! row-major packed eight per byte, least significant bit first.

use std::fs;
use std::path::Path;

use super::types::Mask;
use crate::error::{Error, Result};

const MASK_MAGIC: [u8; 4] = *b"CAMK";

pub fn encode_mask_bits(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + mask.bits.len().div_ceil(8));
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&(mask.height as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width as u32).to_le_bytes());
    for chunk in mask.bits.chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
        out.push(byte);
    }
    out
}

pub fn decode_mask_bits(bytes: &[u8]) -> Result<Mask> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MASK_MAGIC {
        return Err(Error::BadMagic {
            expected: MASK_MAGIC,
            found: magic,
        });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = h * w;
    let expected = 12 + n.div_ceil(8);
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            Error::Truncated {
                expected,
                found: bytes.len(),
            }
        } else {
            Error::TrailingBytes {
                expected,
                found: bytes.len(),
            }
        });
    }
    let bits = (0..n).map(|i| bytes[12 + i / 8] >> (i % 8) & 1 == 1).collect();
    Mask::from_bits(h, w, bits)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask_bits(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_bits(&bytes)
}

pub fn write_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary `P5` PGM; any nonzero pixel is foreground.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidArgument(format!("{}: {msg}", path.display()));
    // Header: four whitespace-separated tokens, a single whitespace byte, then data.
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PGM maxval"));
    }
    let data = bytes.get(i + 1..).unwrap_or_default();
    if data.len() != w * h {
        return Err(Error::Truncated {
            expected: w * h,
            found: data.len(),
        });
    }
    Mask::from_bits(h, w, data.iter().map(|&v| v != 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_rows(&[&[1, 0, 0], &[0, 1, 1]]);
        let p = dir.path().join("m.pgm");
        write_pgm(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 255, 255]);
        assert_eq!(read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn bitset_rejects_wrong_magic_and_length() {
        let m = Mask::from_rows(&[&[1, 0, 1]]);
        let mut bytes = encode_mask_bits(&m);
        assert_eq!(bytes.len(), 13);
        bytes.push(0);
        assert!(matches!(decode_mask_bits(&bytes), Err(Error::TrailingBytes { .. })));
        bytes.truncate(12);
        assert!(matches!(decode_mask_bits(&bytes), Err(Error::Truncated { .. })));
        bytes[0] = b'Z';
        assert!(matches!(decode_mask_bits(&bytes), Err(Error::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn bitset_roundtrip(h in 0usize..7, w in 0usize..9, seed in any::<u64>()) {
            let bits = (0..h * w).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let m = Mask::from_bits(h, w, bits).unwrap();
            prop_assert_eq!(decode_mask_bits(&encode_mask_bits(&m)).unwrap(), m);
        }
    }
}
