//! CTM token-map files.
//!
//! Layout (little-endian):
//! - magic `b"CAFT"`
//! - version u32 (= 1), n_layers u32, height u32, width u32, dim u32
//! - flags u32: bit0 positional grid present, bit1 positional class present
//! - per layer: grid `[row][col][dim]` f32, then class token `[dim]` f32
//! - if bit0: positional grid `[row][col][dim]` f32
//! - if bit1: positional class `[dim]` f32

use std::fs;
use std::path::Path;

use super::{validate_token_map, TokenMap};
use crate::error::{Error, Result};

pub const CTM_MAGIC: [u8; 4] = *b"CAFT";
pub const CTM_VERSION: u32 = 1;
pub const CTM_HEADER_LEN: usize = 28;

const FLAG_POS_GRID: u32 = 1;
const FLAG_POS_CLASS: u32 = 2;

/// Exact file length implied by a header.
pub fn ctm_file_len(
    n_layers: usize,
    height: usize,
    width: usize,
    dim: usize,
    pos_grid: bool,
    pos_class: bool,
) -> usize {
    let cell_vals = height * width * dim;
    let mut floats = n_layers * (cell_vals + dim);
    if pos_grid {
        floats += cell_vals;
    }
    if pos_class {
        floats += dim;
    }
    CTM_HEADER_LEN + 4 * floats
}

fn check(map: &TokenMap) -> Result<()> {
    let report = validate_token_map(map);
    if report.is_valid() {
        return Ok(());
    }
    if report.violations.iter().all(|v| v.0.starts_with("non-finite")) {
        Err(Error::NonFinite(report.to_string()))
    } else {
        Err(Error::InvalidMap(report.to_string()))
    }
}

pub fn encode_token_map(map: &TokenMap) -> Result<Vec<u8>> {
    check(map)?;
    let len = ctm_file_len(
        map.n_layers,
        map.height,
        map.width,
        map.dim,
        map.pos_grid.is_some(),
        map.pos_class.is_some(),
    );
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&CTM_MAGIC);
    let mut flags = 0;
    if map.pos_grid.is_some() {
        flags |= FLAG_POS_GRID;
    }
    if map.pos_class.is_some() {
        flags |= FLAG_POS_CLASS;
    }
    for v in [
        CTM_VERSION,
        dim_u32(map.n_layers)?,
        dim_u32(map.height)?,
        dim_u32(map.width)?,
        dim_u32(map.dim)?,
        flags,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let put = |out: &mut Vec<u8>, vals: &[f32]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for l in 0..map.n_layers {
        put(&mut out, map.layer(l));
        put(&mut out, map.class_token(l));
    }
    if let Some(p) = &map.pos_grid {
        put(&mut out, p);
    }
    if let Some(p) = &map.pos_class {
        put(&mut out, p);
    }
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidMap(format!("dimension {v} exceeds u32")))
}

pub fn decode_token_map(bytes: &[u8]) -> Result<TokenMap> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: CTM_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CTM_MAGIC {
        return Err(Error::BadMagic {
            expected: CTM_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < CTM_HEADER_LEN {
        return Err(Error::Truncated {
            expected: CTM_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != CTM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (n_layers, height, width, dim, flags) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5),
    );
    if flags & !(FLAG_POS_GRID | FLAG_POS_CLASS) != 0 {
        return Err(Error::InvalidMap(format!("reserved flag bits set: {flags:#x}")));
    }
    let has_pos = flags & FLAG_POS_GRID != 0;
    let has_pos_class = flags & FLAG_POS_CLASS != 0;
    if has_pos_class && !has_pos {
        return Err(Error::InvalidMap(
            "pos_class flag set without pos_grid flag".into(),
        ));
    }
    if n_layers == 0 || height == 0 || width == 0 || dim == 0 {
        return Err(Error::InvalidMap(format!(
            "zero dimension in header: layers={n_layers} h={height} w={width} d={dim}"
        )));
    }
    // u32 header fields cannot overflow u128.
    let cell_vals = height as u128 * width as u128 * dim as u128;
    let floats = n_layers as u128 * (cell_vals + dim as u128)
        + if has_pos { cell_vals } else { 0 }
        + if has_pos_class { dim as u128 } else { 0 };
    let expected = CTM_HEADER_LEN as u128 + 4 * floats;
    if expected > bytes.len() as u128 {
        return Err(Error::Truncated {
            expected: usize::try_from(expected).unwrap_or(usize::MAX),
            found: bytes.len(),
        });
    }
    let expected = expected as usize;
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }

    let mut floats = bytes[CTM_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
    let cell_vals = cell_vals as usize;
    let mut grid = Vec::with_capacity(n_layers * cell_vals);
    let mut class_tokens = Vec::with_capacity(n_layers * dim);
    for _ in 0..n_layers {
        grid.extend(take(cell_vals));
        class_tokens.extend(take(dim));
    }
    let pos_grid = has_pos.then(|| take(cell_vals));
    let pos_class = has_pos_class.then(|| take(dim));
    let map = TokenMap {
        n_layers,
        height,
        width,
        dim,
        grid,
        class_tokens,
        pos_grid,
        pos_class,
    };
    check(&map)?;
    Ok(map)
}

/// Writes `map` to `destination` in CTM format.
pub fn write_token_map(map: &TokenMap, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    let bytes = encode_token_map(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_token_map(source: impl AsRef<Path>) -> Result<TokenMap> {
    let path = source.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_token_map(&bytes)
}
