//! CAFM model files.
//!
//! Layout (little-endian): magic `b"CAFM"`, version u32, n_hidden_blocks
//! u32, first_kernel u32, dim u32, seed u64; then per block the conv
//! weight, conv bias, gamma, beta, running mean, running variance and eps,
//! followed by the head weight and head bias, all f32.

use std::fs;
use std::path::Path;

use super::{AtfConfig, AtfModel, ConvBlock};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"CAFM";
pub const MODEL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 8;

fn expected_len(cfg: &AtfConfig) -> usize {
    let d = cfg.dim;
    let block_floats = |k: usize| d * d * k * k + 5 * d + 1;
    let blocks: usize = (0..cfg.n_hidden_blocks)
        .map(|b| block_floats(if b == 0 { cfg.first_kernel } else { 1 }))
        .sum();
    HEADER_LEN + 4 * (blocks + 2 * d + 2)
}

pub fn encode_model(model: &AtfModel<f32>) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(expected_len(cfg));
    out.extend_from_slice(&MODEL_MAGIC);
    for v in [
        MODEL_VERSION,
        cfg.n_hidden_blocks as u32,
        cfg.first_kernel as u32,
        cfg.dim as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    let mut put = |vals: &[f32]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for b in &model.blocks {
        put(&b.weight);
        put(&b.bias);
        put(&b.gamma);
        put(&b.beta);
        put(&b.running_mean);
        put(&b.running_var);
        put(&[b.eps]);
    }
    put(&model.head_weight);
    put(&model.head_bias);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<AtfModel<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config = AtfConfig {
        n_hidden_blocks: word(1) as usize,
        first_kernel: word(2) as usize,
        dim: word(3) as usize,
        seed: u64::from_le_bytes(bytes[20..28].try_into().unwrap()),
    };
    config.validate()?;
    if config.n_hidden_blocks > 64 || config.dim > 1 << 16 {
        return Err(Error::InvalidArgument(format!(
            "implausible model header: {} blocks, dim {}",
            config.n_hidden_blocks, config.dim
        )));
    }
    let expected = expected_len(&config);
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
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
    let d = config.dim;
    let blocks = (0..config.n_hidden_blocks)
        .map(|b| {
            let k = if b == 0 { config.first_kernel } else { 1 };
            ConvBlock {
                kernel: k,
                weight: take(d * d * k * k),
                bias: take(d),
                gamma: take(d),
                beta: take(d),
                running_mean: take(d),
                running_var: take(d),
                eps: take(1)[0],
            }
        })
        .collect();
    let model = AtfModel {
        config,
        blocks,
        head_weight: take(2 * d),
        head_bias: take(2),
    };
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    Ok(model)
}

pub fn save_model(model: &AtfModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AtfModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atf::init_atf;

    fn model() -> AtfModel<f32> {
        let mut m: AtfModel<f32> = init_atf(&AtfConfig {
            n_hidden_blocks: 2,
            first_kernel: 3,
            dim: 4,
            seed: 77,
        })
        .unwrap();
        m.blocks[1].running_var[2] = 0.37;
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let bytes = encode_model(&m);
        assert_eq!(bytes.len(), expected_len(&m.config));
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn truncated_and_wrong_magic_rejected() {
        let bytes = encode_model(&model());
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_model(&bytes[..10]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"CAFT");
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic { .. })));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(matches!(decode_model(&v2), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cafm");
        save_model(&model(), &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model());
    }
}
