//! Checkpoint files.
//!
//! ```text
//! magic       [u8; 8]  "DPCCKPT1"
//! d, d_m, d_a, M, K     u32 each
//! alpha       f32
//! mode        u32      0 base_only, 1 direct, 2 score_cond, 3 residual
//! step        u64      optimizer steps taken
//! val_srcc    f32      NaN when undefined
//! tensors     f32      little-endian, in `TENSOR_NAMES` order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::params::check_alpha;
use super::{CalibParams, ModelDims, VariantMode};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPCCKPT1";
const HEADER_LEN: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: CalibParams<f32>,
    /// Verbalizer count of the data the model was trained on.
    pub k: u32,
    pub mode: VariantMode,
    pub step: u64,
    pub val_srcc: f32,
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }

    /// Check that this checkpoint can score records with the given shape.
    pub fn check_compatible(&self, k: u32, d_m: u32, d_a: u32) -> Result<()> {
        let dims = self.dims();
        if self.k != k || dims.d_m != d_m as usize || dims.d_a != d_a as usize {
            return Err(Error::Shape(format!(
                "checkpoint expects K={}, d_m={}, d_a={} but data has K={k}, d_m={d_m}, d_a={d_a}",
                self.k, dims.d_m, dims.d_a
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let dims = ckpt.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * dims.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [dims.d, dims.d_m, dims.d_a, dims.m] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.k.to_le_bytes());
    buf.extend_from_slice(&ckpt.params.alpha.to_le_bytes());
    buf.extend_from_slice(&ckpt.mode.code().to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.val_srcc.to_le_bytes());
    debug_assert_eq!(buf.len(), HEADER_LEN);
    for (_, tensor) in ckpt.params.tensors() {
        for x in tensor {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = ModelDims {
        d: u32_at(8) as usize,
        d_m: u32_at(12) as usize,
        d_a: u32_at(16) as usize,
        m: u32_at(20) as usize,
    };
    let k = u32_at(24);
    let alpha = f32_at(28);
    let mode_code = u32_at(32);
    let step = u64::from_le_bytes(bytes[36..44].try_into().unwrap());
    let val_srcc = f32_at(44);

    dims.validate().map_err(|e| Error::Format {
        offset: 8,
        msg: e.to_string(),
    })?;
    check_alpha(alpha).map_err(|e| Error::Format {
        offset: 28,
        msg: e.to_string(),
    })?;
    let mode = VariantMode::from_code(mode_code).ok_or_else(|| Error::Format {
        offset: 32,
        msg: format!("unknown variant mode code {mode_code}"),
    })?;

    let expected = HEADER_LEN as u64 + 4 * dims.parameter_count() as u64;
    if bytes.len() as u64 != expected {
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        return Err(Error::Format {
            offset: expected,
            msg: format!("{} trailing bytes", bytes.len() as u64 - expected),
        });
    }

    let mut params = CalibParams::<f32>::zeros(dims, alpha);
    let mut offset = HEADER_LEN;
    for (name, tensor) in params.tensors_mut() {
        for x in tensor.iter_mut() {
            let v = f32_at(offset);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: offset as u64,
                    msg: format!("non-finite value in {name}"),
                });
            }
            *x = v;
            offset += 4;
        }
    }
    Ok(Checkpoint {
        params,
        k,
        mode,
        step,
        val_srcc,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
