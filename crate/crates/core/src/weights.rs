//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FNCT" | version u32 | config_len u32 | config text
//! | digest [32] | payload sha256 [32]
//! | n_params u32 | { name_len u16 | name | ndim u8 | dims u32* | offset u64 }*
//! | payload_len u64 | payload (f32 LE)
//! ```
//!
//! `digest` is the sha256 of the config text. Offsets are byte offsets into
//! the payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Result, WeightFileError};
use crate::model::{param_shapes, FinCast};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FNCT";
pub const VERSION: u32 = 1;

/// Serialize `model` to bytes. Values are rounded to f32.
pub fn encode(model: &FinCast) -> Vec<u8> {
    let config = model.config().canonical();
    let mut payload = Vec::with_capacity(model.num_params() * 4);
    let mut manifest = Vec::new();
    for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
        manifest.extend_from_slice(&(name.len() as u16).to_le_bytes());
        manifest.extend_from_slice(name.as_bytes());
        manifest.push(t.shape().len() as u8);
        for &d in t.shape() {
            manifest.extend_from_slice(&(d as u32).to_le_bytes());
        }
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + manifest.len() + config.len() + 128);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&Sha256::digest(config.as_bytes()));
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WeightFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(WeightFileError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> std::result::Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, WeightFileError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse bytes produced by [`encode`]. With `expected`, the embedded config
/// digest must match it.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<FinCast> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WeightFileError::BadMagic(magic).into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightFileError::UnsupportedVersion(version).into());
    }
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let digest = r.take(32)?;
    let checksum = r.take(32)?;
    let n_params = r.u32()? as usize;

    let actual_digest = Sha256::digest(config_bytes);
    if actual_digest.as_slice() != digest {
        return Err(WeightFileError::DigestMismatch {
            expected: hex(digest),
            found: hex(&actual_digest),
        }
        .into());
    }
    if let Some(exp) = expected {
        if exp.digest() != hex(digest) {
            return Err(WeightFileError::DigestMismatch {
                expected: exp.digest(),
                found: hex(digest),
            }
            .into());
        }
    }
    let text = std::str::from_utf8(config_bytes)
        .map_err(|_| WeightFileError::Malformed("config is not UTF-8".into()))?;
    let config = ModelConfig::parse_canonical(text)
        .map_err(|e| WeightFileError::Malformed(format!("embedded config: {e}")))?;

    let mut entries = Vec::with_capacity(n_params.min(1 << 16));
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| WeightFileError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let offset = r.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    if r.pos != bytes.len() {
        return Err(
            WeightFileError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into(),
        );
    }
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(WeightFileError::ChecksumMismatch.into());
    }

    let expected_shapes = param_shapes(&config);
    if expected_shapes.len() != entries.len() {
        return Err(WeightFileError::Malformed(format!(
            "{} parameters, config implies {}",
            entries.len(),
            expected_shapes.len()
        ))
        .into());
    }
    let mut params = ParamSet::new();
    for ((name, shape, offset), (exp_name, exp_shape)) in entries.into_iter().zip(expected_shapes) {
        if name != exp_name {
            return Err(WeightFileError::Malformed(format!(
                "parameter {name} where {exp_name} was expected"
            ))
            .into());
        }
        if shape != exp_shape {
            return Err(WeightFileError::ShapeMismatch {
                name,
                expected: exp_shape,
                found: shape,
            }
            .into());
        }
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(n * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| WeightFileError::Malformed(format!("{name}: offset out of range")))?;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(name, Tensor::new(&shape, data)?)?;
    }
    FinCast::from_params(config, params)
}

pub fn save_weights(model: &FinCast, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(WeightFileError::EmptyPath.into());
    }
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_weights(path: &Path, expected: Option<&ModelConfig>) -> Result<FinCast> {
    if path.as_os_str().is_empty() {
        return Err(WeightFileError::EmptyPath.into());
    }
    let bytes = std::fs::read(path)?;
    decode(&bytes, expected)
}

/// Round every parameter to f32 precision, matching what a save/load cycle
/// produces.
pub fn round_to_f32(model: &mut FinCast) {
    for t in model.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x = *x as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FincastError;

    fn tiny() -> FinCast {
        let c = ModelConfig {
            patch_len: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            n_experts: 2,
            top_k: 1,
            expert_hidden: 4,
            input_hidden: 4,
            output_hidden: 4,
            h_out: 4,
            quantiles: vec![0.5],
            ..ModelConfig::default()
        };
        FinCast::new(c, 3).unwrap()
    }

    fn code(e: FincastError) -> i32 {
        match e {
            FincastError::Weights(w) => w.code(),
            other => panic!("not a weight error: {other}"),
        }
    }

    #[test]
    fn save_load_save_identical() {
        let m = tiny();
        let a = encode(&m);
        let back = decode(&a, Some(m.config())).unwrap();
        assert_eq!(encode(&back), a);
        for (x, y) in m.params().tensors().iter().zip(back.params().tensors()) {
            for (&u, &v) in x.data().iter().zip(y.data()) {
                assert_eq!((u as f32).to_bits(), (v as f32).to_bits());
            }
        }
    }

    #[test]
    fn flipped_payload_byte_rejected() {
        let mut b = encode(&tiny());
        let n = b.len();
        b[n - 3] ^= 0x40;
        assert_eq!(code(decode(&b, None).unwrap_err()), 15);
    }

    #[test]
    fn distinct_errors() {
        let m = tiny();
        let b = encode(&m);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(code(decode(&bad, None).unwrap_err()), 11);
        let mut bad = b.clone();
        bad[4] = 9;
        assert_eq!(code(decode(&bad, None).unwrap_err()), 12);
        assert_eq!(code(decode(&b[..b.len() - 10], None).unwrap_err()), 13);
        let mut other = m.config().clone();
        other.h_out = 8;
        assert_eq!(code(decode(&b, Some(&other)).unwrap_err()), 14);
        assert_eq!(code(save_weights(&m, Path::new("")).unwrap_err()), 10);
    }
}
