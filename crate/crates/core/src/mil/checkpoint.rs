//! Model checkpoint (little-endian):
//!
//! `MSMP` magic, `u16` version, `u32` dim, `u32` embed width, `u32` attention
//! width, then the ten tensors in [`MilParams::slices`] order, each as a `u64`
//! element count followed by that many `f64` values.

use std::path::Path;

use super::{MilConfig, MilParams, TENSOR_COUNT};
use crate::error::{Error, FormatError, Result};
use crate::io::atomic_write_bytes;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSMP";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn checkpoint_bytes(params: &MilParams<f64>) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(18 + 8 * (TENSOR_COUNT + params.num_params()));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [cfg.dim, cfg.embed, cfg.attn] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in params.slices() {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> std::result::Result<MilParams<f64>, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let cfg = MilConfig::new(c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if cfg.dim == 0 || cfg.embed == 0 || cfg.attn == 0 {
        return Err(FormatError::Header(format!("zero-sized layer in {cfg:?}")));
    }
    let mut params = MilParams::<f64>::zeros(cfg);
    let mut index = 0;
    for t in params.slices_mut() {
        let len = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
        if len != t.len() as u64 {
            return Err(FormatError::Header(format!(
                "tensor length {len} does not match expected {}",
                t.len()
            )));
        }
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite { index });
            }
            index += 1;
        }
    }
    if c.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(params)
}

pub fn write_checkpoint(params: &MilParams<f64>, path: impl AsRef<Path>) -> Result<()> {
    atomic_write_bytes(path.as_ref(), &checkpoint_bytes(params))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<MilParams<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = MilParams::<f64>::init(MilConfig::new(7, 5, 3), 11);
        p.head_b[1] = -0.0;
        p.attn_w_b[0] = 1e-300;
        let back = checkpoint_from_bytes(&checkpoint_bytes(&p)).unwrap();
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&p));
        assert_eq!(back.head_b[1].to_bits(), (-0.0f64).to_bits());

        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&p, dir.path().join("m.msmp")).unwrap();
        assert_eq!(read_checkpoint(dir.path().join("m.msmp")).unwrap(), p);
    }

    #[test]
    fn corrupt_inputs() {
        let p = MilParams::<f64>::init(MilConfig::new(3, 2, 2), 1);
        let good = checkpoint_bytes(&p);
        let mut bad = good.clone();
        bad[3] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(FormatError::VersionMismatch { .. })));
        assert!(matches!(
            checkpoint_from_bytes(&good[..good.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(checkpoint_from_bytes(&bad), Err(FormatError::TrailingBytes(1))));
    }
}
