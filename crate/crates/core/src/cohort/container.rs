//! Binary per-slide feature container.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `MSWF`                            |
//! | 2     | version (`u16`, currently 1)            |
//! | 2     | reserved (`u16`, 0)                     |
//! | 4     | `n` patch count (`u32`)                 |
//! | 4     | `dim` embedding width (`u32`)           |
//! | 4·n·dim | features, `f32`, row-major            |
//! | 4·n·2 | patch-center coordinates `(x, y)`, `f32` |

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, FormatError, Result};
use crate::io::atomic_write_bytes;

pub const FEATURE_MAGIC: [u8; 4] = *b"MSWF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// Patch embeddings of one slide together with level-0 patch-center coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    features: Array2<f32>,
    coords: Array2<f32>,
}

impl FeatureBlock {
    pub fn new(features: Array2<f32>, coords: Array2<f32>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::input("feature block needs at least one patch"));
        }
        if features.ncols() == 0 {
            return Err(Error::input("feature block needs a positive embedding width"));
        }
        if coords.dim() != (n, 2) {
            return Err(Error::input(format!(
                "coords shape {:?} does not match {n} patches",
                coords.dim()
            )));
        }
        if let Some(i) = features.iter().chain(coords.iter()).position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite value at element {i}")));
        }
        Ok(FeatureBlock {
            features: features.as_standard_layout().into_owned(),
            coords: coords.as_standard_layout().into_owned(),
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn coords(&self) -> &Array2<f32> {
        &self.coords
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.features.len() + self.coords.len()));
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.n() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.features.iter().chain(self.coords.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != FEATURE_MAGIC {
            return Err(FormatError::BadMagic {
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(FormatError::VersionMismatch {
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if n == 0 || dim == 0 {
            return Err(FormatError::Header(format!("n={n}, dim={dim} must both be positive")));
        }
        let count = n
            .checked_mul(dim)
            .and_then(|f| f.checked_add(2 * n))
            .ok_or_else(|| FormatError::Header("size overflow".into()))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes(bytes.len() - expected));
        }
        let mut values = Vec::with_capacity(count);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite { index: i });
            }
            values.push(v);
        }
        let coords = values.split_off(n * dim);
        Ok(FeatureBlock {
            features: Array2::from_shape_vec((n, dim), values).expect("length checked"),
            coords: Array2::from_shape_vec((n, 2), coords).expect("length checked"),
        })
    }
}

pub fn write_feature_block(block: &FeatureBlock, path: impl AsRef<Path>) -> Result<()> {
    atomic_write_bytes(path.as_ref(), &block.to_bytes())
}

pub fn read_feature_block(path: impl AsRef<Path>) -> Result<FeatureBlock> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FeatureBlock::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn block_3x4() -> FeatureBlock {
        FeatureBlock::new(
            array![[1.0, -2.5, 3.0, 0.0], [1e-30, 7.0, -0.0, 4.25], [9.0, 8.0, 7.0, 6.0]],
            array![[256.0, 256.0], [768.0, 256.0], [256.0, 768.0]],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_small_block() {
        let b = block_3x4();
        let back = FeatureBlock::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.features()[[1, 2]].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.mswf");
        write_feature_block(&block_3x4(), &p).unwrap();
        assert_eq!(read_feature_block(&p).unwrap(), block_3x4());
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = block_3x4().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(FeatureBlock::from_bytes(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = block_3x4().to_bytes();
        bytes[4] = 2;
        assert_eq!(
            FeatureBlock::from_bytes(&bytes),
            Err(FormatError::VersionMismatch { expected: 1, found: 2 })
        );
    }

    #[test]
    fn truncated_payload() {
        // declare n=5 but ship the payload of a 4-patch block
        let b = FeatureBlock::new(Array2::ones((4, 3)), Array2::zeros((4, 2))).unwrap();
        let mut bytes = b.to_bytes();
        bytes[8..12].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(FeatureBlock::from_bytes(&bytes), Err(FormatError::Truncated { .. })));
        assert!(matches!(FeatureBlock::from_bytes(&bytes[..10]), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = block_3x4().to_bytes();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(FeatureBlock::from_bytes(&bytes), Err(FormatError::NonFinite { index: 0 }));
        assert!(FeatureBlock::new(array![[f32::INFINITY]], array![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn shape_invariants() {
        assert!(FeatureBlock::new(Array2::zeros((0, 3)), Array2::zeros((0, 2))).is_err());
        assert!(FeatureBlock::new(Array2::zeros((2, 3)), Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn large_block_round_trip() {
        let n = 10_000;
        let dim = 2048;
        let feats = Array2::from_shape_fn((n, dim), |(i, j)| ((i * 31 + j * 17) % 1013) as f32 * 0.37 - 100.0);
        let coords = Array2::from_shape_fn((n, 2), |(i, j)| (i * 512 + j * 256) as f32);
        let b = FeatureBlock::new(feats, coords).unwrap();
        assert_eq!(FeatureBlock::from_bytes(&b.to_bytes()).unwrap(), b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn round_trip_is_bit_exact(n in 1usize..40, dim in 1usize..40, seed in any::<u32>()) {
            let bits = |i: usize| {
                let x = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed);
                let v = f32::from_bits(x);
                if v.is_finite() { v } else { x as f32 }
            };
            let feats = Array2::from_shape_fn((n, dim), |(i, j)| bits(i * dim + j));
            let coords = Array2::from_shape_fn((n, 2), |(i, j)| bits(1_000_000 + 2 * i + j));
            let b = FeatureBlock::new(feats, coords).unwrap();
            let back = FeatureBlock::from_bytes(&b.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), b.to_bytes());
        }
    }
}
