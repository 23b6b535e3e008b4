//! IDX tensor files as used by the MNIST distribution.
//!
//! A file starts with the magic bytes `[0, 0, 0x08, ndims]` (unsigned byte
//! payload), followed by `ndims` big-endian `u32` sizes and the raw payload.
//! Only label files (`ndims = 1`) and image files (`ndims = 3`) are accepted.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("unsupported IDX magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated IDX file: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("IDX dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, IdxError> {
        if dims.len() != 1 && dims.len() != 3 {
            return Err(IdxError::DimensionMismatch(format!(
                "{} dimensions, expected 1 or 3",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(IdxError::DimensionMismatch(format!(
                "shape {dims:?} holds {expected} bytes, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&[0, 0, 0x08, self.dims.len() as u8]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    let header: [u8; 4] = bytes
        .get(..4)
        .and_then(|h| h.try_into().ok())
        .ok_or(IdxError::TruncatedFile {
            expected: 4,
            actual: bytes.len(),
        })?;
    let magic = u32::from_be_bytes(header);
    if magic != LABEL_MAGIC && magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic(header));
    }
    let ndims = header[3] as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(IdxError::TruncatedFile {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| IdxError::DimensionMismatch(format!("shape {dims:?} overflows")))?;
    let expected = header_len + payload;
    if bytes.len() < expected {
        return Err(IdxError::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IdxError::DimensionMismatch(format!(
            "{} trailing bytes after declared payload",
            bytes.len() - expected
        )));
    }
    IdxTensor::new(dims, bytes[header_len..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_label_file() {
        let t = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 7]).unwrap();
        assert_eq!(t.dims(), &[1]);
        assert_eq!(t.data(), &[7]);
    }

    #[test]
    fn single_black_image() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend(std::iter::repeat_n(0u8, 784));
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims(), &[1, 28, 28]);
        assert!(t.data().iter().all(|&p| p == 0));
    }

    #[test]
    fn rejects_two_dimensional_magic() {
        assert_eq!(
            parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 5]),
            Err(IdxError::BadMagic([0, 0, 8, 2]))
        );
        assert!(matches!(
            parse_idx(&[0, 0, 9, 1, 0, 0, 0, 1, 5]),
            Err(IdxError::BadMagic(_))
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(IdxError::TruncatedFile { .. })));
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0]),
            Err(IdxError::TruncatedFile { .. })
        ));
        assert_eq!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]),
            Err(IdxError::TruncatedFile {
                expected: 11,
                actual: 10
            })
        );
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 1, 2]),
            Err(IdxError::DimensionMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            shape in prop_oneof![
                (1usize..20).prop_map(|n| vec![n]),
                (1usize..4, 1usize..6, 1usize..6).prop_map(|(a, b, c)| vec![a, b, c]),
            ],
            seed in any::<u8>(),
        ) {
            let len: usize = shape.iter().product();
            let data: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let bytes = IdxTensor::new(shape, data).unwrap().to_bytes();
            prop_assert_eq!(parse_idx(&bytes).unwrap().to_bytes(), bytes);
        }
    }
}
