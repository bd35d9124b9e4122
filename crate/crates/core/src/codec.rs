//! Base64 packing of little-endian float vectors.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("byte length {len} is not a multiple of {width}")]
    Length { len: usize, width: usize },
}

pub fn encode_f32s(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32s(text: &str) -> Result<Vec<f32>, CodecError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| CodecError::Base64(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(CodecError::Length { len: bytes.len(), width: 4 });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>, CodecError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| CodecError::Base64(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(CodecError::Length { len: bytes.len(), width: 8 });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_roundtrip_is_bit_exact(v in proptest::collection::vec(any::<f32>(), 0..64)) {
            let back = decode_f32s(&encode_f32s(&v)).unwrap();
            prop_assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn f64_roundtrip_is_bit_exact(v in proptest::collection::vec(any::<f64>(), 0..64)) {
            let back = decode_f64s(&encode_f64s(&v)).unwrap();
            prop_assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn ragged_length_rejected() {
        let s = STANDARD.encode([1u8, 2, 3]);
        assert!(matches!(decode_f32s(&s), Err(CodecError::Length { .. })));
    }
}
