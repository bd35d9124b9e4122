//! Text encoders: a deterministic signed feature-hashing encoder and a client
//! for a remote embedding service.

mod remote;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use remote::{RemoteEmbedder, RemoteEmbedderConfig};

use crate::codec;

/// Smallest dimension the hashing encoder supports.
pub const MIN_DIM: usize = 8;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("DIM_MISMATCH: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("BAD_DIM: service returned {actual} values, expected {expected}")]
    BadDim { expected: usize, actual: usize },
    #[error("TIMEOUT: embedding request exceeded its deadline")]
    Timeout,
    #[error("TRANSPORT: {0}")]
    Transport(String),
    #[error("vector is not unit norm (norm {0})")]
    NotUnit(f64),
}

/// A unit-norm embedding, stored as 32-bit floats.
///
/// Serialized as base64 of the little-endian float bytes, which keeps the
/// vector bit-exact through logs and snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Wraps `values` after checking the unit-norm invariant.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        let n = l2_norm(&values);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(EmbedError::NotUnit(n));
        }
        Ok(Self { values })
    }

    /// Scales `values` to unit norm. A zero vector becomes the sentinel `e0`.
    pub fn normalized(values: &[f64]) -> Self {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::sentinel(values.len().max(1));
        }
        Self {
            values: values.iter().map(|v| (v / n) as f32).collect(),
        }
    }

    /// The basis vector `[1, 0, ..., 0]` reserved for text with no tokens.
    pub fn sentinel(dim: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[0] = 1.0;
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn bit_pattern(&self) -> Vec<u32> {
        self.values.iter().map(|v| v.to_bits()).collect()
    }
}

impl Serialize for EmbeddingVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&codec::encode_f32s(&self.values))
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let values = codec::decode_f32s(&text).map_err(serde::de::Error::custom)?;
        EmbeddingVector::from_unit(values).map_err(serde::de::Error::custom)
    }
}

/// Dot product of two f32 slices accumulated in f64.
///
/// Four independent partial sums let the compiler vectorize the loop; the
/// summation order is fixed, so results are reproducible across runs.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += f64::from(a[j]) * f64::from(b[j]);
        acc[1] += f64::from(a[j + 1]) * f64::from(b[j + 1]);
        acc[2] += f64::from(a[j + 2]) * f64::from(b[j + 2]);
        acc[3] += f64::from(a[j + 3]) * f64::from(b[j + 3]);
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += f64::from(a[j]) * f64::from(b[j]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity from a precomputed dot product and norms, clamped to [-1, 1].
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    let denom = norm_a * norm_b;
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

pub fn cosine_sim(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    cosine_sim_slices(u.values(), v.values())
}

pub fn cosine_sim_slices(u: &[f32], v: &[f32]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(cosine_from_parts(dot(u, v), l2_norm(u), l2_norm(v)))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Signed feature-hashing embedding of word unigrams and bigrams.
///
/// Each n-gram (bigrams joined by a single space) is hashed with 64-bit FNV-1a;
/// `hash % dim` picks the bucket and the parity of `hash >> 32` picks the sign
/// (even adds, odd subtracts). Text without tokens maps to the sentinel `e0`.
///
/// # Panics
/// If `dim < MIN_DIM`.
pub fn embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim >= MIN_DIM, "embedding dimension must be at least {MIN_DIM}");
    let toks = tokens(text);
    if toks.is_empty() {
        return EmbeddingVector::sentinel(dim);
    }
    let mut acc = vec![0.0f64; dim];
    let mut add = |gram: &str| {
        let h = fnv1a(gram.as_bytes());
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
    };
    for t in &toks {
        add(t);
    }
    for w in toks.windows(2) {
        add(&format!("{} {}", w[0], w[1]));
    }
    EmbeddingVector::normalized(&acc)
}

/// Anything that turns event text into an embedding.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// The built-in deterministic encoder.
#[derive(Debug, Clone, Copy)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= MIN_DIM, "embedding dimension must be at least {MIN_DIM}");
        Self { dim }
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(embed(text, self.dim))
    }
}

/// Tries a primary encoder and falls back to the hashing encoder on any error.
pub struct FallbackEncoder<E> {
    primary: E,
    fallback: HashingEncoder,
}

impl<E: TextEncoder> FallbackEncoder<E> {
    pub fn new(primary: E) -> Self {
        let fallback = HashingEncoder::new(primary.dim());
        Self { primary, fallback }
    }
}

impl<E: TextEncoder> TextEncoder for FallbackEncoder<E> {
    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        match self.primary.encode(text) {
            Ok(v) => Ok(v),
            Err(e) => {
                log::warn!("remote embedding failed ({e}); using built-in encoder");
                self.fallback.encode(text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::from_unit(v.to_vec()).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn embed_is_deterministic() {
        let a = embed("A man is holding a knife in a park", 384);
        let b = embed("A man is holding a knife in a park", 384);
        assert_eq!(a.bit_pattern(), b.bit_pattern());
    }

    #[test]
    fn empty_text_is_sentinel() {
        let e = embed("", 16);
        let mut expected = [0.0f32; 16];
        expected[0] = 1.0;
        assert_eq!(e.values(), &expected[..]);
        assert_eq!(embed("  ,.;  ", 16).values(), &expected[..]);
    }

    #[test]
    fn embedding_matches_hand_built_features() {
        let dim = 32;
        let mut acc = vec![0.0f64; dim];
        for g in ["running", "man", "running man"] {
            let h = fnv1a(g.as_bytes());
            acc[(h % dim as u64) as usize] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected: Vec<f32> = acc.iter().map(|x| (x / n) as f32).collect();
        assert_eq!(embed("Running, MAN!", dim).values(), &expected[..]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_sim(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap(), 0.0);
        let s = cosine_sim(&unit(&[0.6, 0.8]), &unit(&[0.8, 0.6])).unwrap();
        assert!((s - 0.96).abs() < 1e-6);
    }

    #[test]
    fn cosine_dim_mismatch() {
        assert_eq!(
            cosine_sim(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0, 0.0])),
            Err(EmbedError::DimMismatch { left: 2, right: 3 })
        );
    }

    #[test]
    fn disjoint_vocabulary_texts_are_nearly_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let word = |rng: &mut ChaCha8Rng, prefix: char| -> String {
            let len = rng.gen_range(3..8);
            let mut w = String::from(prefix);
            for _ in 0..len {
                w.push(rng.gen_range(b'a'..=b'z') as char);
            }
            w
        };
        for _ in 0..100 {
            let n1 = rng.gen_range(3..12);
            let n2 = rng.gen_range(3..12);
            // Distinct first letters keep the two vocabularies disjoint.
            let a: Vec<String> = (0..n1).map(|_| word(&mut rng, 'q')).collect();
            let b: Vec<String> = (0..n2).map(|_| word(&mut rng, 'z')).collect();
            let s = cosine_sim(&embed(&a.join(" "), 384), &embed(&b.join(" "), 384)).unwrap();
            assert!(s.abs() < 0.3, "similarity {s} for {a:?} / {b:?}");
        }
    }

    proptest! {
        #[test]
        fn nonempty_text_is_unit_norm(s in "[a-zA-Z0-9 ,.]{0,80}", dim in 8usize..512) {
            let e = embed(&s, dim);
            prop_assert_eq!(e.dim(), dim);
            prop_assert!((l2_norm(e.values()) - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn cosine_symmetric_bounded_and_reflexive(a in "[a-z ]{1,40}", b in "[a-z ]{1,40}") {
            let (u, v) = (embed(&a, 64), embed(&b, 64));
            let uv = cosine_sim(&u, &v).unwrap();
            let vu = cosine_sim(&v, &u).unwrap();
            prop_assert_eq!(uv, vu);
            prop_assert!(uv.abs() <= 1.0);
            prop_assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn serde_roundtrip_is_bit_exact() {
        let e = embed("a woman is carrying a bag in a street", 48);
        let json = serde_json::to_string(&e).unwrap();
        let back: EmbeddingVector = serde_json::from_str(&json).unwrap();
        assert_eq!(e.bit_pattern(), back.bit_pattern());
    }
}
