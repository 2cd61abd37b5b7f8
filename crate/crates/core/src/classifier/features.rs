//! Hashed character n-gram features.

use serde::{Deserialize, Serialize};

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_FEATURE_DIM,
            ngram_min: 1,
            ngram_max: 4,
        }
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Bucket of an n-gram string: 64-bit FNV-1a of its UTF-8 bytes modulo `dim`.
pub fn gram_bucket(gram: &str, dim: usize) -> u32 {
    (fnv_extend(FNV_OFFSET, gram.as_bytes()) % dim as u64) as u32
}

/// L2-normalized counts of hashed character n-grams of `text`.
pub fn featurize(text: &str, cfg: &FeatureConfig) -> SparseVector {
    assert!(cfg.dim >= 1 && cfg.ngram_min >= 1 && cfg.ngram_min <= cfg.ngram_max);
    let chars: Vec<char> = text.chars().collect();
    let mut buckets: Vec<u32> = Vec::with_capacity(chars.len() * (cfg.ngram_max - cfg.ngram_min + 1));
    let mut utf8 = [0u8; 4];
    for start in 0..chars.len() {
        let mut h = FNV_OFFSET;
        for n in 1..=cfg.ngram_max {
            let Some(&c) = chars.get(start + n - 1) else { break };
            h = fnv_extend(h, c.encode_utf8(&mut utf8).as_bytes());
            if n >= cfg.ngram_min {
                buckets.push((h % cfg.dim as u64) as u32);
            }
        }
    }
    buckets.sort_unstable();
    let mut out = SparseVector::default();
    for chunk in buckets.chunk_by(|a, b| a == b) {
        out.indices.push(chunk[0]);
        out.values.push(chunk.len() as f64);
    }
    let norm = out.norm();
    if norm > 0.0 {
        for v in &mut out.values {
            *v /= norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Plain n-gram enumeration without hashing.
    fn grams(text: &str, lo: usize, hi: usize) -> BTreeMap<String, usize> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = BTreeMap::new();
        for n in lo..=hi {
            for w in chars.windows(n) {
                *out.entry(w.iter().collect::<String>()).or_insert(0) += 1;
            }
        }
        out
    }

    #[test]
    fn empty_text_is_zero() {
        assert!(featurize("", &FeatureConfig::default()).is_zero());
    }

    #[test]
    fn deterministic() {
        let cfg = FeatureConfig::default();
        assert_eq!(featurize("Hello, world", &cfg), featurize("Hello, world", &cfg));
    }

    #[test]
    fn two_char_string_has_three_grams() {
        let cfg = FeatureConfig {
            dim: DEFAULT_FEATURE_DIM,
            ngram_min: 1,
            ngram_max: 2,
        };
        let expected = grams("ab", 1, 2);
        assert_eq!(expected.len(), 3);
        let v = featurize("ab", &cfg);
        assert_eq!(v.nnz(), 3);
        let mut buckets: Vec<u32> = expected.keys().map(|g| gram_bucket(g, cfg.dim)).collect();
        buckets.sort_unstable();
        assert_eq!(v.indices, buckets);
        for x in &v.values {
            assert!((x - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn counts_match_enumeration() {
        let cfg = FeatureConfig::default();
        let text = "abab déjà vu";
        let g = grams(text, 1, 4);
        let mut dense: BTreeMap<u32, f64> = BTreeMap::new();
        for (gram, count) in &g {
            *dense.entry(gram_bucket(gram, cfg.dim)).or_insert(0.0) += *count as f64;
        }
        let norm = dense.values().map(|v| v * v).sum::<f64>().sqrt();
        let v = featurize(text, &cfg);
        assert_eq!(v.indices, dense.keys().copied().collect::<Vec<_>>());
        for ((_, expected), got) in dense.iter().zip(&v.values) {
            assert!((expected / norm - got).abs() < 1e-12);
        }
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }
}
