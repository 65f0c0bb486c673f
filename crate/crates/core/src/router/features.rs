use std::collections::BTreeMap;

use crate::hashing::{bucket_and_sign, hash64};
use crate::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;

const UNIGRAM_TAG: &[u8] = b"u\x1f";
const BIGRAM_TAG: &[u8] = b"b\x1f";

/// A sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseFeatures {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseFeatures {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in pairs {
            *merged.entry(i).or_default() += v;
        }
        let (indices, values) = merged.into_iter().filter(|(_, v)| *v != 0.0).unzip();
        SparseFeatures { indices, values }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseFeatures) -> f64 {
        let (mut a, mut b, mut acc) = (0, 0, 0.0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.last().map(|&i| i as usize)
    }
}

/// Lowercased alphanumeric runs. Questions made only of punctuation fall back
/// to their trimmed text as a single token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let tokens: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() && !lower.trim().is_empty() {
        return vec![lower.trim().to_string()];
    }
    tokens
}

fn gram_hash(seed: u64, tag: &[u8], parts: &[&str]) -> u64 {
    let mut buf = Vec::with_capacity(tag.len() + parts.iter().map(|p| p.len() + 1).sum::<usize>());
    buf.extend_from_slice(tag);
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            buf.push(0x1f);
        }
        buf.extend_from_slice(p.as_bytes());
    }
    hash64(seed, &buf)
}

/// Signed hashed counts of word unigrams and bigrams, L2-normalized.
pub fn featurize(question: &str, feature_dim: usize, seed: u64) -> Result<SparseFeatures> {
    if question.trim().is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    if feature_dim == 0 || feature_dim > u32::MAX as usize {
        return Err(Error::Config(format!("feature_dim {feature_dim} out of range")));
    }
    let tokens = tokenize(question);
    let hashes: Vec<u64> = tokens
        .iter()
        .map(|t| gram_hash(seed, UNIGRAM_TAG, &[t]))
        .chain(
            tokens
                .windows(2)
                .map(|w| gram_hash(seed, BIGRAM_TAG, &[&w[0], &w[1]])),
        )
        .collect();
    let signed = SparseFeatures::from_pairs(hashes.iter().map(|&h| {
        let (b, s) = bucket_and_sign(h, feature_dim);
        (b as u32, s)
    }));
    // Opposite-signed collisions can cancel every bucket; unsigned counts
    // are never zero.
    let mut features = if signed.indices.is_empty() {
        SparseFeatures::from_pairs(hashes.iter().map(|&h| (bucket_and_sign(h, feature_dim).0 as u32, 1.0)))
    } else {
        signed
    };
    let n = features.norm();
    for v in &mut features.values {
        *v /= n;
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenization() {
        assert_eq!(tokenize("Who painted the Mona-Lisa?"), ["who", "painted", "the", "mona", "lisa"]);
        assert_eq!(tokenize("???"), ["???"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn deterministic_and_unit() {
        let a = featurize("What color is the bridge?", DEFAULT_FEATURE_DIM, 3).unwrap();
        let b = featurize("What color is the bridge?", DEFAULT_FEATURE_DIM, 3).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert!(a.max_index().unwrap() < DEFAULT_FEATURE_DIM);
    }

    #[test]
    fn shared_bigram_gives_overlap() {
        let x = featurize("who painted X", DEFAULT_FEATURE_DIM, 0).unwrap();
        let y = featurize("who painted Y", DEFAULT_FEATURE_DIM, 0).unwrap();
        // "who", "painted" and "who painted" are shared; x/y and their bigrams are not.
        let bigram = gram_hash(0, BIGRAM_TAG, &["who", "painted"]);
        let (bucket, _) = bucket_and_sign(bigram, DEFAULT_FEATURE_DIM);
        assert!(x.indices.contains(&(bucket as u32)));
        assert!(y.indices.contains(&(bucket as u32)));
        assert!(x.dot(&y) > 0.0);
        assert!(x.dot(&y) < 1.0);
    }

    #[test]
    fn empty_question_is_rejected() {
        assert!(matches!(featurize("  ", 16, 0), Err(Error::EmptyInput(_))));
    }

    proptest! {
        #[test]
        fn always_unit_norm(q in "\\PC{1,60}", dim_pow in 2u32..12) {
            prop_assume!(!q.trim().is_empty());
            let f = featurize(&q, 1 << dim_pow, 9).unwrap();
            prop_assert!((f.norm() - 1.0).abs() <= 1e-6);
            prop_assert!(f.indices.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
