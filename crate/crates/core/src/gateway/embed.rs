//! Embedding providers.

use sha2::{Digest, Sha256};

use crate::text::{RuleAnalyzer, TextAnalyzer};

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    /// One unit-norm vector per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Signed feature hashing of the content-lemma multiset. Each lemma lands in
/// four buckets so a single collision moves cosine similarity only slightly.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    analyzer: RuleAnalyzer,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            dim,
            analyzer: RuleAnalyzer,
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut features = self.analyzer.content_lemmas(text);
        if features.is_empty() {
            features = self
                .analyzer
                .tokenize(text)
                .into_iter()
                .filter(|t| t.is_word)
                .map(|t| t.lemma)
                .collect();
        }
        if features.is_empty() {
            features.push(text.to_string());
        }
        let mut v = vec![0.0; self.dim];
        for f in &features {
            let h = Sha256::digest(f.as_bytes());
            for chunk in h.chunks_exact(8) {
                let word = u64::from_le_bytes(chunk.try_into().unwrap());
                let sign = if word >> 63 == 0 { 1.0 } else { -1.0 };
                v[(word % self.dim as u64) as usize] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every feature cancelled out; fall back to a fixed axis.
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        "hash-embedder"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
