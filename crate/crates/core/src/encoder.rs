//! Text embedding providers.
//!
//! [`TextEncoder`] is the pluggable slot filled by a pretrained encoder in a
//! full deployment. The default [`HashedNGramEncoder`] is deterministic and
//! offline: signed feature hashing of character n-grams, L2-normalized.
//! [`ServiceEncoder`] forwards to an HTTP embedding service.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("embedding service error: {0}")]
    Service(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Deterministic mapping from text to a fixed-dimension dense vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError>;
    /// Whether the encoder has parameters that end-to-end training may touch.
    fn trainable(&self) -> bool {
        false
    }
    /// Persisted with model bundles so a load can reconstruct the encoder.
    fn identifier(&self) -> String;
    /// Hash of the encoder's parameters/configuration; bitwise-stable unless
    /// the parameters change.
    fn fingerprint(&self) -> u64 {
        fnv1a(self.identifier().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Signed feature hashing of character 3- to 5-grams.
#[derive(Debug, Clone)]
pub struct HashedNGramEncoder {
    dim: usize,
    min_n: usize,
    max_n: usize,
}

pub const DEFAULT_EMBED_DIM: usize = 768;

impl HashedNGramEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedNGramEncoder { dim, min_n: 3, max_n: 5 }
    }
}

impl Default for HashedNGramEncoder {
    fn default() -> Self {
        HashedNGramEncoder::new(DEFAULT_EMBED_DIM)
    }
}

impl TextEncoder for HashedNGramEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let mut v = vec![0.0f64; self.dim];
        if text.is_empty() {
            return Ok(v);
        }
        let chars: Vec<char> = text.chars().collect();
        let mut buf = String::new();
        let add = |gram: &str, v: &mut Vec<f64>| {
            let h = fnv1a(gram.as_bytes());
            let bucket = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        };
        if chars.len() < self.min_n {
            add(text, &mut v);
        } else {
            for n in self.min_n..=self.max_n.min(chars.len()) {
                for window in chars.windows(n) {
                    buf.clear();
                    buf.extend(window.iter());
                    add(&buf, &mut v);
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Ok(v)
    }

    fn identifier(&self) -> String {
        format!("hashed-ngram-v1:dim={},n={}..{}", self.dim, self.min_n, self.max_n)
    }
}

/// Client for an external embedding service speaking
/// `POST {url} {"text": ...} -> {"embedding": [...]}`.
pub struct ServiceEncoder {
    url: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl ServiceEncoder {
    pub fn new(url: &str, dim: usize, timeout: Duration) -> Result<Self, EncoderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EncoderError::Service(e.to_string()))?;
        Ok(ServiceEncoder { url: url.to_string(), dim, client })
    }
}

impl TextEncoder for ServiceEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        #[derive(serde::Serialize)]
        struct Req<'a> {
            text: &'a str,
        }
        #[derive(serde::Deserialize)]
        struct Resp {
            embedding: Vec<f64>,
        }
        let resp: Resp = self
            .client
            .post(&self.url)
            .json(&Req { text })
            .send()
            .and_then(reqwest::blocking::Response::error_for_status)
            .map_err(|e| EncoderError::Service(e.to_string()))?
            .json()
            .map_err(|e| EncoderError::Service(e.to_string()))?;
        if resp.embedding.len() != self.dim {
            return Err(EncoderError::DimMismatch { expected: self.dim, got: resp.embedding.len() });
        }
        Ok(resp.embedding)
    }

    fn identifier(&self) -> String {
        format!("service:{}", self.url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_embeds_to_zero_vector() {
        let enc = HashedNGramEncoder::new(64);
        let v = enc.embed("").unwrap();
        assert_eq!(v.len(), 64);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_empty_text_is_unit_norm() {
        let enc = HashedNGramEncoder::new(128);
        for text in ["hi", "cat", "a longer piece of text with n-grams"] {
            let v = enc.embed(text).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm for {text:?} was {norm}");
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let enc = HashedNGramEncoder::new(96);
        assert_eq!(enc.embed("same input").unwrap(), enc.embed("same input").unwrap());
        let enc2 = HashedNGramEncoder::new(96);
        assert_eq!(enc.embed("same input").unwrap(), enc2.embed("same input").unwrap());
    }

    #[test]
    fn different_texts_differ() {
        let enc = HashedNGramEncoder::new(256);
        assert_ne!(enc.embed("politics today").unwrap(), enc.embed("gaming stream").unwrap());
    }

    #[test]
    fn default_dim_is_768() {
        let enc = HashedNGramEncoder::default();
        assert_eq!(enc.dim(), 768);
        assert_eq!(enc.embed("x").unwrap().len(), 768);
        assert!(!enc.trainable());
    }

    #[test]
    fn fingerprint_tracks_configuration() {
        let a = HashedNGramEncoder::new(64);
        let b = HashedNGramEncoder::new(64);
        let c = HashedNGramEncoder::new(65);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}

