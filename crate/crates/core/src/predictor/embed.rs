//! Text embeddings for the query representation.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Fixed-width text encoder. Implementations must be deterministic.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub const HASHED_NGRAM_ID: &str = "hashed-char-ngram-3-5";
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Signed feature hashing of lowercase character 3-, 4- and 5-grams,
/// L2-normalized. Words are padded with boundary markers so short words
/// still contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedNgramEmbedder {
    dim: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

impl HashedNgramEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dimension must be positive".into()));
        }
        Ok(Self { dim })
    }
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn id(&self) -> &str {
        HASHED_NGRAM_ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for word in text.split_whitespace() {
            let chars: Vec<char> = std::iter::once('<')
                .chain(word.chars().flat_map(char::to_lowercase))
                .chain(std::iter::once('>'))
                .collect();
            for n in 3..=5 {
                for gram in chars.windows(n) {
                    let h = fnv1a(gram.iter().flat_map(|&c| u32::from(c).to_le_bytes()));
                    let slot = (h % self.dim as u64) as usize;
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[slot] += sign;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Embedding providers by id.
#[derive(Clone)]
pub struct EmbedderRegistry {
    providers: HashMap<String, Arc<dyn EmbeddingProvider>>,
}

impl Default for EmbedderRegistry {
    fn default() -> Self {
        let mut r = Self { providers: HashMap::new() };
        r.register(Arc::new(HashedNgramEmbedder::default()));
        r
    }
}

impl EmbedderRegistry {
    pub fn register(&mut self, p: Arc<dyn EmbeddingProvider>) {
        self.providers.insert(p.id().to_string(), p);
    }

    /// Provider with the given id, checked against the expected width.
    pub fn resolve(&self, id: &str, dim: usize) -> Result<Arc<dyn EmbeddingProvider>> {
        if id == HASHED_NGRAM_ID {
            return Ok(Arc::new(HashedNgramEmbedder::new(dim)?));
        }
        let p = self.providers.get(id).ok_or_else(|| Error::Embedding(format!("unknown provider `{id}`")))?;
        if p.dim() != dim {
            return Err(Error::Embedding(format!("provider `{id}` has width {}, model expects {dim}", p.dim())));
        }
        Ok(p.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let e = HashedNgramEmbedder::default();
        let a = e.embed("Natalia sold clips to 48 friends").unwrap();
        assert_eq!(a, e.embed("Natalia sold clips to 48 friends").unwrap());
        assert_eq!(a.len(), 256);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_zero() {
        let e = HashedNgramEmbedder::default();
        assert!(e.embed("").unwrap().iter().all(|&x| x == 0.0));
        assert!(e.embed("   ").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_word_changes_vector() {
        let e = HashedNgramEmbedder::default();
        let a = e.embed("how many apples are left").unwrap();
        let b = e.embed("how many pears are left").unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn registry_checks_width() {
        let r = EmbedderRegistry::default();
        assert_eq!(r.resolve(HASHED_NGRAM_ID, 64).unwrap().dim(), 64);
        assert!(r.resolve("bert", 768).is_err());
        assert!(HashedNgramEmbedder::new(0).is_err());
    }
}
