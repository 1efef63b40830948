//! Text embedders used by the subspace and caption baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{DiorError, Result};

/// String-to-vector contract.
pub trait TextEmbedder: Send + Sync {
    fn embedder_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

/// Bag-of-words embedder: every lowercased word maps to a fixed Gaussian
/// vector derived from the seed and the word, and a text is the sum of its
/// word vectors.
#[derive(Debug, Clone)]
pub struct HashTextEmbedder {
    id: String,
    seed: u64,
    dim: usize,
}

impl HashTextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DiorError::Input("text embedder dimension must be positive".into()));
        }
        Ok(Self {
            id: format!("hash-text-s{seed}-d{dim}"),
            seed,
            dim,
        })
    }

    fn word_vector(&self, word: &str) -> impl Iterator<Item = f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(move |_| StandardNormal.sample(&mut rng))
    }
}

impl TextEmbedder for HashTextEmbedder {
    fn embedder_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(DiorError::Input(format!("no words to embed in `{text}`")));
        }
        let mut out = vec![0f32; self.dim];
        for w in &words {
            for (o, v) in out.iter_mut().zip(self.word_vector(w)) {
                *o += v;
            }
        }
        Ok(out)
    }
}
