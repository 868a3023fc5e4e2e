//! Built-in prompt embedder.
//!
//! Each whitespace-separated token maps to a pseudo-random unit vector keyed by
//! `(token, seed)`. The empty prompt maps to a single all-zero token, which is
//! the null prompt used for unconditional guidance and source inversion.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::PromptEmbedding;

pub fn embed_text(text: &str, text_dim: usize, seed: u64) -> PromptEmbedding {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return PromptEmbedding::new(Array2::zeros((1, text_dim)), text)
            .expect("one token");
    }
    let mut tokens = Array2::zeros((words.len(), text_dim));
    for (mut row, word) in tokens.rows_mut().into_iter().zip(&words) {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(word.to_lowercase().as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut norm = 0.0f32;
        for x in row.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
            norm += *x * *x;
        }
        let norm = norm.sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    PromptEmbedding::new(tokens, text).expect("non-empty")
}
