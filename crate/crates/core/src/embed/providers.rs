use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EmbedError, EmbeddingVector};
use crate::container::EmbeddingFile;
use crate::seed::derive_seed;

/// Something to embed: `id` for lookups, `content` for content-derived
/// providers (text for the text space, a video reference for video).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedItem {
    pub id: String,
    pub content: String,
}

impl EmbedItem {
    pub fn new(id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            content: content.into(),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbedError>;
}

/// Embeds through `provider` and checks the result against `dim`.
pub fn embed(item: &EmbedItem, provider: &dyn EmbeddingProvider, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if provider.dim() != dim {
        return Err(EmbedError::DimMismatch {
            expected: dim,
            found: provider.dim(),
        });
    }
    let v = provider.embed(item)?;
    if v.dim() != dim {
        return Err(EmbedError::DimMismatch { expected: dim, found: v.dim() });
    }
    Ok(v)
}

/// Precomputed vectors looked up by id.
pub struct FileProvider {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl FileProvider {
    pub fn new(file: EmbeddingFile) -> Self {
        Self {
            dim: file.dim,
            vectors: file.entries.into_iter().collect(),
        }
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbedError> {
        let v = self
            .vectors
            .get(&item.id)
            .ok_or_else(|| EmbedError::ProviderUnavailable(format!("no stored vector for {:?}", item.id)))?;
        EmbeddingVector::new(v.clone())
    }
}

/// Pseudo-random unit-range vectors seeded by the item content. Stands in
/// for an opaque encoder: equal content gives equal vectors, nothing else
/// is preserved.
pub struct HashedRandomProvider {
    dim: usize,
    salt: u64,
}

impl HashedRandomProvider {
    pub fn new(dim: usize, salt: u64) -> Self {
        Self { dim, salt }
    }
}

impl EmbeddingProvider for HashedRandomProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbedError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.salt, &[&item.content]));
        let values = (0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingVector::new(values)
    }
}

/// Signed feature hashing of lowercase word unigrams and bigrams. Texts
/// sharing words land close together, which is enough for offline runs.
pub struct FeatureHashProvider {
    dim: usize,
}

impl FeatureHashProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn bump(&self, out: &mut [f32], feature: &str, weight: f32) {
        let d = Sha256::digest(feature.as_bytes());
        let bucket = u64::from_le_bytes(d[..8].try_into().unwrap()) % self.dim as u64;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket as usize] += sign * weight;
    }
}

impl EmbeddingProvider for FeatureHashProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbedError> {
        let words: Vec<String> = item
            .content
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut out = vec![0.0f32; self.dim];
        for w in &words {
            self.bump(&mut out, w, 1.0);
        }
        for pair in words.windows(2) {
            self.bump(&mut out, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        EmbeddingVector::new(out)
    }
}
