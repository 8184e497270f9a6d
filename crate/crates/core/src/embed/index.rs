use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dot, norm, EmbedError, EmbeddingVector, Modality};
use crate::container::EmbeddingFile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Neighbors by descending score; equal scores by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub neighbors: Vec<Neighbor>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.neighbors.iter().map(|n| n.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

pub(crate) fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Read access used by exemplar retrieval.
pub trait SearchIndex: Sync {
    fn dim(&self) -> usize;
    fn vector(&self, id: &str) -> Option<&[f32]>;
    fn topk(&self, query: &[f32], k: usize, exclude: &[&str]) -> Result<RetrievalResult, EmbedError>;
}

/// Mutable during bulk insert; [`IndexBuilder::freeze`] turns it into a
/// shareable [`EmbeddingIndex`].
pub struct IndexBuilder {
    modality: Modality,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    positions: HashMap<String, usize>,
}

impl IndexBuilder {
    pub fn new(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: EmbeddingVector) -> Result<(), EmbedError> {
        let id = id.into();
        if vector.dim() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                found: vector.dim(),
            });
        }
        if self.positions.contains_key(&id) {
            return Err(EmbedError::DuplicateId(id));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector.as_slice());
        Ok(())
    }

    pub fn freeze(self) -> EmbeddingIndex {
        let norms = self.data.chunks_exact(self.dim.max(1)).map(norm).collect();
        EmbeddingIndex {
            modality: self.modality,
            dim: self.dim,
            ids: self.ids,
            data: self.data,
            norms,
            positions: self.positions,
        }
    }
}

/// Immutable exact-search index.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    modality: Modality,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn from_file(modality: Modality, file: EmbeddingFile) -> Result<Self, EmbedError> {
        let mut b = IndexBuilder::new(modality, file.dim);
        for (id, v) in file.entries {
            b.insert(id, EmbeddingVector::new(v)?)?;
        }
        Ok(b.freeze())
    }

    pub fn to_file(&self) -> EmbeddingFile {
        EmbeddingFile {
            dim: self.dim,
            entries: self
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.row(i).to_vec()))
                .collect(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<f64, EmbedError> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        if query.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(qn)
    }

    /// Best `k` of rows `range`, ranked.
    fn scan(&self, query: &[f32], qn: f64, range: std::ops::Range<usize>, k: usize, exclude: &HashSet<&str>) -> Vec<Neighbor> {
        let mut hits: Vec<Neighbor> = range
            .filter(|&i| !exclude.contains(self.ids[i].as_str()))
            .map(|i| Neighbor {
                id: self.ids[i].clone(),
                score: (dot(query, self.row(i)) / (qn * self.norms[i])).clamp(-1.0, 1.0),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank);
            hits.truncate(k);
        }
        hits.sort_by(rank);
        hits
    }

    /// Exact top-k by cosine, single pass over every entry.
    pub fn topk(&self, query: &[f32], k: usize, exclude: &[&str]) -> Result<RetrievalResult, EmbedError> {
        let qn = self.check_query(query, k)?;
        let exclude: HashSet<&str> = exclude.iter().copied().collect();
        let neighbors = self.scan(query, qn, 0..self.len(), k, &exclude);
        if neighbors.is_empty() {
            return Err(EmbedError::EmptyIndex);
        }
        Ok(RetrievalResult { neighbors })
    }

    /// Same result as [`Self::topk`], scanning `partitions` slices in
    /// parallel and merging their local winners.
    pub fn topk_partitioned(
        &self,
        query: &[f32],
        k: usize,
        exclude: &[&str],
        partitions: usize,
    ) -> Result<RetrievalResult, EmbedError> {
        let qn = self.check_query(query, k)?;
        let exclude: HashSet<&str> = exclude.iter().copied().collect();
        let n = self.len();
        let chunk = n.div_ceil(partitions.max(1)).max(1);
        let mut merged: Vec<Neighbor> = (0..n)
            .step_by(chunk)
            .collect::<Vec<_>>()
            .into_par_iter()
            .flat_map_iter(|start| self.scan(query, qn, start..(start + chunk).min(n), k, &exclude))
            .collect();
        merged.sort_by(rank);
        merged.truncate(k);
        if merged.is_empty() {
            return Err(EmbedError::EmptyIndex);
        }
        Ok(RetrievalResult { neighbors: merged })
    }
}

impl SearchIndex for EmbeddingIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, id: &str) -> Option<&[f32]> {
        self.positions.get(id).map(|&i| self.row(i))
    }

    fn topk(&self, query: &[f32], k: usize, exclude: &[&str]) -> Result<RetrievalResult, EmbedError> {
        EmbeddingIndex::topk(self, query, k, exclude)
    }
}
