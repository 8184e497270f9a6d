//! Retrieval-based in-context exemplar selection.
//!
//! For a triplet, search its own text and video embeddings for the `k`
//! nearest other triplets in each space. `Union` merges both lists (at
//! most `2k` candidates); `TextOnly` uses the text space alone.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::index::rank;
use super::{EmbedError, Neighbor, RetrievalResult, SearchIndex};
use crate::tasks::InstructionTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    TextOnly,
    Union,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::TextOnly => "text_only",
            RetrievalMode::Union => "union",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text_only" => Ok(Self::TextOnly),
            "union" => Ok(Self::Union),
            other => Err(format!("unknown retrieval mode {other:?} (expected text_only or union)")),
        }
    }
}

/// Text fed to the text encoder: instruction and answer on two lines.
pub fn text_input(t: &InstructionTriplet) -> String {
    format!("{}\n{}", t.instruction, t.answer)
}

fn search(index: &dyn SearchIndex, id: &str, k: usize) -> Result<RetrievalResult, EmbedError> {
    let query = index.vector(id).ok_or_else(|| EmbedError::UnknownId(id.to_owned()))?;
    index.topk(query, k, &[id])
}

/// Exemplar candidates for `z`, which must be present in the consulted
/// indices under its own id. `z` itself is always excluded. In
/// `TextOnly` mode the video index is never touched.
pub fn retrieve_exemplars(
    z: &InstructionTriplet,
    text_index: &dyn SearchIndex,
    video_index: &dyn SearchIndex,
    k: usize,
    mode: RetrievalMode,
) -> Result<RetrievalResult, EmbedError> {
    let text = search(text_index, &z.id, k)?;
    match mode {
        RetrievalMode::TextOnly => Ok(text),
        RetrievalMode::Union => {
            let video = search(video_index, &z.id, k)?;
            let mut best: HashMap<String, f64> = HashMap::new();
            for n in text.neighbors.into_iter().chain(video.neighbors) {
                best.entry(n.id)
                    .and_modify(|s| *s = s.max(n.score))
                    .or_insert(n.score);
            }
            let mut neighbors: Vec<Neighbor> = best.into_iter().map(|(id, score)| Neighbor { id, score }).collect();
            neighbors.sort_by(rank);
            Ok(RetrievalResult { neighbors })
        }
    }
}
