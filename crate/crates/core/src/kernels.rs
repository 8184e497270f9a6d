//! Forward-pass reference kernels: temporal and media position embeddings,
//! a single-head perceiver resampler read, tanh-gated cross-attention and
//! LoRA. Everything is f64 and allocation-per-call; these exist to check
//! properties, not to be fast.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::container::MatrixFile;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("{frames} frames exceed the temporal table's {max} rows")]
    TooManyFrames { frames: usize, max: usize },
    #[error("{media} media items exceed the media table's {max} rows")]
    TooManyMedia { media: usize, max: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid LoRA rank {rank} for {d_in}->{d_out}")]
    InvalidRank { rank: usize, d_in: usize, d_out: usize },
    #[error("position table must have at least one row")]
    EmptyTable,
}

fn mismatch(what: impl Into<String>) -> KernelError {
    KernelError::DimMismatch(what.into())
}

fn ensure_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &'static str) -> Result<(), KernelError> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KernelError::NonFinite(what))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Temporal,
    Media,
}

/// Learned per-position vectors: one row per frame (temporal) or per
/// media item in the prompt (media).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    kind: PositionKind,
    values: Array2<f64>,
}

impl PositionTable {
    pub fn new(kind: PositionKind, values: Array2<f64>) -> Result<Self, KernelError> {
        if values.nrows() == 0 {
            return Err(KernelError::EmptyTable);
        }
        ensure_finite(values.iter(), "position table")?;
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> PositionKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

fn add_positions(x: &Array3<f64>, table: &PositionTable) -> Result<Array3<f64>, KernelError> {
    let (items, _, d) = x.dim();
    if d != table.dim() {
        return Err(mismatch(format!("features have dim {d}, table has {}", table.dim())));
    }
    if items > table.rows() {
        return Err(match table.kind {
            PositionKind::Temporal => KernelError::TooManyFrames {
                frames: items,
                max: table.rows(),
            },
            PositionKind::Media => KernelError::TooManyMedia {
                media: items,
                max: table.rows(),
            },
        });
    }
    let mut out = x.clone();
    for (i, mut block) in out.outer_iter_mut().enumerate() {
        block += &table.values.row(i);
    }
    Ok(out)
}

/// `out[t, n, :] = frames[t, n, :] + table[t, :]`
pub fn add_temporal_embeddings(frames: &Array3<f64>, table: &PositionTable) -> Result<Array3<f64>, KernelError> {
    if table.kind != PositionKind::Temporal {
        return Err(mismatch("expected a temporal table"));
    }
    add_positions(frames, table)
}

/// `out[m, l, :] = media[m, l, :] + table[m, :]`
pub fn add_media_embeddings(media: &Array3<f64>, table: &PositionTable) -> Result<Array3<f64>, KernelError> {
    if table.kind != PositionKind::Media {
        return Err(mismatch("expected a media table"));
    }
    add_positions(media, table)
}

/// Flattens `(T, N, d)` frame features into `(T*N, d)` tokens.
pub fn flatten_frames(frames: &Array3<f64>) -> Array2<f64> {
    let (t, n, d) = frames.dim();
    frames
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((t * n, d))
        .expect("standard layout reshape")
}

/// Single-head attention projections. Queries come from a `d_query` stream,
/// keys/values from a `d_context` stream; the output projects back to
/// `d_query` so it can be added residually.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// (d_query, d_k)
    pub wq: Array2<f64>,
    /// (d_context, d_k)
    pub wk: Array2<f64>,
    /// (d_context, d_v)
    pub wv: Array2<f64>,
    /// (d_v, d_query)
    pub wo: Array2<f64>,
}

impl AttentionWeights {
    pub fn d_query(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_context(&self) -> usize {
        self.wk.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.wq.ncols()
    }

    fn check(&self, query: &Array2<f64>, context: &Array2<f64>) -> Result<(), KernelError> {
        let dk = self.wq.ncols();
        let dv = self.wv.ncols();
        if self.wk.ncols() != dk {
            return Err(mismatch(format!("wq has d_k {dk}, wk has {}", self.wk.ncols())));
        }
        if self.wv.nrows() != self.wk.nrows() {
            return Err(mismatch("wk and wv disagree on context dim"));
        }
        if self.wo.nrows() != dv || self.wo.ncols() != self.wq.nrows() {
            return Err(mismatch(format!(
                "wo is {:?}, expected ({dv}, {})",
                self.wo.dim(),
                self.wq.nrows()
            )));
        }
        if query.ncols() != self.wq.nrows() {
            return Err(mismatch(format!("query dim {} vs wq rows {}", query.ncols(), self.wq.nrows())));
        }
        if context.ncols() != self.wk.nrows() {
            return Err(mismatch(format!("context dim {} vs wk rows {}", context.ncols(), self.wk.nrows())));
        }
        if context.nrows() == 0 {
            return Err(mismatch("context has no tokens"));
        }
        ensure_finite(query.iter(), "query")?;
        ensure_finite(context.iter(), "context")
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `softmax((query·Wq)(context·Wk)ᵀ / √d_k)`, shape (S, L).
pub fn attention_weights(
    query: &Array2<f64>,
    context: &Array2<f64>,
    w: &AttentionWeights,
) -> Result<Array2<f64>, KernelError> {
    w.check(query, context)?;
    let q = query.dot(&w.wq);
    let k = context.dot(&w.wk);
    let scale = (w.d_k() as f64).sqrt();
    Ok(softmax_rows(&(q.dot(&k.t()) / scale)))
}

/// Attention read without residual: `attn · (context·Wv) · Wo`.
pub fn cross_attention(query: &Array2<f64>, context: &Array2<f64>, w: &AttentionWeights) -> Result<Array2<f64>, KernelError> {
    let attn = attention_weights(query, context, w)?;
    let v = context.dot(&w.wv);
    Ok(attn.dot(&v).dot(&w.wo))
}

/// One resampler read: latents attend to all visual tokens, plus the latent
/// residual. Output is `(L, d)` whatever the number of visual tokens.
pub fn perceiver_resample(
    visual: &Array2<f64>,
    latents: &Array2<f64>,
    w: &AttentionWeights,
) -> Result<Array2<f64>, KernelError> {
    Ok(latents + &cross_attention(latents, visual, w)?)
}

/// `text + tanh(gate) · CrossAttn(text → visual)`
pub fn gated_cross_attention(
    text: &Array2<f64>,
    visual: &Array2<f64>,
    gate: f64,
    w: &AttentionWeights,
) -> Result<Array2<f64>, KernelError> {
    if !gate.is_finite() {
        return Err(KernelError::NonFinite("gate"));
    }
    let update = cross_attention(text, visual, w)?;
    Ok(text + &(update * gate.tanh()))
}

/// Low-rank update `(alpha / r) · B · A` added to a frozen linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// (r, d_in)
    a: Array2<f64>,
    /// (d_out, r)
    b: Array2<f64>,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Array2<f64>, b: Array2<f64>, alpha: f64) -> Result<Self, KernelError> {
        let (rank, d_in) = a.dim();
        let d_out = b.nrows();
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(KernelError::InvalidRank { rank, d_in, d_out });
        }
        if b.ncols() != rank {
            return Err(mismatch(format!("B has {} columns, rank is {rank}", b.ncols())));
        }
        ensure_finite(a.iter().chain(b.iter()).chain([&alpha]), "LoRA adapter")?;
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    /// `(alpha / r) · B · (A · x)`
    pub fn delta(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, KernelError> {
        if x.len() != self.d_in() {
            return Err(mismatch(format!("input has {} entries, adapter expects {}", x.len(), self.d_in())));
        }
        Ok(self.b.dot(&self.a.dot(&x)) * (self.alpha / self.rank() as f64))
    }
}

/// `W·x + (alpha/r)·B·(A·x)`
pub fn lora_forward(x: ArrayView1<f64>, w: ArrayView2<f64>, adapter: &LoraAdapter) -> Result<Array1<f64>, KernelError> {
    if w.ncols() != x.len() || w.nrows() != adapter.d_out() {
        return Err(mismatch(format!(
            "W is {:?}, x has {}, adapter maps {}->{}",
            w.dim(),
            x.len(),
            adapter.d_in(),
            adapter.d_out()
        )));
    }
    Ok(w.dot(&x) + adapter.delta(x)?)
}

/// Permutes the frame axis of `(T, N, d)` features.
pub fn permute_frames(frames: &Array3<f64>, order: &[usize]) -> Array3<f64> {
    frames.select(Axis(0), order)
}

pub fn matrix_from_file(m: &MatrixFile) -> Array2<f64> {
    Array2::from_shape_fn((m.rows, m.cols), |(i, j)| f64::from(m.values[i * m.cols + j]))
}

/// Narrows to f32 for storage.
pub fn matrix_to_file(m: &Array2<f64>) -> MatrixFile {
    MatrixFile {
        rows: m.nrows(),
        cols: m.ncols(),
        values: m.iter().map(|&v| v as f32).collect(),
    }
}
