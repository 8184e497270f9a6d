//! Little-endian binary containers for embeddings (`EMB1`) and weight
//! matrices (`MAT1`).
//!
//! ```text
//! EMB1: magic[4] u32 dim u32 count { u16 id_len, id[id_len], f32 x dim } x count
//! MAT1: magic[4] u32 rows u32 cols f32 x rows*cols (row-major)
//! ```
//!
//! Readers reject trailing bytes.

use std::io::{Read, Write};

use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const MATRIX_MAGIC: &[u8; 4] = b"MAT1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("entry {index} has dimension {found}, container dimension is {expected}")]
    DimMismatch { index: usize, expected: usize, found: usize },
    #[error("id {0:?} is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("id at entry {0} is not valid UTF-8")]
    InvalidId(usize),
    #[error("matrix storage has {found} values, shape requires {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("value {0} does not fit in u32")]
    TooLarge(usize),
}

/// A decoded `EMB1` file: entries in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

/// A decoded `MAT1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

fn u32_of(n: usize) -> Result<u32, ContainerError> {
    u32::try_from(n).map_err(|_| ContainerError::TooLarge(n))
}

pub fn write_embeddings<W: Write>(file: &EmbeddingFile, mut w: W) -> Result<(), ContainerError> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&u32_of(file.dim)?.to_le_bytes())?;
    w.write_all(&u32_of(file.entries.len())?.to_le_bytes())?;
    for (index, (id, values)) in file.entries.iter().enumerate() {
        if values.len() != file.dim {
            return Err(ContainerError::DimMismatch {
                index,
                expected: file.dim,
                found: values.len(),
            });
        }
        let id_len = u16::try_from(id.len()).map_err(|_| ContainerError::IdTooLong(id.clone()))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<EmbeddingFile, ContainerError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_embeddings(&buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile, ContainerError> {
    let mut cur = Cursor::new(bytes);
    cur.magic(EMBEDDING_MAGIC)?;
    let dim = cur.u32("dim")? as usize;
    let count = cur.u32("count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| ContainerError::InvalidId(index))?
            .to_owned();
        let values = cur.f32s(dim, "vector")?;
        entries.push((id, values));
    }
    cur.finish()?;
    Ok(EmbeddingFile { dim, entries })
}

pub fn write_matrix<W: Write>(m: &MatrixFile, mut w: W) -> Result<(), ContainerError> {
    let expected = m.rows * m.cols;
    if m.values.len() != expected {
        return Err(ContainerError::ShapeMismatch {
            expected,
            found: m.values.len(),
        });
    }
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&u32_of(m.rows)?.to_le_bytes())?;
    w.write_all(&u32_of(m.cols)?.to_le_bytes())?;
    for v in &m.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<MatrixFile, ContainerError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_matrix(&buf)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<MatrixFile, ContainerError> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MATRIX_MAGIC)?;
    let rows = cur.u32("rows")? as usize;
    let cols = cur.u32("cols")? as usize;
    let values = cur.f32s(rows * cols, "matrix values")?;
    cur.finish()?;
    Ok(MatrixFile { rows, cols, values })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated(what))?;
        let slice = self.bytes.get(self.pos..end).ok_or(ContainerError::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), ContainerError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if &found != expected {
            return Err(ContainerError::BadMagic {
                found,
                expected: *expected,
            });
        }
        Ok(())
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, ContainerError> {
        let len = n.checked_mul(4).ok_or(ContainerError::Truncated(what))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<(), ContainerError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ContainerError::TrailingBytes(n)),
        }
    }
}
