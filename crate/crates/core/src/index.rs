//! Half-precision dense passage index with exact inner-product search.
//!
//! File layout (`R2D2EMB1`, all little-endian):
//!
//! ```text
//! magic   8 bytes   "R2D2EMB1"
//! n       u32       number of rows
//! d       u32       dimension
//! ids     n × u64   passage id of each row
//! values  n·d × binary16, row-major
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PassageId;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"R2D2EMB1";

const HEADER_LEN: usize = 16;
const PAR_CHUNK_ROWS: usize = 4096;

/// Rounds to the nearest binary16 (ties to even). NaN and values that round
/// to infinity are rejected.
pub fn to_fp16(x: f32) -> Result<f16> {
    if x.is_nan() {
        return Err(Error::NaN);
    }
    let h = f16::from_f32(x);
    if h.is_infinite() {
        return Err(Error::Overflow(x));
    }
    Ok(h)
}

pub fn from_fp16(h: f16) -> f32 {
    h.to_f32()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub passage_id: PassageId,
    pub score: f32,
}

/// `n × d` binary16 embeddings, one row per passage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    row_ids: Vec<PassageId>,
    values: Vec<f16>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, row_ids: Vec<PassageId>, values: Vec<f16>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let expected = row_ids
            .len()
            .checked_mul(dim)
            .ok_or_else(|| Error::invalid("n·d overflows"))?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(if v.is_nan() { Error::NaN } else { Error::Overflow(v.to_f32()) });
        }
        let mut seen = HashSet::with_capacity(row_ids.len());
        for &id in &row_ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(EmbeddingMatrix { dim, row_ids, values })
    }

    /// Quantizes f32 rows. Fails on NaN or on values beyond the binary16 range.
    pub fn from_f32_rows(dim: usize, row_ids: Vec<PassageId>, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.len() != row_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: row_ids.len(),
                got: rows.len(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for &x in row {
                values.push(to_fp16(x)?);
            }
        }
        Self::new(dim, row_ids, values)
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_ids(&self) -> &[PassageId] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f16] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Row widened to f32.
    pub fn row_f32(&self, i: usize) -> Vec<f32> {
        self.row(i).iter().map(|h| h.to_f32()).collect()
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * 8 + self.values.len() * 2);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in &self.row_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != INDEX_MAGIC {
            return Err(Error::Format("missing R2D2EMB1 magic".into()));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(2))
            .and_then(|v| v.checked_add(n.checked_mul(8)?))
            .ok_or_else(|| Error::Format(format!("header n={n} d={d} overflows")))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < payload {
            return Err(Error::Format(format!(
                "truncated payload: header needs {payload} bytes, file has {}",
                body.len()
            )));
        }
        if body.len() > payload {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - payload)));
        }
        let (ids, vals) = body.split_at(n * 8);
        let row_ids = ids
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = vals
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        Self::new(d, row_ids, values).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Inner product of every row with `query`, fp32 accumulation.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f32>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("query contains a non-finite value"));
        }
        let dim = self.dim;
        Ok(self
            .values
            .par_chunks(dim * PAR_CHUNK_ROWS)
            .flat_map_iter(|block| {
                block.chunks_exact(dim).map(|row| {
                    row.iter()
                        .zip(query)
                        .map(|(v, q)| v.to_f32() * q)
                        .sum::<f32>()
                })
            })
            .collect())
    }

    /// The `k` largest inner products, score descending, ties by ascending id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalResult>> {
        if k > self.len() {
            return Err(Error::invalid(format!("k={k} exceeds index size {}", self.len())));
        }
        let scores = self.scores(query)?;
        let mut hits: Vec<RetrievalResult> = scores
            .into_iter()
            .zip(&self.row_ids)
            .map(|(score, &passage_id)| RetrievalResult { passage_id, score })
            .collect();
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        Ok(hits)
    }

    /// Rows whose id is in `keep`, original order preserved.
    pub fn subset(&self, keep: &HashSet<PassageId>) -> Result<Self> {
        let present: HashSet<PassageId> = self.row_ids.iter().copied().collect();
        if let Some(&missing) = keep.iter().find(|id| !present.contains(id)) {
            return Err(Error::UnknownId(missing));
        }
        let mut row_ids = Vec::with_capacity(keep.len());
        let mut values = Vec::with_capacity(keep.len() * self.dim);
        for (i, &id) in self.row_ids.iter().enumerate() {
            if keep.contains(&id) {
                row_ids.push(id);
                values.extend_from_slice(self.row(i));
            }
        }
        Ok(EmbeddingMatrix {
            dim: self.dim,
            row_ids,
            values,
        })
    }
}

fn rank_order(a: &RetrievalResult, b: &RetrievalResult) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}
