//! Persisted joint-space embeddings (GBES) and brute-force top-k retrieval.
//!
//! Layout: magic `GBES`, version `u32`, modality tag (`u32` length + UTF-8),
//! count `u64`, dim `u32`, then `count` ids as `u64`, then the rows as `f32`.
//! All integers and floats are little-endian.

use std::fmt::Write as _;

use crate::codec::{Reader, Writer};
use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::retrieval::similarity_matrix;

pub const STORE_MAGIC: &[u8; 4] = b"GBES";
pub const STORE_VERSION: u32 = 1;
pub const TOP_K_CSV_HEADER: &str = "query_id,rank,gallery_id,similarity";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub modality: String,
    pub ids: Vec<u64>,
    /// Unit-norm rows, rounded to `f32`.
    pub embeddings: Matrix,
}

impl EmbeddingStore {
    pub fn new(modality: impl Into<String>, ids: Vec<u64>, embeddings: Matrix) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::contract(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                embeddings.rows()
            )));
        }
        Ok(EmbeddingStore {
            modality: modality.into(),
            ids,
            embeddings,
        })
    }

    /// Encodes and normalizes `observations` into the joint space.
    pub fn embed(encoder: &MlpEncoder, modality: &str, ids: &[u64], observations: &Matrix) -> Result<Self> {
        let mut e = encoder.forward(observations)?.l2_normalize_rows()?;
        e.round_to_f32();
        Self::new(modality, ids.to_vec(), e)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.str(&self.modality);
        w.u64(self.ids.len() as u64);
        w.usize32(self.dim());
        for &id in &self.ids {
            w.u64(id);
        }
        w.matrix_f32(&self.embeddings);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(STORE_MAGIC)?;
        r.version(STORE_VERSION)?;
        let modality = r.str("modality tag")?;
        let count = r.count("embedding count", 8)?;
        let dim_at = r.offset();
        let dim = r.u32("embedding dim")? as usize;
        if dim == 0 {
            return Err(Error::format(dim_at, "zero embedding dim"));
        }
        let ids = (0..count).map(|_| r.u64("id")).collect::<Result<Vec<_>>>()?;
        let embeddings = r.matrix_f32(count, dim, "embeddings")?;
        r.finish()?;
        Self::new(modality, ids, embeddings)
    }
}

/// One retrieved gallery item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub gallery_id: u64,
    pub similarity: f64,
}

/// The `k` most similar gallery items for every query, best first. Ties go
/// to the lower gallery position.
pub fn top_k(queries: &EmbeddingStore, gallery: &EmbeddingStore, k: usize) -> Result<Vec<Vec<Hit>>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::config(format!(
            "query store has dim {} but gallery store has dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if k == 0 || k > gallery.len() {
        return Err(Error::config(format!(
            "k must lie in 1..={}, got {k}",
            gallery.len()
        )));
    }
    let sim = similarity_matrix(&queries.embeddings, &gallery.embeddings)?;
    Ok((0..sim.rows())
        .map(|q| {
            let row = sim.row(q);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order
                .into_iter()
                .take(k)
                .map(|j| Hit {
                    gallery_id: gallery.ids[j],
                    similarity: row[j],
                })
                .collect()
        })
        .collect())
}

pub fn top_k_csv(queries: &EmbeddingStore, hits: &[Vec<Hit>]) -> String {
    let mut out = String::from(TOP_K_CSV_HEADER);
    out.push('\n');
    for (q, list) in hits.iter().enumerate() {
        for (rank, h) in list.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", queries.ids[q], rank + 1, h.gallery_id, h.similarity);
        }
    }
    out
}
