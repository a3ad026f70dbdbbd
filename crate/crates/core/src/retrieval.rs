//! Cross-modal retrieval by cosine similarity.
//!
//! Query `i` and gallery item `i` always describe the same location, so the
//! ground truth of every query is the gallery row with its own index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::rng_for;
use crate::world::EvalBundle;

pub const REPORT_CSV_HEADER: &str = "query_modality,gallery_modality,N,k,recall_percent,median_rank,baseline";
pub const RANKS_CSV_HEADER: &str = "query_modality,gallery_modality,baseline,query_index,rank";

/// `sim[i][j]` = cosine similarity of query `i` and gallery item `j`.
pub fn similarity_matrix(queries: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    if queries.cols() != gallery.cols() {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            left: queries.shape(),
            right: gallery.shape(),
        });
    }
    let q = queries.l2_normalize_rows()?;
    let g = gallery.l2_normalize_rows()?;
    q.matmul(&g.transpose())?.map(|x| x.clamp(-1.0, 1.0))
}

/// 1-based rank of each query's true gallery item under descending
/// similarity. Ties go to the lower gallery index.
pub fn rank_of_truth(sim: &Matrix, truth: &[usize]) -> Result<Vec<usize>> {
    if truth.len() != sim.rows() {
        return Err(Error::contract(format!(
            "{} truth indices for {} queries",
            truth.len(),
            sim.rows()
        )));
    }
    truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= sim.cols() {
                return Err(Error::contract(format!(
                    "truth index {t} for query {q} outside gallery of {}",
                    sim.cols()
                )));
            }
            let row = sim.row(q);
            let target = row[t];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < t))
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

/// Percentage of ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::contract("recall of an empty rank list"));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Median of the ranks; the mean of the two central values for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::contract("median of an empty rank list"));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Embeddings from the trained encoders.
    Model,
    /// Seeded Gaussian embeddings of the same shape.
    Random,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Model => "model",
            Baseline::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub query_modality: String,
    pub gallery_modality: String,
    pub gallery_size: usize,
    pub ranks: Vec<usize>,
    /// `(k, recall percent)` in the order requested.
    pub recalls: Vec<(usize, f64)>,
    pub median_rank: f64,
    pub baseline: Baseline,
}

impl RetrievalReport {
    pub fn from_similarity(
        query_modality: &str,
        gallery_modality: &str,
        sim: &Matrix,
        ks: &[usize],
        baseline: Baseline,
    ) -> Result<Self> {
        if sim.rows() != sim.cols() {
            return Err(Error::contract(format!(
                "paired retrieval needs one gallery item per query, got {}",
                sim.shape()
            )));
        }
        let truth: Vec<usize> = (0..sim.rows()).collect();
        let ranks = rank_of_truth(sim, &truth)?;
        let recalls = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RetrievalReport {
            query_modality: query_modality.into(),
            gallery_modality: gallery_modality.into(),
            gallery_size: sim.cols(),
            median_rank: median_rank(&ranks)?,
            ranks,
            recalls,
            baseline,
        })
    }

    /// Recall at `k`, computed from the stored ranks if `k` was not requested.
    pub fn recall(&self, k: usize) -> f64 {
        self.recalls
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|&(_, r)| r)
            .unwrap_or_else(|| recall_at_k(&self.ranks, k).unwrap_or(0.0))
    }
}

/// Reports for every ordered pair of bundle modalities, each followed by its
/// random baseline.
///
/// `encoders` maps modality name to the encoder that embeds it.
pub fn evaluate_all_pairs(
    encoders: &BTreeMap<String, MlpEncoder>,
    bundle: &EvalBundle,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<RetrievalReport>> {
    if bundle.is_empty() {
        return Err(Error::contract("evaluation bundle is empty"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config(format!("k values must be positive and non-empty, got {ks:?}")));
    }
    let mut embeddings = BTreeMap::new();
    for m in bundle.modalities() {
        let enc = encoders
            .get(m)
            .ok_or_else(|| Error::config(format!("no encoder for modality {m:?}")))?;
        let obs = bundle.get(m).expect("bundle modality");
        embeddings.insert(m.clone(), enc.forward(obs)?);
    }
    let mut reports = Vec::new();
    for q in bundle.modalities() {
        for g in bundle.modalities() {
            if q == g {
                continue;
            }
            let (qe, ge) = (&embeddings[q], &embeddings[g]);
            if qe.cols() != ge.cols() {
                return Err(Error::config(format!(
                    "encoders for {q:?} and {g:?} map to different joint widths {} and {}",
                    qe.cols(),
                    ge.cols()
                )));
            }
            let sim = similarity_matrix(qe, ge)?;
            reports.push(RetrievalReport::from_similarity(q, g, &sim, ks, Baseline::Model)?);
            let (rq, rg) = random_embeddings(seed, q, g, qe.rows(), qe.cols())?;
            let sim = similarity_matrix(&rq, &rg)?;
            reports.push(RetrievalReport::from_similarity(q, g, &sim, ks, Baseline::Random)?);
        }
    }
    Ok(reports)
}

/// Gaussian query and gallery embeddings for the random baseline of one pair.
pub fn random_embeddings(seed: u64, query: &str, gallery: &str, n: usize, dim: usize) -> Result<(Matrix, Matrix)> {
    let mut rng = rng_for(seed, &format!("baseline:{query}:{gallery}"));
    let q = Matrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal))?;
    let g = Matrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal))?;
    Ok((q, g))
}

/// Finds the report for an ordered pair.
pub fn find_report<'a>(
    reports: &'a [RetrievalReport],
    query: &str,
    gallery: &str,
    baseline: Baseline,
) -> Option<&'a RetrievalReport> {
    reports
        .iter()
        .find(|r| r.query_modality == query && r.gallery_modality == gallery && r.baseline == baseline)
}

/// One CSV row per (report, k).
pub fn reports_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for &(k, recall) in &r.recalls {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.query_modality,
                r.gallery_modality,
                r.gallery_size,
                k,
                recall,
                r.median_rank,
                r.baseline.as_str()
            );
        }
    }
    out
}

/// Per-query rank dump.
pub fn ranks_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from(RANKS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (i, rank) in r.ranks.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.query_modality,
                r.gallery_modality,
                r.baseline.as_str(),
                i,
                rank
            );
        }
    }
    out
}
