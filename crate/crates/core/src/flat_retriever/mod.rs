//! Exact top-k retrieval over a flat matrix of unit vectors.
//!
//! Rows are stored as `f32`, exactly as they are persisted, so a reloaded index
//! is bit-identical to the one that was built. Scores are computed in `f64` as
//! `dot(q, row) / ‖row‖`, which for unit queries is the cosine similarity.
//! Because every row and query is unit-norm, descending cosine order is the same
//! as ascending L2 distance order (`‖a − b‖² = 2 − 2·a·b`).
//!
//! Ties on score are broken by insertion order: the earlier document wins.

mod ir_metrics;
mod persist;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector};
use crate::kb_store::{Document, KnowledgeBase, Modality};
use crate::{Error, Result};

pub use ir_metrics::{read_qrels, read_trec_run, retrieval_metrics, IrMetrics, Qrels, Runs};
pub use persist::{read_manifest, IndexManifest};

pub const DEFAULT_K: usize = 3;

/// Below this many rows a search runs on the calling thread.
const PARALLEL_SCAN_MIN_ROWS: usize = 16_384;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    kb_name: String,
    modality: Modality,
    dim: usize,
    fingerprint: String,
    ids: Vec<String>,
    rows: Vec<f32>,
    norms: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f64,
    idx: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
/// Greater means better: higher score, then lower insertion index.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl FlatIndex {
    /// Builds an index from already-embedded rows.
    pub fn from_vectors(
        kb_name: impl Into<String>,
        modality: Modality,
        dim: usize,
        fingerprint: impl Into<String>,
        ids: Vec<String>,
        vectors: &[EmbeddingVector],
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Invalid(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let mut rows = Vec::with_capacity(ids.len() * dim);
        for v in vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
            rows.extend(v.as_slice().iter().map(|&x| x as f32));
        }
        Self::from_parts(kb_name.into(), modality, dim, fingerprint.into(), ids, rows)
    }

    fn from_parts(
        kb_name: String,
        modality: Modality,
        dim: usize,
        fingerprint: String,
        ids: Vec<String>,
        rows: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("index dim must be positive".into()));
        }
        debug_assert_eq!(rows.len(), ids.len() * dim);
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    line: 0,
                });
            }
        }
        let norms: Vec<f64> = rows
            .chunks_exact(dim)
            .map(|r| r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|n| (n - 1.0).abs() > UNIT_TOLERANCE) {
            return Err(Error::Invalid(format!(
                "row {:?} has norm {} (expected unit)",
                ids[i], norms[i]
            )));
        }
        Ok(FlatIndex {
            kb_name,
            modality,
            dim,
            fingerprint,
            ids,
            rows,
            norms,
        })
    }

    pub fn build(kb: &KnowledgeBase, embedder: &Embedder) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::EmptyInput("knowledge base"));
        }
        let vectors = embedder.embed_documents(kb.documents())?;
        let ids = kb.documents().iter().map(|d| d.id.clone()).collect();
        Self::from_vectors(
            kb.name(),
            kb.modality(),
            embedder.dim(),
            embedder.fingerprint(),
            ids,
            &vectors,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn kb_name(&self) -> &str {
        &self.kb_name
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// The stored row as a unit query vector.
    pub fn row_vector(&self, i: usize) -> EmbeddingVector {
        let raw: Vec<f64> = self.row(i).iter().map(|&x| f64::from(x)).collect();
        crate::embedding::l2_normalize(&raw).expect("rows are unit-norm")
    }

    fn score(&self, q: &[f64], i: usize) -> f64 {
        let dot: f64 = self
            .row(i)
            .iter()
            .zip(q)
            .map(|(&r, &x)| f64::from(r) * x)
            .sum();
        (dot / self.norms[i]).clamp(-1.0, 1.0)
    }

    fn top_k_range(&self, q: &[f64], k: usize, range: std::ops::Range<usize>) -> Vec<Candidate> {
        let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
        for idx in range {
            let c = Candidate {
                score: self.score(q, idx),
                idx,
            };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(c));
            } else if heap.peek().is_some_and(|worst| c > worst.0) {
                heap.pop();
                heap.push(std::cmp::Reverse(c));
            }
        }
        heap.into_iter().map(|r| r.0).collect()
    }

    /// Returns the `min(k, len)` highest-scoring rows, best first.
    pub fn search(&self, q: &EmbeddingVector, k: usize) -> Result<Vec<ScoredDoc>> {
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.dim(),
            });
        }
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let q = q.as_slice();
        let n = self.len();
        let mut best = if n >= PARALLEL_SCAN_MIN_ROWS {
            let chunk = n.div_ceil(rayon::current_num_threads().max(1));
            (0..n)
                .into_par_iter()
                .step_by(chunk)
                .flat_map_iter(|start| self.top_k_range(q, k, start..(start + chunk).min(n)))
                .collect::<Vec<_>>()
        } else {
            self.top_k_range(q, k, 0..n)
        };
        best.sort_unstable_by(|a, b| b.cmp(a));
        best.truncate(k);
        Ok(best
            .into_iter()
            .enumerate()
            .map(|(r, c)| ScoredDoc {
                id: self.ids[c.idx].clone(),
                score: c.score,
                rank: r + 1,
            })
            .collect())
    }
}

pub fn build_index(kb: &KnowledgeBase, embedder: &Embedder) -> Result<FlatIndex> {
    FlatIndex::build(kb, embedder)
}

/// A retrieved document together with its score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieved {
    #[serde(flatten)]
    pub scored: ScoredDoc,
    pub document: Document,
}

/// A knowledge base and the index built from it, kept together so search hits
/// can be resolved back to documents.
#[derive(Debug, Clone)]
pub struct IndexedKb {
    kb: KnowledgeBase,
    index: FlatIndex,
}

impl IndexedKb {
    pub fn new(kb: KnowledgeBase, index: FlatIndex) -> Result<Self> {
        if kb.modality() != index.modality() {
            return Err(Error::Invalid(format!(
                "index modality {} does not match knowledge base modality {}",
                index.modality(),
                kb.modality()
            )));
        }
        if let Some(missing) = index.ids().iter().find(|id| !kb.contains(id)) {
            return Err(Error::Invalid(format!(
                "index id {missing:?} is not in knowledge base {:?}",
                kb.name()
            )));
        }
        Ok(IndexedKb { kb, index })
    }

    pub fn build(kb: KnowledgeBase, embedder: &Embedder) -> Result<Self> {
        let index = FlatIndex::build(&kb, embedder)?;
        Ok(IndexedKb { kb, index })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn modality(&self) -> Modality {
        self.kb.modality()
    }

    pub fn retrieve(&self, q: &EmbeddingVector, k: usize) -> Result<Vec<Retrieved>> {
        Ok(self
            .index
            .search(q, k)?
            .into_iter()
            .map(|scored| {
                let document = self
                    .kb
                    .get(&scored.id)
                    .expect("index ids are checked against the knowledge base")
                    .clone();
                Retrieved { scored, document }
            })
            .collect())
    }
}
