use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvidenceItem, Metric, RetrievalConfig, RetrievalError};
use crate::fkd::{Corpus, KnowledgeEntry, Label, VectorMatrix};

const INDEX_META: &str = "index.json";
const INDEX_ROWS: &str = "rows.f64";
const ROWS_MAGIC: &[u8; 4] = b"VRGI";
const ROWS_VERSION: u32 = 1;

/// Immutable matrix of unit-normalized rows. Cosine similarity reduces to a
/// dot product against the normalized query.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    rows: Vec<f64>,
    ids: Vec<String>,
    metric: Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub entry_id: String,
    pub similarity: f64,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    dimension: usize,
    count: usize,
    metric: Metric,
    ids: Vec<String>,
}

impl VectorIndex {
    pub fn build(ids: Vec<String>, vectors: &VectorMatrix) -> Result<Self, RetrievalError> {
        if vectors.dimension == 0 {
            return Err(RetrievalError::DimensionMismatch { expected: 1, actual: 0 });
        }
        if !vectors.data.len().is_multiple_of(vectors.dimension) {
            return Err(RetrievalError::DimensionMismatch {
                expected: vectors.dimension,
                actual: vectors.data.len() % vectors.dimension,
            });
        }
        if ids.len() != vectors.rows() {
            return Err(RetrievalError::RowCount { ids: ids.len(), rows: vectors.rows() });
        }
        if ids.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut rows = Vec::with_capacity(vectors.data.len());
        for (i, id) in ids.iter().enumerate() {
            let row = vectors.row(i);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite(id.clone()));
            }
            let norm = norm_f32(row);
            if norm == 0.0 {
                return Err(RetrievalError::ZeroVector { row: i, id: id.clone() });
            }
            rows.extend(row.iter().map(|&x| f64::from(x) / norm));
        }
        Ok(VectorIndex { dimension: vectors.dimension, rows, ids, metric: Metric::Cosine })
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self, RetrievalError> {
        let ids = corpus.entries.iter().map(|e| e.entry_id.clone()).collect();
        Self::build(ids, &corpus.vectors)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
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

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dimension..(i + 1) * self.dimension]
    }

    /// The `k` rows most similar to `query`, best first. Ties are broken by
    /// ascending id. `exclude` removes the row with that id from the candidates.
    pub fn search(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Hit>, RetrievalError> {
        if query.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch { expected: self.dimension, actual: query.len() });
        }
        if k == 0 {
            return Err(RetrievalError::InvalidK(0));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite("query".into()));
        }
        let norm = norm_f32(query);
        if norm == 0.0 {
            return Err(RetrievalError::ZeroQuery);
        }
        let q: Vec<f64> = query.iter().map(|&x| f64::from(x) / norm).collect();

        let mut scored: Vec<(f64, usize)> = (0..self.ids.len())
            .filter(|&i| exclude != Some(self.ids[i].as_str()))
            .map(|i| (dot(&q, self.row(i)), i))
            .collect();
        if k > scored.len() {
            return Err(RetrievalError::KTooLarge { k, eligible: scored.len() });
        }

        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);

        Ok(scored
            .into_iter()
            .map(|(sim, row)| Hit { row, entry_id: self.ids[row].clone(), similarity: sim.clamp(-1.0, 1.0) })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir)?;
        let meta =
            IndexMeta { dimension: self.dimension, count: self.ids.len(), metric: self.metric, ids: self.ids.clone() };
        fs::write(dir.join(INDEX_META), serde_json::to_vec_pretty(&meta)?)?;
        let mut bytes = Vec::with_capacity(20 + self.rows.len() * 8);
        bytes.extend_from_slice(ROWS_MAGIC);
        bytes.extend_from_slice(&ROWS_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for x in &self.rows {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(dir.join(INDEX_ROWS), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        let meta: IndexMeta = serde_json::from_slice(&fs::read(dir.join(INDEX_META))?)?;
        let bytes = fs::read(dir.join(INDEX_ROWS))?;
        let corrupt = |why: &str| RetrievalError::CorruptIndex(why.to_string());
        if bytes.len() < 20 || &bytes[..4] != ROWS_MAGIC {
            return Err(corrupt("bad header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ROWS_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if dimension != meta.dimension || count != meta.count || count != meta.ids.len() {
            return Err(corrupt("header disagrees with metadata"));
        }
        let body = &bytes[20..];
        if body.len() != count * dimension * 8 {
            return Err(corrupt("truncated rows"));
        }
        let rows: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let index = VectorIndex { dimension, rows, ids: meta.ids, metric: meta.metric };
        for i in 0..index.len() {
            let n = index.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(corrupt(&format!("row {i} is not unit length")));
            }
        }
        Ok(index)
    }
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// An index paired with the labels and evidence text of its entries.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    index: VectorIndex,
    labels: Vec<Label>,
    annotations: Vec<String>,
    positions: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(index: VectorIndex, entries: &[KnowledgeEntry]) -> Result<Self, RetrievalError> {
        let by_id: HashMap<&str, &KnowledgeEntry> = entries.iter().map(|e| (e.entry_id.as_str(), e)).collect();
        let mut labels = Vec::with_capacity(index.len());
        let mut annotations = Vec::with_capacity(index.len());
        for id in index.ids() {
            let entry = by_id.get(id.as_str()).ok_or_else(|| RetrievalError::UnknownEntry(id.clone()))?;
            labels.push(entry.label);
            annotations.push(entry.evidence_text());
        }
        let positions = index.ids().iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(KnowledgeBase { index, labels, annotations, positions })
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self, RetrievalError> {
        Self::new(VectorIndex::from_corpus(corpus)?, &corpus.entries)
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn label_of(&self, entry_id: &str) -> Option<Label> {
        self.positions.get(entry_id).map(|&i| self.labels[i])
    }

    pub fn retrieve(
        &self,
        query: &[f32],
        config: &RetrievalConfig,
        self_id: Option<&str>,
    ) -> Result<Vec<EvidenceItem>, RetrievalError> {
        let exclude = if config.exclude_self { Some(self_id.ok_or(RetrievalError::MissingSelfId)?) } else { None };
        let hits = self.index.search(query, config.k, exclude)?;
        Ok(hits
            .into_iter()
            .map(|h| EvidenceItem {
                label: self.labels[h.row],
                annotation: self.annotations[h.row].clone(),
                entry_id: h.entry_id,
                similarity: h.similarity,
            })
            .collect())
    }

    /// Retrieves for many queries in parallel; output order matches input order.
    pub fn retrieve_batch(
        &self,
        queries: &[(Vec<f32>, Option<String>)],
        config: &RetrievalConfig,
    ) -> Vec<Result<Vec<EvidenceItem>, RetrievalError>> {
        queries.par_iter().map(|(q, self_id)| self.retrieve(q, config, self_id.as_deref())).collect()
    }
}
