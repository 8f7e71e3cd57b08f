use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{vector_file, EmbeddingRecord, FkdError, KnowledgeEntry, Label};
use crate::jsonl;

pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub dimension: usize,
    pub count: usize,
    pub counts_by_label: BTreeMap<Label, usize>,
    /// Lower-case hex SHA-256 of the vector file.
    pub checksum: String,
}

/// Row-major matrix of raw (un-normalized) embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMatrix {
    pub dimension: usize,
    pub data: Vec<f32>,
}

impl VectorMatrix {
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dimension).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }
}

/// A loaded, immutable corpus. Row `i` of `vectors` belongs to `entries[i]`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<KnowledgeEntry>,
    pub vectors: VectorMatrix,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn embedding_records(&self) -> Vec<EmbeddingRecord> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| EmbeddingRecord::new(e.embedding_id.clone(), self.vectors.row(i).to_vec()))
            .collect()
    }

    pub fn position(&self, entry_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.entry_id == entry_id)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Validates entries against their embeddings and writes the corpus trio
/// (entries file, vector file, manifest) into `out_dir`.
pub fn ingest<E, V>(entries: E, vectors: V, out_dir: &Path) -> Result<CorpusManifest, FkdError>
where
    E: IntoIterator<Item = KnowledgeEntry>,
    V: IntoIterator<Item = EmbeddingRecord>,
{
    let mut dimension: Option<usize> = None;
    let mut by_id: HashMap<String, EmbeddingRecord> = HashMap::new();
    for rec in vectors {
        rec.validate()?;
        match dimension {
            None => dimension = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(FkdError::DimensionMismatch { id: rec.embedding_id, expected: d, actual: rec.vector.len() })
            }
            _ => {}
        }
        if by_id.contains_key(&rec.embedding_id) {
            return Err(FkdError::DuplicateId(rec.embedding_id));
        }
        by_id.insert(rec.embedding_id.clone(), rec);
    }
    let dimension = match dimension {
        Some(0) => return Err(FkdError::InvalidEntry("zero-dimensional embeddings".into())),
        Some(d) => d,
        None => return Err(FkdError::InvalidEntry("no embeddings supplied".into())),
    };

    let mut seen_entries = HashSet::new();
    let mut seen_embeddings = HashSet::new();
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    let mut counts_by_label: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for entry in entries {
        entry.validate()?;
        if !seen_entries.insert(entry.entry_id.clone()) {
            return Err(FkdError::DuplicateId(entry.entry_id));
        }
        let Some(rec) = by_id.get(&entry.embedding_id) else {
            return Err(FkdError::DanglingEmbeddingRef { entry_id: entry.entry_id, embedding_id: entry.embedding_id });
        };
        if !seen_embeddings.insert(entry.embedding_id.clone()) {
            return Err(FkdError::DuplicateId(entry.embedding_id));
        }
        rows.extend_from_slice(&rec.vector);
        *counts_by_label.entry(entry.label).or_default() += 1;
        kept.push(entry);
    }
    let orphans = by_id.len() - seen_embeddings.len();
    if orphans > 0 {
        log::warn!("{orphans} embeddings are not referenced by any entry and were dropped");
    }

    let bytes = vector_file::encode(dimension, &rows)?;
    let manifest = CorpusManifest {
        format_version: MANIFEST_VERSION,
        dimension,
        count: kept.len(),
        counts_by_label,
        checksum: sha256_hex(&bytes),
    };

    fs::create_dir_all(out_dir)?;
    jsonl::write(&out_dir.join(ENTRIES_FILE), &kept).map_err(jsonl_to_fkd)?;
    fs::write(out_dir.join(VECTORS_FILE), &bytes)?;
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a corpus written by [`ingest`], verifying the vector file checksum
/// and the manifest counts.
pub fn load_corpus(dir: &Path) -> Result<Corpus, FkdError> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(FkdError::VersionUnsupported(manifest.format_version));
    }
    let bytes = fs::read(dir.join(VECTORS_FILE))?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.checksum.to_ascii_lowercase() {
        return Err(FkdError::ChecksumMismatch { expected: manifest.checksum.clone(), actual });
    }
    let (dimension, data) = vector_file::decode(&bytes)?;
    let vectors = VectorMatrix { dimension, data };
    let entries: Vec<KnowledgeEntry> = jsonl::read(&dir.join(ENTRIES_FILE)).map_err(jsonl_to_fkd)?;

    if dimension != manifest.dimension {
        return Err(FkdError::ManifestMismatch(format!(
            "manifest dimension {} but vector file has {dimension}",
            manifest.dimension
        )));
    }
    if entries.len() != manifest.count || vectors.rows() != manifest.count {
        return Err(FkdError::ManifestMismatch(format!(
            "manifest count {} but {} entries and {} vectors",
            manifest.count,
            entries.len(),
            vectors.rows()
        )));
    }
    let labelled: usize = manifest.counts_by_label.values().sum();
    if labelled != manifest.count {
        return Err(FkdError::ManifestMismatch(format!(
            "per-label counts sum to {labelled}, expected {}",
            manifest.count
        )));
    }
    for label in Label::ALL {
        let n = entries.iter().filter(|e| e.label == label).count();
        if manifest.counts_by_label.get(&label).copied().unwrap_or(0) != n {
            return Err(FkdError::ManifestMismatch(format!("{label} count differs from entries")));
        }
    }
    for (i, entry) in entries.iter().enumerate() {
        if !vectors.row(i).iter().all(|x| x.is_finite()) {
            return Err(FkdError::NonFinite(entry.embedding_id.clone()));
        }
    }
    Ok(Corpus { entries, vectors, manifest })
}

fn jsonl_to_fkd(err: jsonl::JsonlError) -> FkdError {
    match err {
        jsonl::JsonlError::Parse { path, line, source } => FkdError::Record { path, line, source },
        jsonl::JsonlError::Io { source, .. } => FkdError::Io(source),
    }
}
