//! Embedded vector index: exact cosine top-k over chunk embeddings with
//! metadata, persisted to a single checksummed file.
//!
//! Vectors are narrowed to `f32` on insert, so an index reloaded from disk
//! answers every query exactly as the in-memory one did. Upserts validate the
//! whole batch before applying any record; readers share the index through
//! `&VectorIndex` and never see a half-applied batch.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::embeddings::EmbeddingVector;
use crate::parallel;

pub const INDEX_MAGIC: [u8; 4] = *b"RAGX";
pub const INDEX_FORMAT_VERSION: u16 = 1;

/// Arbitrary JSON metadata carried with each record. The pipeline stores
/// `contract_id`, `seq_index`, `labels` and `text`.
pub type Metadata = Map<String, Value>;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("vector dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector for {0:?}: cosine similarity is undefined")]
    ZeroVector(String),
    #[error("non-finite value in vector {0:?}")]
    NonFinite(String),
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub id: String,
    pub vector: EmbeddingVector,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub score: f64,
    pub metadata: Metadata,
}

impl RetrievalHit {
    /// Chunk text stored under the `text` metadata key, or "".
    pub fn text(&self) -> &str {
        self.metadata.get("text").and_then(Value::as_str).unwrap_or("")
    }

    pub fn contract_id(&self) -> Option<&str> {
        self.metadata.get("contract_id").and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub count: usize,
    pub dim: usize,
    pub provider_id: String,
}

/// Filter applied before ranking: receives the record id and metadata.
pub type RecordFilter<'a> = &'a (dyn Fn(&str, &Metadata) -> bool + Sync);

/// Search interface. [`VectorIndex`] is the exact engine; approximate
/// engines for large corpora plug in behind the same trait.
pub trait VectorSearch: Send + Sync {
    fn stats(&self) -> IndexStats;

    /// Top `k` records passing `filter`, by cosine similarity descending,
    /// ties broken by id ascending.
    fn query_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<RecordFilter<'_>>,
    ) -> Result<Vec<RetrievalHit>, IndexError>;

    fn query_top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        self.query_filtered(query, k, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    provider_id: String,
    ids: Vec<String>,
    slots: HashMap<String, usize>,
    /// Row-major, `dim` values per record.
    values: Vec<f32>,
    norms: Vec<f64>,
    metadata: Vec<Metadata>,
}

fn narrow(values: &[f64]) -> Vec<f32> {
    values.iter().map(|v| *v as f32).collect()
}

fn norm_f32(values: &[f32]) -> f64 {
    values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt()
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    pub fn new(dim: usize, provider_id: impl Into<String>) -> Self {
        assert!(dim >= 1, "index dimension must be positive");
        Self {
            dim,
            provider_id: provider_id.into(),
            ids: Vec::new(),
            slots: HashMap::new(),
            values: Vec::new(),
            norms: Vec::new(),
            metadata: Vec::new(),
        }
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

    fn row(&self, slot: usize) -> &[f32] {
        &self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Stored record (with its vector as narrowed on insert).
    pub fn get(&self, id: &str) -> Option<VectorRecord> {
        self.slots.get(id).map(|&slot| VectorRecord {
            id: id.to_string(),
            vector: EmbeddingVector::new(
                self.row(slot).iter().map(|v| f64::from(*v)).collect(),
                self.provider_id.clone(),
            ),
            metadata: self.metadata[slot].clone(),
        })
    }

    /// All records sorted by id.
    pub fn records(&self) -> Vec<VectorRecord> {
        let mut ids: Vec<&String> = self.ids.iter().collect();
        ids.sort();
        ids.into_iter().filter_map(|id| self.get(id)).collect()
    }

    /// Inserts or replaces records by id. The batch is validated as a whole
    /// first; on error nothing is applied.
    pub fn upsert(&mut self, records: Vec<VectorRecord>) -> Result<IndexStats, IndexError> {
        let mut prepared = Vec::with_capacity(records.len());
        for record in records {
            if record.vector.values.len() != self.dim {
                return Err(IndexError::DimensionMismatch { expected: self.dim, actual: record.vector.values.len() });
            }
            if !record.vector.is_finite() {
                return Err(IndexError::NonFinite(record.id));
            }
            let row = narrow(&record.vector.values);
            let norm = norm_f32(&row);
            if norm == 0.0 {
                return Err(IndexError::ZeroVector(record.id));
            }
            prepared.push((record.id, row, norm, record.metadata));
        }
        for (id, row, norm, metadata) in prepared {
            match self.slots.get(&id) {
                Some(&slot) => {
                    self.values[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(&row);
                    self.norms[slot] = norm;
                    self.metadata[slot] = metadata;
                }
                None => {
                    self.slots.insert(id.clone(), self.ids.len());
                    self.ids.push(id);
                    self.values.extend_from_slice(&row);
                    self.norms.push(norm);
                    self.metadata.push(metadata);
                }
            }
        }
        Ok(self.stats())
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<f64, IndexError> {
        if query.values.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, actual: query.values.len() });
        }
        if !query.is_finite() {
            return Err(IndexError::NonFinite("query".into()));
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroVector("query".into()));
        }
        Ok(norm)
    }

    fn score(&self, slot: usize, query: &[f64], query_norm: f64) -> f64 {
        let dot: f64 = self.row(slot).iter().zip(query).map(|(r, q)| f64::from(*r) * q).sum();
        dot / (self.norms[slot] * query_norm)
    }

    /// Writes the index file (see crate docs for the layout). The file is
    /// written to a sibling temporary path and renamed into place.
    pub fn persist(&self, path: &Path) -> Result<(), IndexError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Layout, little-endian:
    /// `"RAGX" | version u16 | dim u32 | count u64 | provider_len u32 | provider bytes`
    /// then per record `id_len u32 | id | dim × f32 | meta_len u32 | meta JSON`,
    /// then CRC32 (IEEE) of every byte after the version field.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.values.len() * 4 + self.ids.len() * 64);
        buf.extend_from_slice(&INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        put_bytes(&mut buf, self.provider_id.as_bytes());
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|a, b| self.ids[*a].cmp(&self.ids[*b]));
        for slot in order {
            put_bytes(&mut buf, self.ids[slot].as_bytes());
            for v in self.row(slot) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let meta = serde_json::to_vec(&self.metadata[slot]).expect("metadata serializes");
            put_bytes(&mut buf, &meta);
        }
        let crc = crc32fast::hash(&buf[6..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let corrupt = |m: &str| IndexError::CorruptIndex(m.to_string());
        if bytes.len() < 6 || bytes[..4] != INDEX_MAGIC {
            return Err(corrupt("bad magic number"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != INDEX_FORMAT_VERSION {
            return Err(IndexError::VersionMismatch { expected: INDEX_FORMAT_VERSION, found: version });
        }
        if bytes.len() < 6 + 4 {
            return Err(corrupt("truncated file"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(&body[6..]) != stored_crc {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Reader { buf: body, pos: 6 };
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        let provider_id = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| corrupt("provider id is not UTF-8"))?;
        let mut index = Self::new(dim, provider_id);
        // each record needs at least 8 + 4*dim bytes; bound the allocation
        let max_records = (body.len() / (8 + 4 * dim)) as u64;
        if count > max_records {
            return Err(corrupt("record count exceeds file size"));
        }
        let mut records = Vec::with_capacity(count as usize);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let id = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| corrupt("record id is not UTF-8"))?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from(r.f32()?));
            }
            let metadata: Metadata =
                serde_json::from_slice(r.bytes()?).map_err(|e| IndexError::CorruptIndex(format!("metadata: {e}")))?;
            if !seen.insert(id.clone()) {
                return Err(corrupt("duplicate record id"));
            }
            records.push(VectorRecord { id, vector: EmbeddingVector::new(values, index.provider_id.clone()), metadata });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after records"));
        }
        index.upsert(records).map_err(|e| IndexError::CorruptIndex(e.to_string()))?;
        Ok(index)
    }
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(IndexError::CorruptIndex("truncated file".into())),
        }
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, IndexError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], IndexError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

impl VectorSearch for VectorIndex {
    fn stats(&self) -> IndexStats {
        IndexStats { count: self.ids.len(), dim: self.dim, provider_id: self.provider_id.clone() }
    }

    fn query_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<RecordFilter<'_>>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        let query_norm = self.check_query(query)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let slots: Vec<usize> = (0..self.ids.len()).collect();
        let scored: Vec<Option<(f64, usize)>> = parallel::map(&slots, |&slot| {
            let keep = filter.is_none_or(|f| f(&self.ids[slot], &self.metadata[slot]));
            keep.then(|| (self.score(slot, &query.values, query_norm), slot))
        });
        let mut ranked: Vec<(f64, &str, usize)> =
            scored.into_iter().flatten().map(|(s, slot)| (s, self.ids[slot].as_str(), slot)).collect();
        let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| rank_order(&(a.0, a.1), &(b.0, b.1));
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, cmp);
            ranked.truncate(k);
        }
        ranked.sort_by(cmp);
        Ok(ranked
            .into_iter()
            .map(|(score, id, slot)| RetrievalHit { id: id.to_string(), score, metadata: self.metadata[slot].clone() })
            .collect())
    }
}
