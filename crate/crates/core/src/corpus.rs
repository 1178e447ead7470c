//! Contract corpus ingest, labelling, index/holdout split and vulnerability
//! catalogs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::digest::{sha256_hex, stable_hash, CHECKSUM_ALGO};
use crate::jsonl;
use crate::parallel;

/// File extension picked up by [`scan_corpus`].
pub const SOLIDITY_EXTENSION: &str = "sol";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("malformed label map {path}: {reason}")]
    MalformedLabelMap { path: PathBuf, reason: String },
    #[error("manifest is already split; pass force to re-split")]
    AlreadySplit,
    #[error("holdout fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("malformed catalog {path}: {reason}")]
    MalformedCatalog { path: PathBuf, reason: String },
    #[error("duplicate vulnerability type name {0:?} in catalog")]
    DuplicateTypeName(String),
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("checksum mismatch for {id}: manifest has {expected}, file has {actual}")]
    ChecksumMismatch { id: String, expected: String, actual: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Index,
    Holdout,
    Unassigned,
}

/// One source contract: the unit of audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractDocument {
    /// Path relative to the ingest root with `/` separators.
    pub id: String,
    pub path: PathBuf,
    pub source_text: String,
    pub byte_len: u64,
    /// Hex digest of `source_text` under [`CHECKSUM_ALGO`].
    pub checksum: String,
    pub labels: BTreeSet<String>,
    pub split: Split,
}

impl ContractDocument {
    /// Builds an in-memory document (no file on disk), e.g. for a contract
    /// passed directly to the audit command or for synthetic corpora.
    pub fn from_source(id: impl Into<String>, source_text: impl Into<String>) -> Self {
        let id = id.into();
        let source_text = source_text.into();
        Self {
            path: PathBuf::from(&id),
            byte_len: source_text.len() as u64,
            checksum: sha256_hex(&source_text),
            id,
            source_text,
            labels: BTreeSet::new(),
            split: Split::Unassigned,
        }
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.labels = labels.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityType {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    /// Sorted by id.
    pub documents: Vec<ContractDocument>,
    pub root: PathBuf,
    pub created_at: DateTime<Utc>,
    pub checksum_algo: String,
    /// Files skipped during ingest, with the reason.
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    root: PathBuf,
    checksum_algo: String,
    created_at: String,
    #[serde(default)]
    warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    path: PathBuf,
    byte_len: u64,
    checksum: String,
    labels: BTreeSet<String>,
    split: Split,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ContractDocument> {
        self.documents
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.documents[i])
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &ContractDocument> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    /// Builds a manifest from in-memory documents, sorting by id.
    pub fn from_documents(root: impl Into<PathBuf>, mut documents: Vec<ContractDocument>) -> Self {
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            documents,
            root: root.into(),
            created_at: Utc::now(),
            checksum_algo: CHECKSUM_ALGO.to_string(),
            warnings: Vec::new(),
        }
    }

    /// Writes the manifest as JSON Lines: a header line followed by one line
    /// per document.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
        let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        let header = ManifestHeader {
            root: self.root.clone(),
            checksum_algo: self.checksum_algo.clone(),
            created_at: self.created_at.to_rfc3339_opts(SecondsFormat::Millis, true),
            warnings: self.warnings.clone(),
        };
        jsonl::write_row(&mut out, &header).map_err(io_err)?;
        for doc in &self.documents {
            let line = ManifestLine {
                id: doc.id.clone(),
                path: doc.path.clone(),
                byte_len: doc.byte_len,
                checksum: doc.checksum.clone(),
                labels: doc.labels.clone(),
                split: doc.split,
            };
            jsonl::write_row(&mut out, &line).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Reads a manifest file and reloads every document's source from its
    /// recorded path, verifying the checksum.
    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let malformed = |reason: String| CorpusError::MalformedManifest { path: path.to_path_buf(), reason };
        let lines = jsonl::read_lines(path).map_err(|e| malformed(e.to_string()))?;
        let mut lines = lines.into_iter();
        let (n, first) = lines.next().ok_or_else(|| malformed("missing header line".into()))?;
        let header: ManifestHeader =
            jsonl::parse_line(path, n, &first).map_err(|e| malformed(e.to_string()))?;
        let created_at = DateTime::parse_from_rfc3339(&header.created_at)
            .map_err(|e| malformed(format!("created_at: {e}")))?
            .with_timezone(&Utc);

        let entries = lines
            .map(|(n, line)| jsonl::parse_line::<ManifestLine>(path, n, &line))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(e.to_string()))?;

        let mut documents = Vec::with_capacity(entries.len());
        for entry in entries {
            let bytes = fs::read(&entry.path).map_err(|e| CorpusError::UnreadableFile {
                path: entry.path.clone(),
                reason: e.to_string(),
            })?;
            let actual = sha256_hex(&bytes);
            if actual != entry.checksum {
                return Err(CorpusError::ChecksumMismatch { id: entry.id, expected: entry.checksum, actual });
            }
            let source_text = String::from_utf8(bytes).map_err(|e| CorpusError::UnreadableFile {
                path: entry.path.clone(),
                reason: e.to_string(),
            })?;
            documents.push(ContractDocument {
                id: entry.id,
                path: entry.path,
                byte_len: entry.byte_len,
                checksum: entry.checksum,
                source_text,
                labels: entry.labels,
                split: entry.split,
            });
        }
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = HashSet::new();
        if let Some(dup) = documents.iter().find(|d| !seen.insert(d.id.as_str())) {
            return Err(malformed(format!("duplicate document id {:?}", dup.id)));
        }
        Ok(Self {
            documents,
            root: header.root,
            created_at,
            checksum_algo: header.checksum_algo,
            warnings: header.warnings,
        })
    }
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn read_label_map(path: &Path) -> Result<BTreeMap<String, Vec<String>>, CorpusError> {
    let malformed = |reason: String| CorpusError::MalformedLabelMap { path: path.to_path_buf(), reason };
    let text = fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))
}

/// Ingests every `.sol` file under `root` (recursively) into a manifest.
///
/// Files that cannot be read or are not valid UTF-8 are skipped and listed in
/// `warnings`. Labels come from `label_source`, a JSON object mapping document
/// id to an array of vulnerability-type names.
pub fn scan_corpus(root: &Path, label_source: Option<&Path>) -> Result<CorpusManifest, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    let labels = label_source.map(read_label_map).transpose()?.unwrap_or_default();

    let mut warnings = Vec::new();
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).follow_links(true).sort_by_file_name() {
        match entry {
            Ok(entry) => {
                let is_sol = entry.path().extension().is_some_and(|e| e == SOLIDITY_EXTENSION);
                if entry.file_type().is_file() && is_sol {
                    paths.push(entry.into_path());
                }
            }
            Err(err) => warnings.push(format!("walk error: {err}")),
        }
    }

    let loaded = parallel::map(&paths, |path| {
        let id = relative_id(root, path);
        fs::read(path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| String::from_utf8(bytes).map_err(|e| e.to_string()))
            .map(|text| (id.clone(), text))
            .map_err(|reason| format!("skipped {id}: {reason}"))
    });

    let mut documents = Vec::with_capacity(loaded.len());
    for (path, result) in paths.iter().zip(loaded) {
        match result {
            Ok((id, source_text)) => {
                let doc_labels = labels.get(&id).map(|v| v.iter().cloned().collect()).unwrap_or_default();
                documents.push(ContractDocument {
                    path: path.clone(),
                    byte_len: source_text.len() as u64,
                    checksum: sha256_hex(&source_text),
                    labels: doc_labels,
                    split: Split::Unassigned,
                    id,
                    source_text,
                });
            }
            Err(warning) => {
                log::warn!("{warning}");
                warnings.push(warning);
            }
        }
    }
    documents.sort_by(|a, b| a.id.cmp(&b.id));

    let known: HashSet<&str> = documents.iter().map(|d| d.id.as_str()).collect();
    for id in labels.keys().filter(|id| !known.contains(id.as_str())) {
        warnings.push(format!("label map entry {id:?} matches no document"));
    }

    Ok(CorpusManifest {
        documents,
        root: root.to_path_buf(),
        created_at: Utc::now(),
        checksum_algo: CHECKSUM_ALGO.to_string(),
        warnings,
    })
}

/// Number of holdout documents for `fraction` of `n` (half-up rounding).
pub fn holdout_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 0.5).floor() as usize
}

/// Assigns every document to INDEX or HOLDOUT.
///
/// Documents are ranked by a seeded hash of their id; the lowest-ranked
/// `round(fraction * N)` become HOLDOUT. Assignment depends only on `seed`
/// and the document ids, and holdout sets are nested as the fraction grows.
pub fn split_corpus(
    manifest: &CorpusManifest,
    holdout_fraction: f64,
    seed: u64,
    force: bool,
) -> Result<CorpusManifest, CorpusError> {
    if !(0.0..=1.0).contains(&holdout_fraction) {
        return Err(CorpusError::FractionOutOfRange(holdout_fraction));
    }
    if !force && manifest.documents.iter().any(|d| d.split != Split::Unassigned) {
        return Err(CorpusError::AlreadySplit);
    }
    let n_holdout = holdout_count(holdout_fraction, manifest.len());

    let mut ranked: Vec<(u64, &str)> = manifest
        .documents
        .iter()
        .map(|d| (stable_hash(seed, &[d.id.as_bytes()]), d.id.as_str()))
        .collect();
    ranked.sort_unstable();
    let holdout: HashSet<&str> = ranked.iter().take(n_holdout).map(|(_, id)| *id).collect();

    let mut out = manifest.clone();
    for doc in &mut out.documents {
        doc.split = if holdout.contains(doc.id.as_str()) { Split::Holdout } else { Split::Index };
    }
    Ok(out)
}

/// Loads a vulnerability catalog: a JSON array of `{name, description}`.
pub fn load_catalog(path: &Path) -> Result<Vec<VulnerabilityType>, CorpusError> {
    let malformed = |reason: String| CorpusError::MalformedCatalog { path: path.to_path_buf(), reason };
    let text = fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
    let entries: Vec<VulnerabilityType> = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let mut seen = HashSet::new();
    for entry in &entries {
        if entry.name.trim().is_empty() {
            return Err(malformed("entry with empty name".into()));
        }
        if !seen.insert(entry.name.as_str()) {
            return Err(CorpusError::DuplicateTypeName(entry.name.clone()));
        }
    }
    Ok(entries)
}
