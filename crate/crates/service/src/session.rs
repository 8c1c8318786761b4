//! Training sessions and their on-disk form.
//!
//! Layout under the data dir:
//!
//! ```text
//! sessions/<id>/model.cpm.json   current model, canonical bytes
//! sessions/<id>/session.json     sidecar: documents, pending results, counters, queue
//! sessions/<id>/documents/<doc>  uploaded bytes as received
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chromaplane::io::write_atomic;
use chromaplane::pipeline::QueueEntry;
use chromaplane::{decode_image, ClusterConfig, ClusterResult, ColorModel, Image, Rect};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MODEL_FILE: &str = "model.cpm.json";
const SIDECAR_FILE: &str = "session.json";
const DOCUMENTS_DIR: &str = "documents";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Document id: first 16 hex digits of the SHA-256 of the uploaded bytes.
pub fn document_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// A clustered window awaiting its label assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub doc: String,
    pub rect: Rect,
    pub k: usize,
    pub seed: u64,
    pub result: ClusterResult,
}

/// Flagged document taken from an ingested retraining queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedDocument {
    pub doc: String,
    /// File name of the source page; directories are dropped.
    pub file_name: Option<String>,
    pub unknown_fraction: f64,
    pub suggestions: Vec<chromaplane::segment::Suggestion>,
}

impl From<&QueueEntry> for QueuedDocument {
    fn from(e: &QueueEntry) -> Self {
        Self {
            doc: e.doc.clone(),
            file_name: e.source.file_name().map(|n| n.to_string_lossy().into_owned()),
            unknown_fraction: e.unknown_fraction,
            suggestions: e.suggestions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    documents: Vec<String>,
    pending: BTreeMap<String, Pending>,
    next_pending: u64,
    seed_base: u64,
    next_seed: u64,
    #[serde(default)]
    queue: Vec<QueuedDocument>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    dir: PathBuf,
    documents: BTreeMap<String, Arc<Image>>,
    pub model: ColorModel,
    pending: BTreeMap<String, Pending>,
    next_pending: u64,
    seed_base: u64,
    next_seed: u64,
    pub queue: Vec<QueuedDocument>,
}

impl Session {
    pub fn create(id: String, dir: PathBuf, seed_base: u64) -> Result<Self, StoreError> {
        let s = Session {
            id,
            dir,
            documents: BTreeMap::new(),
            model: ColorModel::new(ClusterConfig::default()),
            pending: BTreeMap::new(),
            next_pending: 1,
            seed_base,
            next_seed: 0,
            queue: Vec::new(),
        };
        fs::create_dir_all(s.dir.join(DOCUMENTS_DIR)).map_err(io_err(&s.dir))?;
        s.persist()?;
        Ok(s)
    }

    pub fn open(id: String, dir: PathBuf) -> Result<Self, StoreError> {
        let corrupt = |path: &Path, message: String| StoreError::Corrupt { path: path.to_path_buf(), message };
        let model_path = dir.join(MODEL_FILE);
        let bytes = fs::read(&model_path).map_err(io_err(&model_path))?;
        let model = ColorModel::deserialize(&bytes).map_err(|e| corrupt(&model_path, e.to_string()))?;
        let side_path = dir.join(SIDECAR_FILE);
        let bytes = fs::read(&side_path).map_err(io_err(&side_path))?;
        let side: Sidecar = serde_json::from_slice(&bytes).map_err(|e| corrupt(&side_path, e.to_string()))?;
        let mut documents = BTreeMap::new();
        for doc in &side.documents {
            let path = dir.join(DOCUMENTS_DIR).join(doc);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let img = decode_image(&bytes).map_err(|e| corrupt(&path, e.to_string()))?;
            documents.insert(doc.clone(), Arc::new(img));
        }
        Ok(Session {
            id,
            dir,
            documents,
            model,
            pending: side.pending,
            next_pending: side.next_pending,
            seed_base: side.seed_base,
            next_seed: side.next_seed,
            queue: side.queue,
        })
    }

    /// Writes model and sidecar; each file is replaced atomically.
    pub fn persist(&self) -> Result<(), StoreError> {
        let model_path = self.dir.join(MODEL_FILE);
        write_atomic(&model_path, &self.model.serialize()).map_err(|e| StoreError::Corrupt { path: model_path, message: e.to_string() })?;
        let side = Sidecar {
            documents: self.documents.keys().cloned().collect(),
            pending: self.pending.clone(),
            next_pending: self.next_pending,
            seed_base: self.seed_base,
            next_seed: self.next_seed,
            queue: self.queue.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
        bytes.push(b'\n');
        let side_path = self.dir.join(SIDECAR_FILE);
        write_atomic(&side_path, &bytes).map_err(|e| StoreError::Corrupt { path: side_path, message: e.to_string() })
    }

    pub fn document(&self, id: &str) -> Option<&Arc<Image>> {
        self.documents.get(id)
    }

    /// Stores a decoded upload. Returns false if the id was already present.
    pub fn add_document(&mut self, id: &str, bytes: &[u8], img: Image) -> Result<bool, StoreError> {
        if self.documents.contains_key(id) {
            return Ok(false);
        }
        let path = self.dir.join(DOCUMENTS_DIR).join(id);
        write_atomic(&path, bytes).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
        self.documents.insert(id.to_string(), Arc::new(img));
        self.persist()?;
        Ok(true)
    }

    /// Seed for the next request that did not bring its own.
    pub fn take_seed(&mut self) -> u64 {
        let s = self.seed_base.wrapping_add(self.next_seed);
        self.next_seed += 1;
        s
    }

    pub fn add_pending(&mut self, p: Pending) -> String {
        let id = format!("p{}", self.next_pending);
        self.next_pending += 1;
        self.pending.insert(id.clone(), p);
        id
    }

    pub fn pending(&self, id: &str) -> Option<&Pending> {
        self.pending.get(id)
    }

    pub fn consume_pending(&mut self, id: &str) -> Option<Pending> {
        self.pending.remove(id)
    }
}
