//! Versioned model store.
//!
//! Uploads are validated, assigned the next version under a single lock, and
//! stored as immutable envelopes. With a root directory, each envelope is
//! also written to `<root>/<model_id>/<version>.fgn` (creator alongside in
//! `<version>.creator`) and the index is rebuilt from those files on open.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::format::{deserialize_model, FormatError};

pub const MAX_ID_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown model id {0:?}")]
    NotFound(String),
    #[error("model {id:?} has no version {version}")]
    UnknownVersion { id: String, version: u32 },
    #[error("invalid payload: {0}")]
    InvalidPayload(#[from] FormatError),
    #[error("invalid model id {0:?}")]
    InvalidId(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("remote error {code:#04x}: {message}")]
    Remote { code: u8, message: String },
    #[error("connection: {0}")]
    Connection(String),
}

impl RegistryError {
    /// True when retrying against the same endpoint might succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, RegistryError::Connection(_))
    }
}

/// A stored model version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelEnvelope {
    pub model_id: String,
    /// Assigned by the registry; 0 means unassigned.
    pub version: u32,
    pub creator: String,
    pub payload: Vec<u8>,
    /// CRC32 of `payload`.
    pub checksum: u32,
}

impl ModelEnvelope {
    pub fn new(model_id: impl Into<String>, creator: impl Into<String>, payload: Vec<u8>) -> Self {
        let checksum = crc32fast::hash(&payload);
        Self {
            model_id: model_id.into(),
            version: 0,
            creator: creator.into(),
            payload,
            checksum,
        }
    }

    pub fn verify(&self) -> bool {
        crc32fast::hash(&self.payload) == self.checksum
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    Latest,
    Version(u32),
}

/// Model ids double as directory names, so they are restricted to
/// `[A-Za-z0-9_.-]`, 1..=64 bytes, not starting with a dot.
pub fn validate_id(id: &str) -> Result<(), RegistryError> {
    let ok = !id.is_empty()
        && id.len() <= MAX_ID_LEN
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(RegistryError::InvalidId(id.to_string()))
    }
}

/// Operations shared by the in-process registry and remote clients.
pub trait RegistryClient: Send + Sync {
    fn upload(&self, model_id: &str, creator: &str, payload: &[u8]) -> Result<u32, RegistryError>;
    fn fetch(&self, model_id: &str, selector: Selector) -> Result<ModelEnvelope, RegistryError>;
    /// `(model_id, max_version)` for every stored id, sorted by id.
    fn list(&self) -> Result<Vec<(String, u32)>, RegistryError>;
}

#[derive(Debug, Default)]
pub struct ModelRegistry {
    models: Mutex<BTreeMap<String, Vec<Arc<ModelEnvelope>>>>,
    root: Option<PathBuf>,
}

impl ModelRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a directory-backed registry.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(storage)?;
        let mut models = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(storage)? {
            let entry = entry.map_err(storage)?;
            if !entry.file_type().map_err(storage)?.is_dir() {
                continue;
            }
            let id = entry.file_name().to_string_lossy().into_owned();
            if validate_id(&id).is_err() {
                continue;
            }
            let envelopes = load_model_dir(&entry.path(), &id)?;
            if !envelopes.is_empty() {
                models.insert(id, envelopes);
            }
        }
        Ok(Self {
            models: Mutex::new(models),
            root: Some(root),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn fetch_shared(&self, model_id: &str, selector: Selector) -> Result<Arc<ModelEnvelope>, RegistryError> {
        let models = self.models.lock().unwrap();
        let versions = models
            .get(model_id)
            .ok_or_else(|| RegistryError::NotFound(model_id.to_string()))?;
        match selector {
            Selector::Latest => Ok(versions.last().expect("non-empty").clone()),
            Selector::Version(v) => versions
                .get((v as usize).wrapping_sub(1))
                .cloned()
                .ok_or_else(|| RegistryError::UnknownVersion {
                    id: model_id.to_string(),
                    version: v,
                }),
        }
    }

    fn persist(&self, env: &ModelEnvelope) -> Result<(), RegistryError> {
        let Some(root) = &self.root else { return Ok(()) };
        let dir = root.join(&env.model_id);
        fs::create_dir_all(&dir).map_err(storage)?;
        let creator = dir.join(format!("{}.creator", env.version));
        fs::write(&creator, env.creator.as_bytes()).map_err(storage)?;
        // Write then rename so a crash never leaves a partial `.fgn` behind.
        let tmp = dir.join(format!(".{}.fgn.tmp", env.version));
        fs::write(&tmp, &env.payload).map_err(storage)?;
        fs::rename(&tmp, dir.join(format!("{}.fgn", env.version))).map_err(storage)?;
        Ok(())
    }
}

fn storage(e: std::io::Error) -> RegistryError {
    RegistryError::Storage(e.to_string())
}

fn load_model_dir(dir: &Path, id: &str) -> Result<Vec<Arc<ModelEnvelope>>, RegistryError> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(storage)? {
        let path = entry.map_err(storage)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("fgn") {
            continue;
        }
        let Some(version) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
        else {
            continue;
        };
        let payload = fs::read(&path).map_err(storage)?;
        let creator = fs::read_to_string(dir.join(format!("{version}.creator"))).unwrap_or_default();
        let mut env = ModelEnvelope::new(id, creator, payload);
        env.version = version;
        found.insert(version, Arc::new(env));
    }
    // Versions must be exactly 1..=n.
    for (i, &v) in found.keys().enumerate() {
        if v as usize != i + 1 {
            return Err(RegistryError::Storage(format!(
                "{}: version gap at {v}",
                dir.display()
            )));
        }
    }
    Ok(found.into_values().collect())
}

impl RegistryClient for ModelRegistry {
    fn upload(&self, model_id: &str, creator: &str, payload: &[u8]) -> Result<u32, RegistryError> {
        validate_id(model_id)?;
        deserialize_model(payload)?;
        let mut models = self.models.lock().unwrap();
        let versions = models.entry(model_id.to_string()).or_default();
        let mut env = ModelEnvelope::new(model_id, creator, payload.to_vec());
        env.version = versions.len() as u32 + 1;
        if let Err(e) = self.persist(&env) {
            if versions.is_empty() {
                models.remove(model_id);
            }
            return Err(e);
        }
        let version = env.version;
        versions.push(Arc::new(env));
        Ok(version)
    }

    fn fetch(&self, model_id: &str, selector: Selector) -> Result<ModelEnvelope, RegistryError> {
        self.fetch_shared(model_id, selector).map(|e| (*e).clone())
    }

    fn list(&self) -> Result<Vec<(String, u32)>, RegistryError> {
        let models = self.models.lock().unwrap();
        Ok(models
            .iter()
            .map(|(id, v)| (id.clone(), v.len() as u32))
            .collect())
    }
}

impl<T: RegistryClient + ?Sized> RegistryClient for Arc<T> {
    fn upload(&self, model_id: &str, creator: &str, payload: &[u8]) -> Result<u32, RegistryError> {
        (**self).upload(model_id, creator, payload)
    }

    fn fetch(&self, model_id: &str, selector: Selector) -> Result<ModelEnvelope, RegistryError> {
        (**self).fetch(model_id, selector)
    }

    fn list(&self) -> Result<Vec<(String, u32)>, RegistryError> {
        (**self).list()
    }
}
