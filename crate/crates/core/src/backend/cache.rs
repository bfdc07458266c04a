//! Content-addressed response cache.
//!
//! Entries live at `<dir>/<first two hex digits>/<sha256>.json`, where the
//! hash covers the backend identity and the canonical serialization of the
//! request (including its response window). Each entry stores the full key
//! material so a hash collision or a damaged file reads as a miss.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, CompletionRequest, ResponseSet};

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    response: ResponseSet,
}

#[derive(Debug, Clone)]
pub struct FileCache {
    dir: PathBuf,
}

impl FileCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn key_material(identity: &str, request: &CompletionRequest) -> String {
        let request = serde_json::to_string(request).expect("request serializes");
        format!("{identity}\n{request}")
    }

    fn path_for(&self, material: &str) -> PathBuf {
        let hash = hex::encode(Sha256::digest(material.as_bytes()));
        self.dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    pub fn lookup(&self, identity: &str, request: &CompletionRequest) -> Option<ResponseSet> {
        let material = Self::key_material(identity, request);
        let path = self.path_for(&material);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(entry) if entry.key == material => Some(entry.response),
            _ => {
                log::warn!("evicting unreadable cache entry {}", path.display());
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    pub fn store(
        &self,
        identity: &str,
        request: &CompletionRequest,
        response: &ResponseSet,
    ) -> io::Result<()> {
        let material = Self::key_material(identity, request);
        let path = self.path_for(&material);
        let parent = path.parent().expect("entry path has a parent");
        fs::create_dir_all(parent)?;
        let entry = Entry {
            key: material,
            response: response.clone(),
        };
        let bytes = serde_json::to_vec(&entry)?;
        let tmp = tempfile_in(parent)?;
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)
    }
}

fn tempfile_in(dir: &Path) -> io::Result<PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    Ok(dir.join(format!(".tmp-{}-{n}", std::process::id())))
}

/// A backend whose replies are served from, and saved to, a [`FileCache`].
pub struct CachedBackend<B> {
    inner: B,
    cache: FileCache,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: FileCache) -> Self {
        Self { inner, cache }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError> {
        let identity = self.inner.identity();
        if let Some(hit) = self.cache.lookup(&identity, request) {
            return Ok(hit);
        }
        let response = self.inner.complete(request)?;
        if let Err(e) = self.cache.store(&identity, request, &response) {
            log::warn!("could not write cache entry: {e}");
        }
        Ok(response)
    }
}
