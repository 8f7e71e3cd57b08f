use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ChatResponse, GatewayError};

/// One JSON file per request fingerprint.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, GatewayError> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    fn path(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    pub fn get(&self, fingerprint: &str) -> Result<Option<ChatResponse>, GatewayError> {
        match fs::read(self.path(fingerprint)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| GatewayError::MalformedPayload(format!("cache entry {fingerprint}: {e}"))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file so readers never see partial entries.
    pub fn put(&self, fingerprint: &str, response: &ChatResponse) -> Result<(), GatewayError> {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let seq = SEQ.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{fingerprint}.{}.{seq}.tmp", std::process::id()));
        let bytes = serde_json::to_vec(response).map_err(|e| GatewayError::MalformedPayload(e.to_string()))?;
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, self.path(fingerprint))?;
        Ok(())
    }
}
