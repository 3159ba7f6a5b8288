//! Content-addressed response cache: one file per key holding the verbatim
//! response.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::EndpointKind;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(
        kind: EndpointKind,
        model_name: &str,
        payload: &serde_json::Value,
        temperature: f64,
        replay: Option<&str>,
    ) -> CacheKey {
        // serde_json maps are sorted, so this encoding is canonical.
        let canonical = serde_json::json!({
            "kind": kind,
            "model": model_name,
            "payload": payload,
            "temperature": temperature,
            "replay": replay,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        CacheKey(hex::encode(digest))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<ResponseCache> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(ResponseCache { dir: dir.as_ref().to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", key.0))
    }

    pub fn get_text(&self, key: &CacheKey) -> io::Result<Option<String>> {
        match fs::read_to_string(self.path(key, "txt")) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put_text(&self, key: &CacheKey, text: &str) -> io::Result<()> {
        self.write_atomic(&self.path(key, "txt"), text.as_bytes())
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, key: &CacheKey) -> io::Result<Option<T>> {
        match fs::read(self.path(key, "json")) {
            Ok(bytes) => {
                serde_json::from_slice(&bytes).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put_json<T: Serialize>(&self, key: &CacheKey, value: &T) -> io::Result<()> {
        let bytes = serde_json::to_vec(value).map_err(io::Error::other)?;
        self.write_atomic(&self.path(key, "json"), &bytes)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        fs::rename(tmp, path)
    }
}
