use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Content-addressed blobs under one directory, one file per key.
#[derive(Debug, Clone)]
pub struct ContentCache {
    dir: PathBuf,
}

impl ContentCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// SHA-256 over the parts, each followed by a NUL separator.
    pub fn key(parts: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    pub fn get_text(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path(key, "txt")).ok()
    }

    pub fn put_text(&self, key: &str, text: &str) -> Result<()> {
        self.write_atomic(&self.path(key, "txt"), text.as_bytes())
    }

    pub fn get_vector(&self, key: &str) -> Option<Vec<f32>> {
        let bytes = std::fs::read(self.path(key, "f32")).ok()?;
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    }

    pub fn put_vector(&self, key: &str, v: &[f32]) -> Result<()> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.write_atomic(&self.path(key, "f32"), &bytes)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_separate_parts() {
        assert_ne!(ContentCache::key(&["ab", "c"]), ContentCache::key(&["a", "bc"]));
        assert_eq!(ContentCache::key(&["x"]).len(), 64);
    }

    #[test]
    fn blobs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ContentCache::new(dir.path().join("cache")).unwrap();
        let k = ContentCache::key(&["t"]);
        assert!(c.get_text(&k).is_none());
        c.put_text(&k, "hello").unwrap();
        assert_eq!(c.get_text(&k).as_deref(), Some("hello"));
        c.put_vector(&k, &[1.5, -0.0]).unwrap();
        assert_eq!(c.get_vector(&k).unwrap(), vec![1.5, -0.0]);
    }
}
