use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::StoreError;
use crate::model::BlobRef;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed blob storage.
pub(super) enum BlobBackend {
    /// `dir/<first2hex>/<sha256>`
    Dir(PathBuf),
    Memory(HashMap<String, Vec<u8>>),
}

impl BlobBackend {
    fn path(dir: &Path, sha: &str) -> PathBuf {
        dir.join(&sha[..2]).join(sha)
    }

    /// Existing blobs and their sizes, for index rebuild.
    pub fn list(&self) -> Result<Vec<(String, u64)>, StoreError> {
        match self {
            BlobBackend::Memory(m) => {
                Ok(m.iter().map(|(k, v)| (k.clone(), v.len() as u64)).collect())
            }
            BlobBackend::Dir(dir) => {
                let mut out = Vec::new();
                if !dir.exists() {
                    return Ok(out);
                }
                for shard in fs::read_dir(dir)? {
                    let shard = shard?;
                    if !shard.file_type()?.is_dir() {
                        continue;
                    }
                    for f in fs::read_dir(shard.path())? {
                        let f = f?;
                        let name = f.file_name().to_string_lossy().into_owned();
                        if name.len() == 64 && name.bytes().all(|b| b.is_ascii_hexdigit()) {
                            out.push((name, f.metadata()?.len()));
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn write(&mut self, sha: &str, bytes: &[u8]) -> Result<(), StoreError> {
        match self {
            BlobBackend::Memory(m) => {
                m.insert(sha.to_string(), bytes.to_vec());
                Ok(())
            }
            BlobBackend::Dir(dir) => {
                let path = Self::path(dir, sha);
                let parent = path.parent().expect("blob path has a shard dir");
                fs::create_dir_all(parent)?;
                let tmp = parent.join(format!(".{sha}.tmp"));
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
                fs::rename(&tmp, &path)?;
                Ok(())
            }
        }
    }

    pub fn read(&self, r: &BlobRef) -> Result<Vec<u8>, StoreError> {
        let bytes = match self {
            BlobBackend::Memory(m) => m.get(&r.sha256).cloned().ok_or(StoreError::NotFound)?,
            BlobBackend::Dir(dir) => match fs::read(Self::path(dir, &r.sha256)) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(StoreError::NotFound)
                }
                Err(e) => return Err(e.into()),
            },
        };
        if sha256_hex(&bytes) != r.sha256 {
            return Err(StoreError::IntegrityError(r.sha256.clone()));
        }
        Ok(bytes)
    }

    pub fn flip_bit(&mut self, r: &BlobRef, byte: usize) -> Result<(), StoreError> {
        match self {
            BlobBackend::Memory(m) => {
                let b = m.get_mut(&r.sha256).ok_or(StoreError::NotFound)?;
                let i = byte % b.len();
                b[i] ^= 1;
            }
            BlobBackend::Dir(dir) => {
                let path = Self::path(dir, &r.sha256);
                let mut b = fs::read(&path)?;
                let i = byte % b.len();
                b[i] ^= 1;
                fs::write(&path, b)?;
            }
        }
        Ok(())
    }
}
