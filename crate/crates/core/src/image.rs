//! Image references as they appear in datasets and on the command line.
//!
//! A reference is either a local file path or a URL. Only the digest is
//! needed by the pipeline; bytes are read lazily and never decoded.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ImageLocation {
    File(PathBuf),
    Url(String),
}

#[derive(Clone)]
pub struct ImageRef {
    reference: String,
    location: ImageLocation,
    digest: Arc<OnceLock<String>>,
}

impl ImageRef {
    /// Parses a reference, resolving relative paths against `base_dir`.
    pub fn resolve(reference: &str, base_dir: Option<&Path>) -> Result<Self> {
        let trimmed = reference.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidInput("empty image reference".into()));
        }
        let location = if is_url(trimmed) {
            url::Url::parse(trimmed)
                .map_err(|e| Error::InvalidInput(format!("bad image url `{trimmed}`: {e}")))?;
            ImageLocation::Url(trimmed.to_owned())
        } else {
            let path = Path::new(trimmed);
            let path = match base_dir {
                Some(base) if path.is_relative() => base.join(path),
                _ => path.to_path_buf(),
            };
            ImageLocation::File(path)
        };
        Ok(Self {
            reference: trimmed.to_owned(),
            location,
            digest: Arc::new(OnceLock::new()),
        })
    }

    pub fn new(reference: &str) -> Result<Self> {
        Self::resolve(reference, None)
    }

    /// The reference exactly as written by the user or dataset.
    pub fn reference(&self) -> &str {
        &self.reference
    }

    pub fn location(&self) -> &ImageLocation {
        &self.location
    }

    /// SHA-256 of the file bytes, or of the URL string for remote images.
    pub fn digest(&self) -> Result<String> {
        if let Some(d) = self.digest.get() {
            return Ok(d.clone());
        }
        let d = match &self.location {
            ImageLocation::File(path) => {
                let bytes = std::fs::read(path).map_err(|e| {
                    Error::Precondition(format!("image {} not readable: {e}", path.display()))
                })?;
                hex::encode(Sha256::digest(&bytes))
            }
            ImageLocation::Url(u) => hex::encode(Sha256::digest(u.as_bytes())),
        };
        Ok(self.digest.get_or_init(|| d).clone())
    }

    pub fn read_bytes(&self) -> Result<Vec<u8>> {
        match &self.location {
            ImageLocation::File(path) => std::fs::read(path).map_err(|e| {
                Error::Precondition(format!("image {} not readable: {e}", path.display()))
            }),
            ImageLocation::Url(u) => Err(Error::InvalidInput(format!(
                "image `{u}` is remote and has no local bytes"
            ))),
        }
    }
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://") || s.starts_with("data:")
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.reference == other.reference && self.location == other.location
    }
}

impl Eq for ImageRef {}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ImageRef").field(&self.reference).finish()
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reference)
    }
}

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.reference)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ImageRef::new(&s).map_err(serde::de::Error::custom)
    }
}
