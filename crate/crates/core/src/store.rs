//! Binary embedding store.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CQEMB1" | u16 version = 1 | u32 dim | u64 count
//! count × [u16 key_len | key bytes (UTF-8) | dim × f32]
//! 8-byte checksum (first 8 bytes of SHA-256 over all preceding bytes)
//! ```
//!
//! Keys are role-prefixed ids (`P:<post_id>`, `Q:<cid>`, `A:<cid>`). The
//! encoder tag, when known, lives in a `<store>.meta.json` sidecar so the
//! binary layout stays fixed.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{checksum8, sha256_hex};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 6] = b"CQEMB1";
pub const STORE_VERSION: u16 = 1;
/// magic + version + dim + count
pub const STORE_HEADER_LEN: usize = 6 + 2 + 4 + 8;
pub const CHECKSUM_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Post,
    Question,
    Answer,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Post => "P:",
            Role::Question => "Q:",
            Role::Answer => "A:",
        }
    }

    pub fn key(self, id: &str) -> String {
        format!("{}{id}", self.prefix())
    }

    fn of_key(key: &str) -> &'static str {
        match key.get(..2) {
            Some("P:") => "post",
            Some("Q:") => "question",
            Some("A:") => "answer",
            _ => "unprefixed",
        }
    }
}

/// A dense embedding with every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding value at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

/// Read access to embeddings by key.
pub trait EmbeddingLookup {
    fn dim(&self) -> usize;

    /// The stored vector for `key`. A missing key is an error, never a
    /// zero-vector fallback.
    fn lookup(&self, key: &str) -> Result<&[f32]>;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StoreMeta {
    pub model: String,
    pub dim: usize,
}

/// Immutable in-memory embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    keys: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
    provenance: Option<String>,
}

impl EmbeddingStore {
    /// Builds a store from `(key, vector)` pairs, preserving their order.
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        if dim == 0 {
            return Err(Error::InvalidArgument("store dim must be positive".into()));
        }
        let mut store = Self {
            dim,
            keys: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
            provenance: None,
        };
        for (key, v) in entries {
            store.push(key, v.as_slice())?;
        }
        Ok(store)
    }

    fn push(&mut self, key: String, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::dim(format!("embedding for {key}"), self.dim, values.len()));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("key longer than {} bytes", u16::MAX)));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at index {i} for {key}")));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Validation(format!("duplicate embedding key {key}")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn with_provenance(mut self, model: impl Into<String>) -> Self {
        self.provenance = Some(model.into());
        self
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Serializes to `path` and returns the file's SHA-256 digest.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = encode(self.dim, self.iter());
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        if let Some(model) = &self.provenance {
            let meta = StoreMeta {
                model: model.clone(),
                dim: self.dim,
            };
            let meta_path = meta_path(path);
            let body = serde_json::to_string(&meta).expect("meta serializes");
            fs::write(&meta_path, body).map_err(|e| Error::io(&meta_path, e))?;
        }
        Ok(sha256_hex(&bytes))
    }
}

impl EmbeddingLookup for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, key: &str) -> Result<&[f32]> {
        let i = *self.index.get(key).ok_or_else(|| Error::MissingKey {
            key: key.to_string(),
            role: Role::of_key(key).to_string(),
        })?;
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }
}

pub fn meta_path(store_path: &Path) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn encode<'a>(dim: usize, entries: impl Iterator<Item = (&'a str, &'a [f32])>) -> Vec<u8> {
    let entries: Vec<_> = entries.collect();
    let mut buf = Vec::with_capacity(
        STORE_HEADER_LEN + entries.iter().map(|(k, _)| 2 + k.len() + 4 * dim).sum::<usize>() + CHECKSUM_LEN,
    );
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (key, values) in entries {
        buf.extend_from_slice(&(key.len() as u16).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum8(&buf);
    buf.extend_from_slice(&sum);
    buf
}

/// Validates and writes `entries` in store order. Returns the file digest.
pub fn write_store<I>(entries: I, dim: usize, path: impl AsRef<Path>) -> Result<String>
where
    I: IntoIterator<Item = (String, EmbeddingVector)>,
{
    EmbeddingStore::from_entries(dim, entries)?.write(path)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated at byte offset {}: need {n} bytes for {what}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Reads and fully validates a store file.
pub fn open_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < STORE_MAGIC.len() || &bytes[..STORE_MAGIC.len()] != STORE_MAGIC {
        return Err(Error::format(path, "not an embedding store (bad magic)"));
    }
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: STORE_MAGIC.len(),
    };
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != STORE_VERSION {
        return Err(Error::format(path, format!("unsupported store version {version}")));
    }
    let dim = u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::format(path, "store dim must be positive"));
    }
    let count = u64::from_le_bytes(cur.take(8, "count")?.try_into().unwrap());

    let mut store = EmbeddingStore {
        dim,
        keys: Vec::new(),
        data: Vec::new(),
        index: HashMap::new(),
        provenance: None,
    };
    let mut values = vec![0f32; dim];
    for rec in 0..count {
        let key_len = u16::from_le_bytes(cur.take(2, "key length")?.try_into().unwrap()) as usize;
        let key_bytes = cur.take(key_len, "key")?;
        let key = std::str::from_utf8(key_bytes)
            .map_err(|_| Error::format(path, format!("record {rec}: key is not UTF-8")))?
            .to_string();
        let raw = cur.take(4 * dim, "vector")?;
        for (v, b) in values.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
        store
            .push(key, &values)
            .map_err(|e| Error::format(path, format!("record {rec}: {e}")))?;
    }
    let body_len = cur.pos;
    let stored = cur.take(CHECKSUM_LEN, "checksum")?;
    if cur.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after checksum", bytes.len() - cur.pos),
        ));
    }
    if stored != checksum8(&bytes[..body_len]) {
        return Err(Error::format(path, "checksum mismatch"));
    }

    let meta_path = meta_path(path);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StoreMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.dim != dim {
            return Err(Error::dim(format!("{}", meta_path.display()), dim, meta.dim));
        }
        store.provenance = Some(meta.model);
    }
    Ok(store)
}
