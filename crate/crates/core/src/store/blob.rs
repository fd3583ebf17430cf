use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::domain::BlobKey;
use crate::hash::fnv1a64;

use super::StoreError;

/// A stored payload with its length and content hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub bytes: Vec<u8>,
    pub len: usize,
    pub hash: u64,
}

impl Blob {
    pub fn new(bytes: Vec<u8>) -> Self {
        let hash = fnv1a64(&bytes);
        Blob { len: bytes.len(), hash, bytes }
    }
}

/// Decides whether a put of `key` should fail. Used to inject storage
/// faults in tests.
pub type PutFault = Arc<dyn Fn(&BlobKey) -> bool + Send + Sync>;

/// Filesystem-backed object store.
///
/// Layout: `<root>/<h>/<encoded key>` where `<h>` is the first two hex
/// digits of the key's FNV-1a hash. Every file starts with a one-line
/// header `fnv64:<hex> len:<n>` followed by the raw bytes; reads verify both.
pub struct BlobStore {
    root: PathBuf,
    fault: RwLock<Option<PutFault>>,
    puts: AtomicU64,
    gets: AtomicU64,
    tmp_seq: AtomicU64,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(BlobStore { root, fault: RwLock::new(None), puts: AtomicU64::new(0), gets: AtomicU64::new(0), tmp_seq: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_put_fault(&self, fault: Option<PutFault>) {
        *self.fault.write().unwrap_or_else(|e| e.into_inner()) = fault;
    }

    /// Number of successful (puts, gets).
    pub fn op_counts(&self) -> (u64, u64) {
        (self.puts.load(Ordering::Relaxed), self.gets.load(Ordering::Relaxed))
    }

    pub fn path_for(&self, key: &BlobKey) -> PathBuf {
        let fan = format!("{:02x}", fnv1a64(key.as_str().as_bytes()) >> 56);
        self.root.join(fan).join(encode_key(key.as_str()))
    }

    /// Stores `bytes` under `key`. Re-putting identical bytes is a no-op.
    pub fn put(&self, key: &BlobKey, bytes: &[u8]) -> Result<(), StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        if let Some(fault) = self.fault.read().unwrap_or_else(|e| e.into_inner()).as_ref() {
            if fault(key) {
                return Err(StoreError::Injected(key.to_string()));
            }
        }
        let path = self.path_for(key);
        let hash = fnv1a64(bytes);
        if let Ok(existing) = self.read_verified(key, &path) {
            if existing.hash == hash && existing.bytes == bytes {
                self.puts.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
        }
        let dir = path.parent().expect("fan-out dir");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".tmp-{}-{}", std::process::id(), self.tmp_seq.fetch_add(1, Ordering::Relaxed)));
        {
            let mut f = fs::File::create(&tmp)?;
            writeln!(f, "fnv64:{hash:016x} len:{}", bytes.len())?;
            f.write_all(bytes)?;
        }
        fs::rename(&tmp, &path)?;
        self.puts.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn get(&self, key: &BlobKey) -> Result<Blob, StoreError> {
        let blob = self.read_verified(key, &self.path_for(key))?;
        self.gets.fetch_add(1, Ordering::Relaxed);
        Ok(blob)
    }

    pub fn exists(&self, key: &BlobKey) -> bool {
        self.path_for(key).is_file()
    }

    fn read_verified(&self, key: &BlobKey, path: &Path) -> Result<Blob, StoreError> {
        let raw = match fs::read(path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(key.to_string())),
            Err(e) => return Err(e.into()),
        };
        let mismatch = || StoreError::HashMismatch(key.to_string());
        let nl = raw.iter().position(|b| *b == b'\n').ok_or_else(mismatch)?;
        let header = std::str::from_utf8(&raw[..nl]).map_err(|_| mismatch())?;
        let (hash_part, len_part) = header.split_once(' ').ok_or_else(mismatch)?;
        let want_hash = hash_part
            .strip_prefix("fnv64:")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(mismatch)?;
        let want_len: usize = len_part.strip_prefix("len:").and_then(|n| n.parse().ok()).ok_or_else(mismatch)?;
        let bytes = raw[nl + 1..].to_vec();
        let blob = Blob::new(bytes);
        if blob.len != want_len || blob.hash != want_hash {
            return Err(mismatch());
        }
        Ok(blob)
    }
}

/// Percent-encodes everything outside `[A-Za-z0-9._-]` so a key maps to a
/// single file name.
fn encode_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for b in key.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.starts_with('.') {
        out.replace_range(0..1, "%2E");
    }
    out
}
