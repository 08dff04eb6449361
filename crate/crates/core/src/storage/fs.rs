use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{validate_key, BlobStore};
use crate::error::{Error, Result};

const TMP_SUFFIX: &str = ".tmp";

/// Directory-backed store: one file per key, `/` in keys maps to subdirectories.
/// Puts write a `.tmp` sibling and rename it into place; `.tmp` files are never listed.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    seq: AtomicU64,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FsStore {
            root,
            seq: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: &str) -> Result<PathBuf> {
        validate_key(key)?;
        let bad = |reason: &str| Error::InvalidKey {
            key: key.into(),
            reason: reason.into(),
        };
        if key.ends_with(TMP_SUFFIX) {
            return Err(bad("keys may not end in .tmp"));
        }
        let mut path = self.root.clone();
        for seg in key.split('/') {
            if seg.is_empty() || seg == "." || seg == ".." || seg.contains('\\') {
                return Err(bad("empty or relative path segment"));
            }
            path.push(seg);
        }
        Ok(path)
    }

    fn collect(&self, dir: &Path, rel: &str, prefix: &str, out: &mut Vec<(String, PathBuf)>) -> io::Result<()> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let key = if rel.is_empty() {
                name.clone()
            } else {
                format!("{rel}/{name}")
            };
            let ty = entry.file_type()?;
            if ty.is_dir() {
                // only descend where the prefix could still match
                if key.starts_with(prefix) || prefix.starts_with(&format!("{key}/")) {
                    self.collect(&entry.path(), &key, prefix, out)?;
                }
            } else if !name.ends_with(TMP_SUFFIX) && key.starts_with(prefix) {
                out.push((key, entry.path()));
            }
        }
        Ok(())
    }

    fn matching(&self, prefix: &str) -> Result<Vec<(String, PathBuf)>> {
        let mut out = Vec::new();
        self.collect(&self.root, "", prefix, &mut out)?;
        out.sort();
        Ok(out)
    }
}

impl BlobStore for FsStore {
    fn put(&self, key: &str, value: &[u8]) -> Result<()> {
        let path = self.path_of(key)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let mut tmp = path.clone().into_os_string();
        tmp.push(format!(".{}.{seq}{TMP_SUFFIX}", std::process::id()));
        let tmp = PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(value)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        let path = self.path_of(key)?;
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        Ok(self.matching(prefix)?.into_iter().map(|(k, _)| k).collect())
    }

    fn delete(&self, prefix: &str) -> Result<usize> {
        let doomed = self.matching(prefix)?;
        let mut n = 0;
        for (_, path) in doomed {
            match fs::remove_file(&path) {
                Ok(()) => n += 1,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tmp_files_are_invisible() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path()).unwrap();
        store.put("c/0/0/1/0", b"chunk").unwrap();
        fs::write(dir.path().join("c/0/0/1/0.99.0.tmp"), b"half").unwrap();
        assert_eq!(store.list("c/").unwrap(), vec!["c/0/0/1/0".to_string()]);
        assert_eq!(fs::read(dir.path().join("c/0/0/1/0")).unwrap(), b"chunk");
    }

    #[test]
    fn rejects_path_escapes() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path()).unwrap();
        for key in ["../x", "a//b", "/abs", "a/./b", "x.tmp"] {
            assert!(matches!(store.put(key, b"v"), Err(Error::InvalidKey { .. })), "{key}");
        }
    }
}
