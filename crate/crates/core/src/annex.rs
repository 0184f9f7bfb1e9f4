//! Content-addressed store for annexed files.
//!
//! An annexed file is committed as a symlink whose target ends in
//! `.git/annex/objects/<aa>/<key>`, where `<key>` is `SHA256-s<size>--<hex>`.
//! The object itself is kept read-only ("locked"). Unlocking replaces the
//! symlink by a writable copy of the content; committing re-annexes it.

use std::fs::{self, File};
use std::io::{self, Read};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub(crate) const OBJECTS_DIR: &str = "annex/objects";
const KEY_PREFIX: &str = "SHA256-s";

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AnnexKey(String);

impl AnnexKey {
    pub(crate) fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix(KEY_PREFIX)?;
        let (size, hex) = rest.split_once("--")?;
        if size.parse::<u64>().is_err()
            || hex.len() != 64
            || !hex.bytes().all(|b| b.is_ascii_hexdigit())
        {
            return None;
        }
        Some(AnnexKey(name.to_string()))
    }

    pub(crate) fn as_str(&self) -> &str {
        &self.0
    }

    fn hex(&self) -> &str {
        self.0.rsplit_once("--").map(|(_, h)| h).unwrap_or_default()
    }

    fn bucket(&self) -> &str {
        &self.hex()[..2]
    }
}

pub(crate) fn key_for_file(path: &Path) -> io::Result<AnnexKey> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        size += n as u64;
        hasher.update(&buf[..n]);
    }
    let hex: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(AnnexKey(format!("{KEY_PREFIX}{size}--{hex}")))
}

#[derive(Debug, Clone)]
pub(crate) struct ObjectStore {
    objects: PathBuf,
}

impl ObjectStore {
    pub(crate) fn new(git_dir: &Path) -> Self {
        ObjectStore {
            objects: git_dir.join(OBJECTS_DIR),
        }
    }

    /// Accepts either an objects directory or a repository root that has one.
    pub(crate) fn remote(dir: &Path) -> Self {
        let nested = dir.join(".git").join(OBJECTS_DIR);
        if nested.is_dir() {
            ObjectStore { objects: nested }
        } else {
            ObjectStore {
                objects: dir.to_path_buf(),
            }
        }
    }

    pub(crate) fn object_path(&self, key: &AnnexKey) -> PathBuf {
        self.objects.join(key.bucket()).join(key.as_str())
    }

    pub(crate) fn has(&self, key: &AnnexKey) -> bool {
        self.object_path(key).is_file()
    }

    /// Moves `file` into the store (or discards it when already stored) and
    /// returns its key.
    pub(crate) fn ingest(&self, file: &Path) -> io::Result<AnnexKey> {
        let key = key_for_file(file)?;
        let dest = self.object_path(&key);
        if dest.is_file() {
            fs::remove_file(file)?;
        } else {
            fs::create_dir_all(dest.parent().expect("object has a bucket dir"))?;
            fs::rename(file, &dest)?;
            fs::set_permissions(&dest, fs::Permissions::from_mode(0o444))?;
        }
        Ok(key)
    }

    /// Copies the object for `key` from `other` and verifies its checksum.
    pub(crate) fn fetch_from(&self, other: &ObjectStore, key: &AnnexKey) -> io::Result<bool> {
        let src = other.object_path(key);
        if !src.is_file() {
            return Ok(false);
        }
        let dest = self.object_path(key);
        let dir = dest.parent().expect("object has a bucket dir");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{}.part", key.as_str()));
        fs::copy(&src, &tmp)?;
        if key_for_file(&tmp)? != *key {
            let _ = fs::remove_file(&tmp);
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("checksum mismatch fetching {}", key.as_str()),
            ));
        }
        fs::set_permissions(&tmp, fs::Permissions::from_mode(0o444))?;
        fs::rename(&tmp, &dest)?;
        Ok(true)
    }

    pub(crate) fn drop_object(&self, key: &AnnexKey) -> io::Result<()> {
        let path = self.object_path(key);
        if path.exists() {
            fs::remove_file(path)?;
        }
        Ok(())
    }
}

/// Returns the key when `path` is a symlink into an annex object store.
pub(crate) fn annex_link_key(path: &Path) -> Option<AnnexKey> {
    let meta = fs::symlink_metadata(path).ok()?;
    if !meta.file_type().is_symlink() {
        return None;
    }
    let target = fs::read_link(path).ok()?;
    let target = target.to_str()?;
    if !target.contains(OBJECTS_DIR) {
        return None;
    }
    AnnexKey::parse(target.rsplit('/').next()?)
}

/// Replaces `path` with a relative symlink to the stored object.
pub(crate) fn write_link(path: &Path, root: &Path, store: &ObjectStore, key: &AnnexKey) -> io::Result<()> {
    let object = store.object_path(key);
    let parent = path.parent().expect("file has a parent");
    let target = relative_link(parent, &object, root);
    if fs::symlink_metadata(path).is_ok() {
        fs::remove_file(path)?;
    }
    symlink(target, path)
}

fn relative_link(from_dir: &Path, to: &Path, root: &Path) -> PathBuf {
    match (from_dir.strip_prefix(root), to.strip_prefix(root)) {
        (Ok(from), Ok(to)) => {
            let mut out = PathBuf::new();
            for _ in from.components() {
                out.push("..");
            }
            out.push(to);
            out
        }
        _ => to.to_path_buf(),
    }
}

/// Swaps the annex symlink at `path` for a writable copy of its content.
pub(crate) fn unlock(path: &Path, store: &ObjectStore, key: &AnnexKey) -> io::Result<()> {
    let object = store.object_path(key);
    let parent = path.parent().expect("file has a parent");
    let name = path.file_name().expect("file has a name").to_string_lossy();
    let tmp = parent.join(format!(".{name}.unlock"));
    fs::copy(&object, &tmp)?;
    fs::set_permissions(&tmp, fs::Permissions::from_mode(0o644))?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x");
        fs::write(&f, b"hello").unwrap();
        let key = key_for_file(&f).unwrap();
        assert_eq!(
            key.as_str(),
            "SHA256-s5--2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert_eq!(AnnexKey::parse(key.as_str()), Some(key));
        assert_eq!(AnnexKey::parse("SHA256-sx--00"), None);
    }

    #[test]
    fn relative_links() {
        let root = Path::new("/r");
        assert_eq!(
            relative_link(Path::new("/r/a/b"), Path::new("/r/.git/annex/objects/aa/K"), root),
            PathBuf::from("../../.git/annex/objects/aa/K")
        );
        assert_eq!(
            relative_link(Path::new("/r"), Path::new("/r/.git/annex/objects/aa/K"), root),
            PathBuf::from(".git/annex/objects/aa/K")
        );
    }
}
