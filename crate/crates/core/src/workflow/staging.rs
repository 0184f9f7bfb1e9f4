//! Alternative job directories: mirror inputs out to a scratch tree before a
//! job runs, mirror outputs back afterwards.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::paths::RelPath;
use crate::repo::walk_files;

/// Copies the file or tree at `src` to `dest`, dereferencing symlinks so
/// annexed content lands as real bytes. An absent `src` removes `dest`.
pub(crate) fn mirror(src: &Path, dest: &Path) -> io::Result<()> {
    let src_files = walk_files(src)?;
    if fs::symlink_metadata(src).is_err() {
        return remove_any(dest);
    }
    let src_is_dir = fs::metadata(src)?.is_dir();
    if !src_is_dir {
        if fs::symlink_metadata(dest).map(|m| m.is_dir()).unwrap_or(false) {
            fs::remove_dir_all(dest)?;
        }
        return copy_atomic(src, dest);
    }
    if fs::symlink_metadata(dest).map(|m| !m.is_dir()).unwrap_or(false) {
        fs::remove_file(dest)?;
    }
    fs::create_dir_all(dest)?;
    let mut keep = HashSet::with_capacity(src_files.len());
    for file in &src_files {
        let rel = file.strip_prefix(src).expect("walked below src");
        let target = dest.join(rel);
        copy_atomic(file, &target)?;
        keep.insert(target);
    }
    for existing in walk_files(dest)? {
        if !keep.contains(&existing) {
            fs::remove_file(&existing)?;
        }
    }
    Ok(())
}

/// Copy through a temporary sibling and rename over the destination.
pub(crate) fn copy_atomic(src: &Path, dest: &Path) -> io::Result<()> {
    let dir = dest.parent().expect("destination has a parent");
    fs::create_dir_all(dir)?;
    let name = dest.file_name().expect("destination has a name").to_string_lossy();
    let tmp = dir.join(format!(".{name}.batchvc-tmp"));
    fs::copy(src, &tmp)?;
    if fs::symlink_metadata(dest).map(|m| m.is_dir()).unwrap_or(false) {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(&tmp, dest)
}

fn remove_any(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Moves whatever exists at `src` to `dest`, creating parents.
pub(crate) fn move_aside(src: &Path, dest: &Path) -> io::Result<()> {
    if fs::symlink_metadata(src).is_err() {
        return Ok(());
    }
    if let Some(dir) = dest.parent() {
        fs::create_dir_all(dir)?;
    }
    remove_any(dest)?;
    fs::rename(src, dest)
}

/// Removes `path` if it is an empty directory tree, then empty parents up
/// to (not including) `stop`.
pub(crate) fn prune_empty_dirs(path: &Path, stop: &Path) {
    fn prune(dir: &Path) -> bool {
        let Ok(entries) = fs::read_dir(dir) else {
            return false;
        };
        let mut empty = true;
        for e in entries.flatten() {
            let is_dir = e.file_type().map(|t| t.is_dir()).unwrap_or(false);
            if !(is_dir && prune(&e.path())) {
                empty = false;
            }
        }
        empty && fs::remove_dir(dir).is_ok()
    }
    if fs::symlink_metadata(path).is_ok_and(|m| m.is_dir()) && !prune(path) {
        return;
    }
    let mut cur = path.parent();
    while let Some(dir) = cur {
        if dir == stop || !dir.starts_with(stop) || fs::remove_dir(dir).is_err() {
            break;
        }
        cur = dir.parent();
    }
}

pub(crate) fn staged_path(alt_root: &Path, path: &RelPath) -> PathBuf {
    path.to_path(alt_root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_tree_replaces_and_prunes() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("src");
        let dest = d.path().join("dest");
        fs::create_dir_all(src.join("a")).unwrap();
        fs::write(src.join("a/x"), "1").unwrap();
        fs::create_dir_all(dest.join("a")).unwrap();
        fs::write(dest.join("a/x"), "old").unwrap();
        fs::write(dest.join("stale"), "s").unwrap();
        mirror(&src, &dest).unwrap();
        assert_eq!(fs::read_to_string(dest.join("a/x")).unwrap(), "1");
        assert!(!dest.join("stale").exists());
    }

    #[test]
    fn mirror_absent_source_removes() {
        let d = tempfile::tempdir().unwrap();
        let dest = d.path().join("dest");
        fs::write(&dest, "x").unwrap();
        mirror(&d.path().join("missing"), &dest).unwrap();
        assert!(!dest.exists());
    }

    #[test]
    fn mirror_dereferences_symlinks() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("content"), "payload").unwrap();
        std::os::unix::fs::symlink("content", d.path().join("link")).unwrap();
        let dest = d.path().join("out");
        mirror(&d.path().join("link"), &dest).unwrap();
        assert!(!fs::symlink_metadata(&dest).unwrap().file_type().is_symlink());
        assert_eq!(fs::read_to_string(&dest).unwrap(), "payload");
    }
}
