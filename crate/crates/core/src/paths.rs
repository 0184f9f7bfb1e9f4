//! Repository-relative paths and path sets with directory-overlap semantics.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("path `{0}` is absolute; expected a repository-relative path")]
    Absolute(String),
    #[error("path `{0}` escapes the repository root")]
    EscapesRoot(String),
    #[error("path `{0}` names the repository root")]
    RootNotAllowed(String),
    #[error("path `{0}` is not valid UTF-8")]
    NotUtf8(String),
}

/// A normalized, forward-slash separated path relative to a repository root.
///
/// The empty path is the repository root and displays as `.`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelPath(String);

impl RelPath {
    pub fn root() -> Self {
        RelPath(String::new())
    }

    /// Normalizes `raw`: drops `.` and empty segments, resolves `..` lexically.
    pub fn new(raw: &str) -> Result<Self, PathError> {
        if raw.starts_with('/') {
            return Err(PathError::Absolute(raw.to_string()));
        }
        let mut parts: Vec<&str> = Vec::new();
        for seg in raw.split('/') {
            match seg {
                "" | "." => {}
                ".." => {
                    if parts.pop().is_none() {
                        return Err(PathError::EscapesRoot(raw.to_string()));
                    }
                }
                s => parts.push(s),
            }
        }
        Ok(RelPath(parts.join("/")))
    }

    pub fn from_path(path: &Path) -> Result<Self, PathError> {
        if path.is_absolute() {
            return Err(PathError::Absolute(path.display().to_string()));
        }
        let mut parts: Vec<String> = Vec::new();
        for comp in path.components() {
            match comp {
                Component::CurDir => {}
                Component::ParentDir => {
                    if parts.pop().is_none() {
                        return Err(PathError::EscapesRoot(path.display().to_string()));
                    }
                }
                Component::Normal(s) => parts.push(
                    s.to_str()
                        .ok_or_else(|| PathError::NotUtf8(path.display().to_string()))?
                        .to_string(),
                ),
                Component::RootDir | Component::Prefix(_) => {
                    return Err(PathError::Absolute(path.display().to_string()))
                }
            }
        }
        Ok(RelPath(parts.join("/")))
    }

    /// Expresses the absolute `path` relative to `root`, lexically.
    pub fn relative_to(path: &Path, root: &Path) -> Result<Self, PathError> {
        let rel = path
            .strip_prefix(root)
            .map_err(|_| PathError::EscapesRoot(path.display().to_string()))?;
        Self::from_path(rel)
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_str(&self) -> &str {
        if self.0.is_empty() {
            "."
        } else {
            &self.0
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/').filter(|s| !s.is_empty())
    }

    pub fn join(&self, other: &RelPath) -> RelPath {
        match (self.is_root(), other.is_root()) {
            (true, _) => other.clone(),
            (_, true) => self.clone(),
            _ => RelPath(format!("{}/{}", self.0, other.0)),
        }
    }

    pub fn join_str(&self, name: &str) -> Result<RelPath, PathError> {
        Ok(self.join(&RelPath::new(name)?))
    }

    pub fn parent(&self) -> Option<RelPath> {
        if self.is_root() {
            return None;
        }
        Some(match self.0.rfind('/') {
            Some(i) => RelPath(self.0[..i].to_string()),
            None => RelPath::root(),
        })
    }

    pub fn to_path(&self, root: &Path) -> PathBuf {
        if self.is_root() {
            root.to_path_buf()
        } else {
            root.join(&self.0)
        }
    }

    /// True when `self` is a whole-segment ancestor of `other` (or equal).
    pub fn contains(&self, other: &RelPath) -> bool {
        if self.is_root() {
            return true;
        }
        other.0 == self.0
            || (other.0.len() > self.0.len()
                && other.0.starts_with(&self.0)
                && other.0.as_bytes()[self.0.len()] == b'/')
    }

    /// Two paths conflict when equal or when one is an ancestor directory of the other.
    pub fn conflicts_with(&self, other: &RelPath) -> bool {
        self.contains(other) || other.contains(self)
    }

    /// Path of `self` relative to the directory `base`, using `..` as needed.
    pub fn relative_from(&self, base: &RelPath) -> String {
        let a: Vec<&str> = self.segments().collect();
        let b: Vec<&str> = base.segments().collect();
        let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
        let mut parts: Vec<&str> = vec![".."; b.len() - common];
        parts.extend(&a[common..]);
        if parts.is_empty() {
            ".".to_string()
        } else {
            parts.join("/")
        }
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_str())
    }
}

impl TryFrom<String> for RelPath {
    type Error = PathError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        RelPath::new(&value)
    }
}

impl From<RelPath> for String {
    fn from(value: RelPath) -> Self {
        value.as_str().to_string()
    }
}

/// A set of non-root repository-relative paths.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PathSet {
    entries: BTreeSet<RelPath>,
}

impl PathSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse<I, S>(raw: I) -> Result<Self, PathError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = PathSet::new();
        for r in raw {
            set.insert(RelPath::new(r.as_ref())?)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, path: RelPath) -> Result<bool, PathError> {
        if path.is_root() {
            return Err(PathError::RootNotAllowed(path.to_string()));
        }
        Ok(self.entries.insert(path))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelPath> {
        self.entries.iter()
    }

    pub fn contains(&self, path: &RelPath) -> bool {
        self.entries.contains(path)
    }

    /// True when some entry equals `path` or is an ancestor of it.
    pub fn covers(&self, path: &RelPath) -> bool {
        self.entries.iter().any(|e| e.contains(path))
    }

    /// Every `(mine, theirs)` pair that conflicts.
    pub fn conflicts<'a>(&'a self, other: &'a PathSet) -> Vec<(&'a RelPath, &'a RelPath)> {
        let mut out = Vec::new();
        for a in &self.entries {
            for b in &other.entries {
                if a.conflicts_with(b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.entries.iter().map(|p| p.as_str().to_string()).collect()
    }

    pub fn union(&self, other: &PathSet) -> PathSet {
        PathSet {
            entries: self.entries.union(&other.entries).cloned().collect(),
        }
    }
}

impl TryFrom<Vec<String>> for PathSet {
    type Error = PathError;
    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        PathSet::parse(value)
    }
}

impl From<PathSet> for Vec<String> {
    fn from(value: PathSet) -> Self {
        value.to_strings()
    }
}

impl<'a> IntoIterator for &'a PathSet {
    type Item = &'a RelPath;
    type IntoIter = std::collections::btree_set::Iter<'a, RelPath>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
