//! Content-versioned repository: git for history, an annex layer for large or
//! binary files.
//!
//! All mutating operations assume a single writer per clone; callers serialize
//! them with the workflow lock.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annex::{self, ObjectStore};
use crate::git::{split_nul, Git};
use crate::paths::{PathError, PathSet, RelPath};

pub const CONFIG_DIR: &str = ".batchvc";
pub const CONFIG_FILE: &str = ".batchvc/config.toml";
pub const DEFAULT_SIZE_THRESHOLD: u64 = 1024 * 1024;
/// Bytes inspected when sniffing for binary content.
pub const SNIFF_BYTES: usize = 8 * 1024;
const REMOTE_CONFIG_KEY: &str = "batchvc.annex-remote";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("`{0}` is not inside a batchvc repository")]
    NotARepository(PathBuf),
    #[error("input `{0}` is not tracked in the repository")]
    MissingInput(RelPath),
    #[error("content of `{path}` is not available: {reason}")]
    RetrievalFailure { path: RelPath, reason: String },
    #[error("`{command}` failed (exit {code:?}): {stderr}")]
    Backend {
        command: String,
        code: Option<i32>,
        stdout: String,
        stderr: String,
    },
    #[error("could not add all paths, nothing committed: {0}")]
    PartialAddFailure(String),
    #[error("branch `{0}` already exists")]
    BranchExists(String),
    #[error("unknown commit `{0}`")]
    UnknownCommit(String),
    #[error("merging {branches:?} conflicts; merge aborted: {detail}")]
    MergeConflict {
        branches: Vec<String>,
        detail: String,
    },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid configuration in {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = RepoError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> RepoError {
    let context = context.into();
    move |source| RepoError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FileClass {
    TrackedText,
    Annexed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnexConfig {
    #[serde(default = "default_threshold")]
    pub size_threshold_bytes: u64,
}

fn default_threshold() -> u64 {
    DEFAULT_SIZE_THRESHOLD
}

impl Default for AnnexConfig {
    fn default() -> Self {
        AnnexConfig {
            size_threshold_bytes: DEFAULT_SIZE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub id: String,
}

/// Contents of `.batchvc/config.toml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub annex: AnnexConfig,
}

/// Annex when larger than the threshold or when a NUL byte shows up in the
/// first [`SNIFF_BYTES`] bytes.
pub fn classify_bytes(head: &[u8], size: u64, config: &AnnexConfig) -> FileClass {
    let sniff = &head[..head.len().min(SNIFF_BYTES)];
    if size > config.size_threshold_bytes || sniff.contains(&0) {
        FileClass::Annexed
    } else {
        FileClass::TrackedText
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommitId(String);

impl CommitId {
    pub fn new(hash: impl Into<String>) -> Self {
        CommitId(hash.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..self.0.len().min(10)]
    }
}

impl std::fmt::Display for CommitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed(CommitId),
    NoChange,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BranchRef {
    pub name: String,
    pub head: CommitId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieval {
    pub path: RelPath,
    pub was_fetched: bool,
}

#[derive(Debug, Clone)]
pub struct RepositoryHandle {
    root: PathBuf,
    git_dir: PathBuf,
    dataset_id: String,
    config: RepoConfig,
    git: Git,
    store: ObjectStore,
}

impl RepositoryHandle {
    /// Creates a repository at `path` with an initial commit holding the
    /// dataset configuration.
    pub fn init(path: &Path, dataset_id: Option<String>) -> Result<Self> {
        fs::create_dir_all(path).map_err(io_err(format!("creating {}", path.display())))?;
        let git = Git::new(path);
        git.run(["init", "-q", "-b", "main"])?;
        ensure_identity(&git)?;
        let config = RepoConfig {
            dataset: DatasetSection {
                id: dataset_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            },
            annex: AnnexConfig::default(),
        };
        let cfg_path = path.join(CONFIG_FILE);
        fs::create_dir_all(path.join(CONFIG_DIR)).map_err(io_err("creating config dir"))?;
        let text = toml::to_string(&config).expect("config serializes");
        fs::write(&cfg_path, text).map_err(io_err("writing config"))?;
        git.run(["add", "--", CONFIG_FILE])?;
        git.run_with_stdin(
            ["commit", "-q", "--no-verify", "--cleanup=verbatim", "-F", "-"],
            Some(b"[batchvc] create dataset\n"),
        )?;
        Self::open(path)
    }

    /// Opens the repository containing `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let probe = Git::new(path);
        let top = probe
            .run_text(["rev-parse", "--show-toplevel"])
            .map_err(|_| RepoError::NotARepository(path.to_path_buf()))?;
        let root = PathBuf::from(top);
        let git = Git::new(&root);
        let git_dir = PathBuf::from(git.run_text(["rev-parse", "--absolute-git-dir"])?);
        let cfg_path = root.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path)
            .map_err(|_| RepoError::NotARepository(root.clone()))?;
        let config: RepoConfig = toml::from_str(&text).map_err(|e| RepoError::Config {
            path: cfg_path,
            reason: e.to_string(),
        })?;
        Ok(RepositoryHandle {
            dataset_id: config.dataset.id.clone(),
            store: ObjectStore::new(&git_dir),
            root,
            git_dir,
            config,
            git,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn git_dir(&self) -> &Path {
        &self.git_dir
    }

    /// Clone-local directory for batchvc's own state.
    pub fn state_dir(&self) -> PathBuf {
        self.git_dir.join("batchvc")
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn config(&self) -> &RepoConfig {
        &self.config
    }

    pub fn abs(&self, path: &RelPath) -> PathBuf {
        path.to_path(&self.root)
    }

    pub fn classify_file(&self, path: &Path) -> Result<FileClass> {
        let meta = fs::metadata(path).map_err(io_err(format!("stat {}", path.display())))?;
        let mut head = Vec::with_capacity(SNIFF_BYTES);
        File::open(path)
            .and_then(|f| f.take(SNIFF_BYTES as u64).read_to_end(&mut head))
            .map_err(io_err(format!("reading {}", path.display())))?;
        Ok(classify_bytes(&head, meta.len(), &self.config.annex))
    }

    /// Registers another clone (or a bare objects directory) as an annex source.
    pub fn add_annex_remote(&self, dir: &Path) -> Result<()> {
        self.git.run([
            "config",
            "--add",
            REMOTE_CONFIG_KEY,
            &dir.to_string_lossy(),
        ])?;
        Ok(())
    }

    fn annex_remotes(&self) -> Result<Vec<ObjectStore>> {
        let out = self.git.output(["config", "--get-all", REMOTE_CONFIG_KEY], None)?;
        Ok(String::from_utf8_lossy(&out.stdout)
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| ObjectStore::remote(Path::new(l)))
            .collect())
    }

    /// Tracked files (index entries) at or below any of `paths`.
    pub fn tracked_files(&self, paths: &PathSet) -> Result<Vec<RelPath>> {
        if paths.is_empty() {
            return Ok(Vec::new());
        }
        let mut args = vec!["ls-files".to_string(), "-z".into(), "--".into()];
        args.extend(paths.to_strings());
        let raw = self.git.run(args)?;
        split_nul(&raw)
            .iter()
            .map(|s| RelPath::new(s).map_err(RepoError::from))
            .collect()
    }

    pub fn tracked_file_count(&self) -> Result<usize> {
        Ok(split_nul(&self.git.run(["ls-files", "-z"])?).len())
    }

    /// Makes the content of every annexed input locally available.
    pub fn ensure_inputs_present(&self, inputs: &PathSet) -> Result<Vec<Retrieval>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let files = self.tracked_files(inputs)?;
        for input in inputs {
            if !files.iter().any(|f| input.contains(f)) {
                return Err(RepoError::MissingInput(input.clone()));
            }
        }
        let mut remotes = None;
        let mut report = Vec::with_capacity(files.len());
        for file in files {
            let abs = self.abs(&file);
            let mut was_fetched = false;
            if let Some(key) = annex::annex_link_key(&abs) {
                if !self.store.has(&key) {
                    if remotes.is_none() {
                        remotes = Some(self.annex_remotes()?);
                    }
                    let mut got = false;
                    for remote in remotes.as_deref().unwrap_or_default() {
                        match self.store.fetch_from(remote, &key) {
                            Ok(true) => {
                                got = true;
                                break;
                            }
                            Ok(false) => {}
                            Err(e) => log::warn!("fetching {file} failed: {e}"),
                        }
                    }
                    if !got {
                        return Err(RepoError::RetrievalFailure {
                            path: file,
                            reason: format!("no annex remote has {}", key.as_str()),
                        });
                    }
                    was_fetched = true;
                }
            }
            report.push(Retrieval {
                path: file,
                was_fetched,
            });
        }
        Ok(report)
    }

    /// True when the content behind `path` can be read locally.
    pub fn content_present(&self, path: &RelPath) -> bool {
        let abs = self.abs(path);
        match annex::annex_link_key(&abs) {
            Some(key) => self.store.has(&key),
            None => abs.exists(),
        }
    }

    /// Removes the local copy of an annexed file's content.
    pub fn drop_content(&self, path: &RelPath) -> Result<()> {
        let abs = self.abs(path);
        let key = annex::annex_link_key(&abs)
            .ok_or_else(|| RepoError::Precondition(format!("`{path}` is not an annexed file")))?;
        self.store
            .drop_object(&key)
            .map_err(io_err(format!("dropping {path}")))
    }

    /// Makes existing annexed files among `outputs` writable.
    pub fn unlock_outputs(&self, outputs: &PathSet) -> Result<()> {
        for out in outputs {
            let abs = self.abs(out);
            for file in walk_files(&abs).map_err(io_err(format!("listing {out}")))? {
                if let Some(key) = annex::annex_link_key(&file) {
                    if !self.store.has(&key) {
                        return Err(RepoError::RetrievalFailure {
                            path: RelPath::relative_to(&file, &self.root)?,
                            reason: "cannot unlock a file whose content is absent".into(),
                        });
                    }
                    annex::unlock(&file, &self.store, &key)
                        .map_err(io_err(format!("unlocking {}", file.display())))?;
                }
            }
        }
        Ok(())
    }

    /// Moves content of annex-class regular files under `paths` into the
    /// object store, leaving locked symlinks behind.
    pub fn annexify(&self, paths: &PathSet) -> Result<()> {
        for p in paths {
            let abs = self.abs(p);
            for file in walk_files(&abs).map_err(io_err(format!("listing {p}")))? {
                let meta = fs::symlink_metadata(&file).map_err(io_err("stat"))?;
                if !meta.file_type().is_file() {
                    continue;
                }
                if self.classify_file(&file)? == FileClass::Annexed {
                    let key = self
                        .store
                        .ingest(&file)
                        .map_err(io_err(format!("annexing {}", file.display())))?;
                    annex::write_link(&file, &self.root, &self.store, &key)
                        .map_err(io_err(format!("linking {}", file.display())))?;
                }
            }
        }
        Ok(())
    }

    /// Pathspecs from `paths` that exist in the worktree or the index.
    fn live_pathspecs(&self, git: &Git, paths: &PathSet) -> Result<Vec<String>> {
        let mut args = vec!["ls-files".to_string(), "-z".into(), "--".into()];
        args.extend(paths.to_strings());
        let tracked: Vec<RelPath> = split_nul(&git.run(args)?)
            .iter()
            .map(|s| RelPath::new(s))
            .collect::<std::result::Result<_, _>>()?;
        Ok(paths
            .iter()
            .filter(|p| {
                fs::symlink_metadata(self.abs(p)).is_ok() || tracked.iter().any(|t| p.contains(t))
            })
            .map(|p| p.as_str().to_string())
            .collect())
    }

    fn stage(&self, git: &Git, specs: &[String]) -> Result<()> {
        let mut add = vec!["add".to_string(), "-A".into(), "--".into()];
        add.extend(specs.iter().cloned());
        if let Err(e) = git.run(&add) {
            let mut reset = vec!["reset".to_string(), "-q".into(), "--".into()];
            reset.extend(specs.iter().cloned());
            let _ = git.run(&reset);
            return Err(RepoError::PartialAddFailure(e.to_string()));
        }
        Ok(())
    }

    /// Commits the current worktree state of `paths` on the checked-out branch.
    pub fn commit_paths(&self, paths: &PathSet, message: &str) -> Result<CommitOutcome> {
        if message.trim().is_empty() {
            return Err(RepoError::Precondition("commit message is empty".into()));
        }
        self.annexify(paths)?;
        let specs = self.live_pathspecs(&self.git, paths)?;
        if specs.is_empty() {
            return Ok(CommitOutcome::NoChange);
        }
        self.stage(&self.git, &specs)?;
        let mut diff = vec![
            "diff".to_string(),
            "--cached".into(),
            "--quiet".into(),
            "--".into(),
        ];
        diff.extend(specs.iter().cloned());
        if self.git.output(&diff, None)?.status.success() {
            return Ok(CommitOutcome::NoChange);
        }
        let mut commit = vec![
            "commit".to_string(),
            "-q".into(),
            "--no-verify".into(),
            "--cleanup=verbatim".into(),
            "-F".into(),
            "-".into(),
            "--".into(),
        ];
        commit.extend(specs);
        self.git.run_with_stdin(&commit, Some(message.as_bytes()))?;
        Ok(CommitOutcome::Committed(self.head()?))
    }

    /// Commits `paths` onto `branch` without touching HEAD, the index, or the
    /// checkout.
    pub fn commit_paths_to_branch(
        &self,
        branch: &str,
        paths: &PathSet,
        message: &str,
    ) -> Result<CommitOutcome> {
        if message.trim().is_empty() {
            return Err(RepoError::Precondition("commit message is empty".into()));
        }
        let refname = format!("refs/heads/{branch}");
        let old = self.resolve(&refname)?;
        self.annexify(paths)?;
        let state = self.state_dir();
        fs::create_dir_all(&state).map_err(io_err("creating state dir"))?;
        let index = state.join(format!("index.{branch}"));
        let git = self.git.with_index(&index);
        let result = (|| {
            git.run(["read-tree", old.as_str()])?;
            let specs = self.live_pathspecs(&git, paths)?;
            if specs.is_empty() {
                return Ok(CommitOutcome::NoChange);
            }
            self.stage(&git, &specs)?;
            let mut diff = vec![
                "diff".to_string(),
                "--cached".into(),
                "--quiet".into(),
                old.as_str().to_string(),
                "--".into(),
            ];
            diff.extend(specs);
            if git.output(&diff, None)?.status.success() {
                return Ok(CommitOutcome::NoChange);
            }
            let tree = String::from_utf8_lossy(&git.run(["write-tree"])?).trim().to_string();
            let commit = git.run_with_stdin(
                ["commit-tree", tree.as_str(), "-p", old.as_str(), "-F", "-"],
                Some(message.as_bytes()),
            )?;
            let commit = String::from_utf8_lossy(&commit).trim().to_string();
            self.git
                .run(["update-ref", refname.as_str(), commit.as_str(), old.as_str()])?;
            Ok(CommitOutcome::Committed(CommitId(commit)))
        })();
        let _ = fs::remove_file(&index);
        result
    }

    pub fn head(&self) -> Result<CommitId> {
        self.resolve("HEAD")
    }

    pub fn current_branch(&self) -> Result<String> {
        self.git.run_text(["symbolic-ref", "--short", "HEAD"])
    }

    /// Resolves a revision to a full commit hash.
    pub fn resolve(&self, rev: &str) -> Result<CommitId> {
        let spec = format!("{rev}^{{commit}}");
        let out = self
            .git
            .output(["rev-parse", "--verify", "--quiet", spec.as_str()], None)?;
        if !out.status.success() {
            return Err(RepoError::UnknownCommit(rev.to_string()));
        }
        Ok(CommitId(String::from_utf8_lossy(&out.stdout).trim().to_string()))
    }

    pub fn branch_exists(&self, name: &str) -> Result<bool> {
        let refname = format!("refs/heads/{name}");
        Ok(self
            .git
            .output(["show-ref", "--verify", "--quiet", refname.as_str()], None)?
            .status
            .success())
    }

    pub fn create_job_branch(&self, base: &CommitId, name: &str) -> Result<BranchRef> {
        if self.branch_exists(name)? {
            return Err(RepoError::BranchExists(name.to_string()));
        }
        let base = self.resolve(base.as_str())?;
        self.git.run(["branch", name, base.as_str()])?;
        Ok(BranchRef {
            name: name.to_string(),
            head: base,
        })
    }

    pub fn list_branches(&self) -> Result<Vec<BranchRef>> {
        let text = self.git.run_text([
            "for-each-ref",
            "--format=%(refname:short) %(objectname)",
            "refs/heads/",
        ])?;
        Ok(text
            .lines()
            .filter_map(|l| l.split_once(' '))
            .map(|(n, h)| BranchRef {
                name: n.to_string(),
                head: CommitId(h.to_string()),
            })
            .collect())
    }

    /// Merges every branch into HEAD with one merge commit. Aborts and leaves
    /// HEAD and the branches untouched on any conflict.
    pub fn octopus_merge(&self, branches: &[BranchRef], message: &str) -> Result<CommitId> {
        if branches.len() < 2 {
            return Err(RepoError::Precondition(format!(
                "octopus merge needs at least 2 branches, got {}",
                branches.len()
            )));
        }
        let before = self.head()?;
        let state = self.state_dir();
        fs::create_dir_all(&state).map_err(io_err("creating state dir"))?;
        let msg_file = state.join("MERGE_MSG.batchvc");
        fs::write(&msg_file, message).map_err(io_err("writing merge message"))?;
        let mut args = vec![
            "merge".to_string(),
            "-q".into(),
            "--no-ff".into(),
            "--no-edit".into(),
            "--no-verify".into(),
            "--cleanup=verbatim".into(),
            "-F".into(),
            msg_file.to_string_lossy().into_owned(),
        ];
        args.extend(branches.iter().map(|b| b.name.clone()));
        let out = self.git.output(&args, None);
        let _ = fs::remove_file(&msg_file);
        let out = out?;
        if !out.status.success() {
            if self.git_dir.join("MERGE_HEAD").exists() {
                let _ = self.git.run(["merge", "--abort"]);
            }
            if self.head()? != before {
                let _ = self.git.run(["reset", "-q", "--keep", before.as_str()]);
            }
            return Err(RepoError::MergeConflict {
                branches: branches.iter().map(|b| b.name.clone()).collect(),
                detail: format!(
                    "{}{}",
                    String::from_utf8_lossy(&out.stdout),
                    String::from_utf8_lossy(&out.stderr)
                ),
            });
        }
        self.head()
    }

    /// Advances HEAD to `branch` when that needs no merge commit.
    pub fn fast_forward(&self, branch: &BranchRef) -> Result<CommitId> {
        let out = self
            .git
            .output(["merge", "-q", "--ff-only", branch.name.as_str()], None)?;
        if !out.status.success() {
            return Err(RepoError::Precondition(format!(
                "cannot fast-forward to `{}`: {}",
                branch.name,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        self.head()
    }

    /// Full commit message, byte-exact.
    pub fn read_commit_message(&self, commit: &CommitId) -> Result<String> {
        let id = self.resolve(commit.as_str())?;
        let raw = self.git.run(["cat-file", "commit", id.as_str()])?;
        let text = String::from_utf8_lossy(&raw);
        match text.find("\n\n") {
            Some(i) => Ok(text[i + 2..].to_string()),
            None => Ok(String::new()),
        }
    }

    pub fn parents(&self, commit: &CommitId) -> Result<Vec<CommitId>> {
        let text = self
            .git
            .run_text(["rev-list", "--parents", "-n", "1", commit.as_str()])?;
        Ok(text
            .split_whitespace()
            .skip(1)
            .map(|h| CommitId(h.to_string()))
            .collect())
    }

    pub fn commit_count(&self) -> Result<usize> {
        let text = self.git.run_text(["rev-list", "--count", "HEAD"])?;
        text.trim()
            .parse()
            .map_err(|_| RepoError::Precondition(format!("unexpected rev-list output `{text}`")))
    }

    /// Tree hash of `rev`, or of `rev:path` when a path is given.
    pub fn tree_hash(&self, rev: &str, path: Option<&RelPath>) -> Result<String> {
        let spec = match path {
            Some(p) if !p.is_root() => format!("{rev}:{}", p.as_str()),
            _ => format!("{rev}^{{tree}}"),
        };
        self.git.run_text(["rev-parse", spec.as_str()])
    }

    /// Files in `rev` (recursive), as repository-relative paths.
    pub fn files_at(&self, rev: &str) -> Result<BTreeSet<RelPath>> {
        let raw = self.git.run(["ls-tree", "-r", "-z", "--name-only", rev])?;
        split_nul(&raw)
            .iter()
            .map(|s| RelPath::new(s).map_err(RepoError::from))
            .collect()
    }

    /// Worktree paths whose state differs from HEAD (modified, deleted,
    /// type-changed, or untracked).
    pub fn dirty_paths(&self) -> Result<Vec<RelPath>> {
        self.status_paths(None)
    }

    fn status_paths(&self, paths: Option<&PathSet>) -> Result<Vec<RelPath>> {
        let mut args = vec![
            "status".to_string(),
            "--porcelain=v1".into(),
            "-z".into(),
            "--untracked-files=all".into(),
            "--no-renames".into(),
        ];
        if let Some(paths) = paths {
            if paths.is_empty() {
                return Ok(Vec::new());
            }
            args.push("--".into());
            args.extend(paths.to_strings());
        }
        let raw = self.git.run(args)?;
        split_nul(&raw)
            .iter()
            .filter(|e| e.len() > 3)
            .map(|e| RelPath::new(&e[3..]).map_err(RepoError::from))
            .collect()
    }

    /// True when anything under `paths` differs from HEAD after re-locking
    /// unlocked annexed files.
    pub fn has_changes(&self, paths: &PathSet) -> Result<bool> {
        self.annexify(paths)?;
        Ok(!self.status_paths(Some(paths))?.is_empty())
    }

    /// Worktree files under `paths` that differ from HEAD.
    pub fn changed_paths(&self, paths: &PathSet) -> Result<Vec<RelPath>> {
        self.status_paths(Some(paths))
    }

    /// Restores tracked files under `paths` to their HEAD state.
    pub fn checkout_head(&self, paths: &PathSet) -> Result<()> {
        let tracked = self.tracked_files(paths)?;
        if tracked.is_empty() {
            return Ok(());
        }
        let mut args = vec!["checkout".to_string(), "-q".into(), "HEAD".into(), "--".into()];
        args.extend(tracked.iter().map(|p| p.as_str().to_string()));
        self.git.run(args)?;
        Ok(())
    }
}

fn ensure_identity(git: &Git) -> Result<()> {
    for (key, value) in [("user.name", "batchvc"), ("user.email", "batchvc@localhost")] {
        if !git.output(["config", key], None)?.status.success() {
            git.run(["config", key, value])?;
        }
    }
    Ok(())
}

/// Regular files and symlinks at or below `path`, skipping `.git`. A
/// nonexistent path yields nothing.
pub(crate) fn walk_files(path: &Path) -> io::Result<Vec<PathBuf>> {
    let meta = match fs::symlink_metadata(path) {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    if !meta.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&dir)?.collect::<io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            if entry.file_name() == ".git" {
                continue;
            }
            let ft = entry.file_type()?;
            if ft.is_dir() {
                stack.push(entry.path());
            } else {
                out.push(entry.path());
            }
        }
    }
    Ok(out)
}
