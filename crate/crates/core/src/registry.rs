//! Durable registry of in-flight jobs for one clone.
//!
//! The store is a SQLite file at `.git/batchvc/registry.db`; a sibling
//! `registry.lock` file serializes writers across processes. The
//! check-conflicts-then-insert sequence runs under the exclusive lock inside a
//! single transaction.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use thiserror::Error;

use crate::lock::FileLock;
use crate::paths::{PathSet, RelPath};
use crate::record::ReproRecord;
use crate::repo::RepositoryHandle;
use crate::scheduler::{ArraySpec, JobId, JobState};

pub const REGISTRY_FILE: &str = "registry.db";
pub const LOCK_FILE: &str = "registry.lock";
pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry is corrupt or from an unknown version: {0}")]
    CorruptRegistry(String),
    #[error("conflicting outputs: {}", describe_conflicts(.0))]
    ConflictDetected(Vec<Conflict>),
    #[error("job {0} is already registered")]
    DuplicateJobId(JobId),
    #[error("job {0} is not in the registry")]
    NotFound(JobId),
    #[error("job {0} is already closed")]
    AlreadyClosed(JobId),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("registry storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("registry lock: {0}")]
    Lock(#[from] std::io::Error),
}

pub type Result<T, E = RegistryError> = std::result::Result<T, E>;

/// A requested path and the open job path it collides with.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Conflict {
    pub scheduler_job_id: JobId,
    pub requested: RelPath,
    pub owned: RelPath,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "`{}` overlaps `{}` of in-flight job {}",
            self.requested, self.owned, self.scheduler_job_id
        )
    }
}

pub fn describe_conflicts(conflicts: &[Conflict]) -> String {
    conflicts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseOutcome {
    Committed,
    Discarded,
}

impl CloseOutcome {
    fn as_str(self) -> &'static str {
        match self {
            CloseOutcome::Committed => "COMMITTED",
            CloseOutcome::Discarded => "DISCARDED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledJob {
    pub scheduler_job_id: JobId,
    /// Record as of scheduling time, including the scheduler-side outputs.
    pub record: ReproRecord,
    pub outputs: PathSet,
    pub inputs: PathSet,
    /// Root of the alternative job directory, when staged.
    pub alt_dir: Option<PathBuf>,
    pub submitted_at: DateTime<Utc>,
    pub is_array: bool,
    pub array: Option<ArraySpec>,
    pub state_cache: JobState,
    /// Free-text commit message given at scheduling.
    pub message: Option<String>,
}

impl ScheduledJob {
    /// Scheduler bookkeeping files (logs, env.json) as repository paths.
    pub fn slurm_outputs(&self) -> Vec<RelPath> {
        self.record
            .slurm_outputs
            .iter()
            .flatten()
            .filter_map(|s| RelPath::new(s).ok())
            .collect()
    }

    /// Paths this job may write: declared outputs plus bookkeeping files.
    pub fn reserved_paths(&self) -> PathSet {
        let mut set = self.outputs.clone();
        for p in self.slurm_outputs() {
            if !p.is_root() {
                let _ = set.insert(p);
            }
        }
        set
    }

    fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(RegistryError::InvalidJob(
                "a job must declare at least one output".into(),
            ));
        }
        self.record
            .validate()
            .map_err(|e| RegistryError::InvalidJob(e.to_string()))
    }
}

/// Closure audit row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedJob {
    pub scheduler_job_id: JobId,
    pub outcome: String,
    pub closed_at: DateTime<Utc>,
}

pub struct Registry {
    conn: Connection,
    lock_path: PathBuf,
    db_path: PathBuf,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("db_path", &self.db_path).finish()
    }
}

const SCHEMA: &str = "
CREATE TABLE meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE jobs (
    job_id INTEGER PRIMARY KEY,
    record TEXT NOT NULL,
    outputs TEXT NOT NULL,
    inputs TEXT NOT NULL,
    reserved TEXT NOT NULL,
    alt_dir TEXT,
    submitted_at TEXT NOT NULL,
    is_array INTEGER NOT NULL,
    array_spec TEXT,
    state_cache TEXT NOT NULL,
    message TEXT,
    open INTEGER NOT NULL DEFAULT 1,
    outcome TEXT,
    closed_at TEXT
);
CREATE INDEX jobs_open ON jobs(open);
CREATE TABLE claims (
    job_id INTEGER NOT NULL REFERENCES jobs(job_id),
    kind TEXT NOT NULL,
    path TEXT NOT NULL
);
CREATE INDEX claims_path ON claims(path);
CREATE INDEX claims_job ON claims(job_id);
";

impl Registry {
    pub fn open(repo: &RepositoryHandle) -> Result<Self> {
        Self::open_in(&repo.state_dir())
    }

    /// Opens (creating on first use) the registry stored in `dir`.
    pub fn open_in(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let db_path = dir.join(REGISTRY_FILE);
        let lock_path = dir.join(LOCK_FILE);
        let _guard = FileLock::exclusive(&lock_path)?;
        let conn = Connection::open(&db_path)
            .map_err(|e| RegistryError::CorruptRegistry(e.to_string()))?;
        conn.busy_timeout(Duration::from_secs(30))?;
        let reg = Registry {
            conn,
            lock_path,
            db_path,
        };
        reg.init_schema()?;
        Ok(reg)
    }

    pub fn path(&self) -> &Path {
        &self.db_path
    }

    fn init_schema(&self) -> Result<()> {
        let corrupt = |e: rusqlite::Error| RegistryError::CorruptRegistry(e.to_string());
        let has_meta: bool = self
            .conn
            .query_row(
                "SELECT count(*) FROM sqlite_master WHERE type = 'table' AND name = 'meta'",
                [],
                |r| r.get::<_, i64>(0),
            )
            .map_err(corrupt)?
            > 0;
        if !has_meta {
            let tables: i64 = self
                .conn
                .query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get(0))
                .map_err(corrupt)?;
            if tables > 0 {
                return Err(RegistryError::CorruptRegistry(
                    "store has tables but no version stamp".into(),
                ));
            }
            self.conn.execute_batch(&format!(
                "BEGIN; {SCHEMA} INSERT INTO meta (key, value) VALUES ('schema_version', '{SCHEMA_VERSION}'); COMMIT;"
            ))?;
            return Ok(());
        }
        let version: Option<String> = self
            .conn
            .query_row(
                "SELECT value FROM meta WHERE key = 'schema_version'",
                [],
                |r| r.get(0),
            )
            .optional()
            .map_err(corrupt)?;
        match version.as_deref().map(str::parse::<i64>) {
            Some(Ok(SCHEMA_VERSION)) => Ok(()),
            other => Err(RegistryError::CorruptRegistry(format!(
                "unsupported schema_version {other:?}"
            ))),
        }
    }

    fn shared(&self) -> Result<FileLock> {
        Ok(FileLock::shared(&self.lock_path)?)
    }

    fn exclusive(&self) -> Result<FileLock> {
        Ok(FileLock::exclusive(&self.lock_path)?)
    }

    /// Open jobs whose declared outputs overlap any of `outputs`.
    pub fn find_conflicts(&self, outputs: &PathSet) -> Result<Vec<Conflict>> {
        let _g = self.shared()?;
        conflicts_against(&self.conn, outputs, &PathSet::new(), false)
    }

    /// Full check used when scheduling: outputs against open jobs' reserved
    /// paths and inputs, and inputs against open jobs' reserved paths.
    pub fn find_conflicts_for(&self, inputs: &PathSet, outputs: &PathSet) -> Result<Vec<Conflict>> {
        let _g = self.shared()?;
        conflicts_against(&self.conn, outputs, inputs, true)
    }

    pub fn register(&mut self, job: &ScheduledJob) -> Result<()> {
        job.validate()?;
        let _g = self.exclusive()?;
        let tx = self
            .conn
            .transaction_with_behavior(TransactionBehavior::Immediate)?;
        let exists: bool = tx
            .query_row(
                "SELECT count(*) FROM jobs WHERE job_id = ?1",
                [job.scheduler_job_id as i64],
                |r| r.get::<_, i64>(0),
            )?
            > 0;
        if exists {
            return Err(RegistryError::DuplicateJobId(job.scheduler_job_id));
        }
        let conflicts = conflicts_against(&tx, &job.reserved_paths(), &job.inputs, true)?;
        if !conflicts.is_empty() {
            return Err(RegistryError::ConflictDetected(conflicts));
        }
        tx.execute(
            "INSERT INTO jobs (job_id, record, outputs, inputs, reserved, alt_dir, submitted_at,
                               is_array, array_spec, state_cache, message)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)",
            params![
                job.scheduler_job_id as i64,
                job.record.to_json(),
                json_paths(&job.outputs),
                json_paths(&job.inputs),
                json_paths(&job.reserved_paths()),
                job.alt_dir.as_ref().map(|p| p.to_string_lossy().into_owned()),
                job.submitted_at.to_rfc3339(),
                job.is_array,
                job.array.map(|a| a.to_string()),
                job.state_cache.as_str(),
                job.message,
            ],
        )?;
        let mut claim = tx.prepare_cached("INSERT INTO claims (job_id, kind, path) VALUES (?1, ?2, ?3)")?;
        let id = job.scheduler_job_id as i64;
        for p in &job.outputs {
            claim.execute(params![id, CLAIM_OUTPUT, p.as_str()])?;
        }
        for p in job.reserved_paths().iter().filter(|p| !job.outputs.contains(p)) {
            claim.execute(params![id, CLAIM_LOG, p.as_str()])?;
        }
        for p in &job.inputs {
            claim.execute(params![id, CLAIM_INPUT, p.as_str()])?;
        }
        drop(claim);
        tx.commit()?;
        Ok(())
    }

    /// Open jobs in ascending id order.
    pub fn list_open(&self) -> Result<Vec<ScheduledJob>> {
        let _g = self.shared()?;
        load_open(&self.conn)
    }

    /// Looks up a job, open or closed.
    pub fn get(&self, id: JobId) -> Result<Option<ScheduledJob>> {
        let _g = self.shared()?;
        let mut stmt = self
            .conn
            .prepare(&format!("SELECT {COLUMNS} FROM jobs WHERE job_id = ?1"))?;
        let row = stmt.query_row([id as i64], row_to_job).optional()?;
        row.transpose()
    }

    pub fn is_open(&self, id: JobId) -> Result<bool> {
        let _g = self.shared()?;
        let open: Option<i64> = self
            .conn
            .query_row("SELECT open FROM jobs WHERE job_id = ?1", [id as i64], |r| {
                r.get(0)
            })
            .optional()?;
        match open {
            None => Err(RegistryError::NotFound(id)),
            Some(o) => Ok(o != 0),
        }
    }

    pub fn update_state_cache(&mut self, id: JobId, state: JobState) -> Result<()> {
        let _g = self.exclusive()?;
        let n = self.conn.execute(
            "UPDATE jobs SET state_cache = ?2 WHERE job_id = ?1",
            params![id as i64, state.as_str()],
        )?;
        if n == 0 {
            return Err(RegistryError::NotFound(id));
        }
        Ok(())
    }

    /// Closes an open job; its outputs stop producing conflicts. The row is
    /// kept as an audit entry.
    pub fn close(&mut self, id: JobId, outcome: CloseOutcome) -> Result<()> {
        let _g = self.exclusive()?;
        let tx = self
            .conn
            .transaction_with_behavior(TransactionBehavior::Immediate)?;
        let open: Option<i64> = tx
            .query_row("SELECT open FROM jobs WHERE job_id = ?1", [id as i64], |r| {
                r.get(0)
            })
            .optional()?;
        match open {
            None => return Err(RegistryError::NotFound(id)),
            Some(0) => return Err(RegistryError::AlreadyClosed(id)),
            Some(_) => {}
        }
        tx.execute(
            "UPDATE jobs SET open = 0, outcome = ?2, closed_at = ?3 WHERE job_id = ?1",
            params![id as i64, outcome.as_str(), Utc::now().to_rfc3339()],
        )?;
        tx.execute("DELETE FROM claims WHERE job_id = ?1", [id as i64])?;
        tx.commit()?;
        Ok(())
    }

    pub fn list_closed(&self) -> Result<Vec<ClosedJob>> {
        let _g = self.shared()?;
        let mut stmt = self.conn.prepare(
            "SELECT job_id, outcome, closed_at FROM jobs WHERE open = 0 ORDER BY job_id",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (id, outcome, at) = row?;
            out.push(ClosedJob {
                scheduler_job_id: id as JobId,
                outcome,
                closed_at: parse_time(&at)?,
            });
        }
        Ok(out)
    }
}

const COLUMNS: &str = "job_id, record, outputs, inputs, reserved, alt_dir, submitted_at, is_array, array_spec, state_cache, message";

fn json_paths(set: &PathSet) -> String {
    serde_json::to_string(&set.to_strings()).expect("strings serialize")
}

fn parse_paths(text: &str) -> Result<PathSet> {
    let raw: Vec<String> = serde_json::from_str(text)
        .map_err(|e| RegistryError::CorruptRegistry(format!("bad path list: {e}")))?;
    PathSet::parse(raw).map_err(|e| RegistryError::CorruptRegistry(e.to_string()))
}

fn parse_time(text: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| RegistryError::CorruptRegistry(format!("bad timestamp `{text}`: {e}")))
}

fn row_to_job(r: &rusqlite::Row<'_>) -> rusqlite::Result<Result<ScheduledJob>> {
    let id: i64 = r.get(0)?;
    let record: String = r.get(1)?;
    let outputs: String = r.get(2)?;
    let inputs: String = r.get(3)?;
    let alt_dir: Option<String> = r.get(5)?;
    let submitted_at: String = r.get(6)?;
    let is_array: bool = r.get(7)?;
    let array_spec: Option<String> = r.get(8)?;
    let state_cache: String = r.get(9)?;
    let message: Option<String> = r.get(10)?;
    Ok((|| {
        let record = ReproRecord::from_json(&record)
            .map_err(|e| RegistryError::CorruptRegistry(e.to_string()))?;
        Ok(ScheduledJob {
                scheduler_job_id: id as JobId,
                record,
                outputs: parse_paths(&outputs)?,
                inputs: parse_paths(&inputs)?,
                alt_dir: alt_dir.map(PathBuf::from),
                submitted_at: parse_time(&submitted_at)?,
                is_array,
                array: array_spec
                    .map(|s| ArraySpec::from_str(&s))
                    .transpose()
                    .map_err(RegistryError::CorruptRegistry)?,
                state_cache: JobState::from_str(&state_cache)
                    .map_err(RegistryError::CorruptRegistry)?,
                message,
        })
    })())
}

fn load_open(conn: &Connection) -> Result<Vec<ScheduledJob>> {
    let mut stmt = conn.prepare(&format!(
        "SELECT {COLUMNS} FROM jobs WHERE open = 1 ORDER BY job_id"
    ))?;
    let rows = stmt.query_map([], row_to_job)?;
    let mut out = Vec::new();
    for row in rows {
        out.push(row??);
    }
    Ok(out)
}

const CLAIM_OUTPUT: &str = "output";
const CLAIM_LOG: &str = "log";
const CLAIM_INPUT: &str = "input";

/// Claims of open jobs on `path`, an ancestor of it, or anything below it.
/// The path index keeps this proportional to the number of overlapping
/// claims rather than the number of open jobs.
fn overlapping_claims(conn: &Connection, path: &RelPath) -> Result<Vec<(JobId, String, RelPath)>> {
    let mut rows = Vec::new();
    let mut push = |id: i64, kind: String, p: String| -> Result<()> {
        let owned = RelPath::new(&p).map_err(|e| RegistryError::CorruptRegistry(e.to_string()))?;
        if owned.conflicts_with(path) {
            rows.push((id as JobId, kind, owned));
        }
        Ok(())
    };
    if path.is_root() {
        let mut stmt = conn.prepare_cached("SELECT job_id, kind, path FROM claims")?;
        let mut q = stmt.query([])?;
        while let Some(r) = q.next()? {
            push(r.get(0)?, r.get(1)?, r.get(2)?)?;
        }
        return Ok(rows);
    }
    let mut ancestors = vec![".".to_string()];
    let segs: Vec<&str> = path.segments().collect();
    for n in 1..=segs.len() {
        ancestors.push(segs[..n].join("/"));
    }
    let marks = vec!["?"; ancestors.len()].join(", ");
    let sql = format!(
        "SELECT job_id, kind, path FROM claims WHERE path IN ({marks}) \
         OR (path > ?{lo} AND path < ?{hi})",
        lo = ancestors.len() + 1,
        hi = ancestors.len() + 2,
    );
    let mut args: Vec<String> = ancestors;
    // Every descendant sorts between "p/" and "p0" ('0' follows '/').
    args.push(format!("{}/", path.as_str()));
    args.push(format!("{}0", path.as_str()));
    let mut stmt = conn.prepare_cached(&sql)?;
    let mut q = stmt.query(rusqlite::params_from_iter(args.iter()))?;
    while let Some(r) = q.next()? {
        push(r.get(0)?, r.get(1)?, r.get(2)?)?;
    }
    Ok(rows)
}

fn conflicts_against(
    conn: &Connection,
    outputs: &PathSet,
    inputs: &PathSet,
    full: bool,
) -> Result<Vec<Conflict>> {
    let mut out = Vec::new();
    for requested in outputs {
        for (id, kind, owned) in overlapping_claims(conn, requested)? {
            if full || kind == CLAIM_OUTPUT {
                out.push(Conflict {
                    scheduler_job_id: id,
                    requested: requested.clone(),
                    owned,
                });
            }
        }
    }
    if full {
        for requested in inputs {
            for (id, kind, owned) in overlapping_claims(conn, requested)? {
                if kind != CLAIM_INPUT {
                    out.push(Conflict {
                        scheduler_job_id: id,
                        requested: requested.clone(),
                        owned,
                    });
                }
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn job(id: JobId, outputs: &[&str]) -> ScheduledJob {
        ScheduledJob {
            scheduler_job_id: id,
            record: ReproRecord {
                cmd: "sbatch job.sh".into(),
                dsid: "d".into(),
                pwd: ".".into(),
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
                ..Default::default()
            },
            outputs: PathSet::parse(outputs).unwrap(),
            inputs: PathSet::new(),
            alt_dir: None,
            submitted_at: Utc::now(),
            is_array: false,
            array: None,
            state_cache: JobState::Pending,
            message: None,
        }
    }

    fn fresh() -> (tempfile::TempDir, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open_in(dir.path()).unwrap();
        (dir, reg)
    }

    #[test]
    fn empty_registry_has_no_conflicts() {
        let (_d, reg) = fresh();
        assert!(reg.list_open().unwrap().is_empty());
        assert!(reg
            .find_conflicts(&PathSet::parse(["a"]).unwrap())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ancestor_conflict_and_segment_boundary() {
        let (_d, mut reg) = fresh();
        reg.register(&job(1, &["test_01_output_dir_18"])).unwrap();
        let c = reg
            .find_conflicts(&PathSet::parse(["test_01_output_dir_18/part.csv"]).unwrap())
            .unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].scheduler_job_id, 1);
        assert_eq!(c[0].owned.as_str(), "test_01_output_dir_18");

        reg.register(&job(2, &["a/b"])).unwrap();
        assert!(reg
            .find_conflicts(&PathSet::parse(["a/bc"]).unwrap())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn register_conflict_leaves_registry_unchanged() {
        let (_d, mut reg) = fresh();
        reg.register(&job(1, &["out"])).unwrap();
        let before = reg.list_open().unwrap();
        match reg.register(&job(2, &["out/x"])) {
            Err(RegistryError::ConflictDetected(c)) => assert_eq!(c[0].scheduler_job_id, 1),
            other => panic!("expected conflict, got {other:?}"),
        }
        assert_eq!(reg.list_open().unwrap(), before);
        assert!(matches!(
            reg.register(&job(1, &["elsewhere"])),
            Err(RegistryError::DuplicateJobId(1))
        ));
    }

    #[test]
    fn empty_outputs_rejected() {
        let (_d, mut reg) = fresh();
        assert!(matches!(
            reg.register(&job(1, &[])),
            Err(RegistryError::InvalidJob(_))
        ));
    }

    #[test]
    fn close_releases_outputs() {
        let (_d, mut reg) = fresh();
        reg.register(&job(1, &["out"])).unwrap();
        reg.close(1, CloseOutcome::Committed).unwrap();
        assert!(reg
            .find_conflicts(&PathSet::parse(["out"]).unwrap())
            .unwrap()
            .is_empty());
        assert!(matches!(
            reg.close(1, CloseOutcome::Committed),
            Err(RegistryError::AlreadyClosed(1))
        ));
        assert!(matches!(
            reg.close(99, CloseOutcome::Discarded),
            Err(RegistryError::NotFound(99))
        ));
        assert_eq!(reg.list_closed().unwrap()[0].outcome, "COMMITTED");
        assert!(!reg.is_open(1).unwrap());
        assert!(reg.get(1).unwrap().is_some());
        assert!(reg.get(2).unwrap().is_none());
    }

    #[test]
    fn counting() {
        let (_d, mut reg) = fresh();
        for i in 0..50 {
            reg.register(&job(i, &[&format!("jobs/{i}")])).unwrap();
        }
        for i in 0..20 {
            reg.close(i * 2, CloseOutcome::Committed).unwrap();
        }
        let open = reg.list_open().unwrap();
        assert_eq!(open.len(), 30);
        assert!(open.windows(2).all(|w| w[0].scheduler_job_id < w[1].scheduler_job_id));
    }

    #[test]
    fn input_over_open_output_conflicts() {
        let (_d, mut reg) = fresh();
        reg.register(&job(1, &["data/out"])).unwrap();
        let mut j = job(2, &["other"]);
        j.inputs = PathSet::parse(["data/out/x.csv"]).unwrap();
        assert!(matches!(
            reg.register(&j),
            Err(RegistryError::ConflictDetected(_))
        ));
        // shared reads are fine
        let mut a = job(3, &["a_out"]);
        a.inputs = PathSet::parse(["shared"]).unwrap();
        let mut b = job(4, &["b_out"]);
        b.inputs = PathSet::parse(["shared"]).unwrap();
        reg.register(&a).unwrap();
        reg.register(&b).unwrap();
    }

    #[test]
    fn reopen_keeps_jobs() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut reg = Registry::open_in(dir.path()).unwrap();
            reg.register(&job(7, &["x"])).unwrap();
        }
        let reg = Registry::open_in(dir.path()).unwrap();
        let open = reg.list_open().unwrap();
        assert_eq!(open.len(), 1);
        assert_eq!(open[0], {
            let mut j = job(7, &["x"]);
            j.submitted_at = open[0].submitted_at;
            j
        });
    }

    #[test]
    fn unknown_version_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        drop(Registry::open_in(dir.path()).unwrap());
        let conn = Connection::open(dir.path().join(REGISTRY_FILE)).unwrap();
        conn.execute("UPDATE meta SET value = '99' WHERE key = 'schema_version'", [])
            .unwrap();
        drop(conn);
        assert!(matches!(
            Registry::open_in(dir.path()),
            Err(RegistryError::CorruptRegistry(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(REGISTRY_FILE), b"definitely not sqlite, just junk bytes here").unwrap();
        assert!(matches!(
            Registry::open_in(dir.path()),
            Err(RegistryError::CorruptRegistry(_))
        ));
    }

    #[test]
    fn concurrent_register_same_id() {
        let dir = tempfile::tempdir().unwrap();
        drop(Registry::open_in(dir.path()).unwrap());
        let handles: Vec<_> = (0..2)
            .map(|i| {
                let p = dir.path().to_path_buf();
                std::thread::spawn(move || {
                    let mut reg = Registry::open_in(&p).unwrap();
                    reg.register(&job(42, &[&format!("out{i}")])).is_ok()
                })
            })
            .collect();
        let ok: usize = handles.into_iter().map(|h| h.join().unwrap() as usize).sum();
        assert_eq!(ok, 1);
        let reg = Registry::open_in(dir.path()).unwrap();
        assert_eq!(reg.list_open().unwrap().len(), 1);
    }

    fn seg() -> impl Strategy<Value = &'static str> {
        prop::sample::select(vec!["a", "b", "ab", "a.b", "a-", "a0", "a+"])
    }

    fn rel() -> impl Strategy<Value = String> {
        prop::collection::vec(seg(), 1..4).prop_map(|v| v.join("/"))
    }

    /// Segment-wise prefix test written independently of `RelPath`.
    fn oracle_conflict(a: &str, b: &str) -> bool {
        let sa: Vec<&str> = a.split('/').collect();
        let sb: Vec<&str> = b.split('/').collect();
        let n = sa.len().min(sb.len());
        sa[..n] == sb[..n]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn indexed_lookup_matches_full_scan(
            jobs in prop::collection::vec((rel(), prop::option::of(rel())), 1..10),
            close in prop::collection::vec(any::<bool>(), 10),
            out_q in rel(),
            in_q in rel(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut reg = Registry::open_in(dir.path()).unwrap();
            for (i, (out, input)) in jobs.iter().enumerate() {
                let mut j = job(i as JobId + 1, &[out]);
                j.inputs = PathSet::parse(input.iter()).unwrap();
                let _ = reg.register(&j);
            }
            for job in reg.list_open().unwrap() {
                if close[job.scheduler_job_id as usize] {
                    reg.close(job.scheduler_job_id, CloseOutcome::Committed).unwrap();
                }
            }
            let outputs = PathSet::parse([&out_q]).unwrap();
            let inputs = PathSet::parse([&in_q]).unwrap();
            let mut want = Vec::new();
            for j in reg.list_open().unwrap() {
                for o in j.outputs.iter().chain(j.inputs.iter()) {
                    if oracle_conflict(&out_q, o.as_str()) {
                        want.push((j.scheduler_job_id, out_q.clone(), o.as_str().to_string()));
                    }
                }
                for o in &j.outputs {
                    if oracle_conflict(&in_q, o.as_str()) {
                        want.push((j.scheduler_job_id, in_q.clone(), o.as_str().to_string()));
                    }
                }
            }
            want.sort();
            want.dedup();
            let mut got: Vec<_> = reg
                .find_conflicts_for(&inputs, &outputs)
                .unwrap()
                .into_iter()
                .map(|c| (c.scheduler_job_id, c.requested.as_str().to_string(), c.owned.as_str().to_string()))
                .collect();
            got.sort();
            got.dedup();
            prop_assert_eq!(got, want);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn conflicts_match_brute_force_and_are_symmetric(a in rel(), b in rel()) {
            let dir = tempfile::tempdir().unwrap();
            let mut reg = Registry::open_in(dir.path()).unwrap();
            reg.register(&job(1, &[&a])).unwrap();
            let ab = !reg.find_conflicts(&PathSet::parse([&b]).unwrap()).unwrap().is_empty();
            let dir2 = tempfile::tempdir().unwrap();
            let mut reg2 = Registry::open_in(dir2.path()).unwrap();
            reg2.register(&job(1, &[&b])).unwrap();
            let ba = !reg2.find_conflicts(&PathSet::parse([&a]).unwrap()).unwrap().is_empty();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ab, oracle_conflict(&a, &b));
        }

        #[test]
        fn open_outputs_stay_pairwise_disjoint(paths in prop::collection::vec(rel(), 1..12)) {
            let dir = tempfile::tempdir().unwrap();
            let mut reg = Registry::open_in(dir.path()).unwrap();
            for (i, p) in paths.iter().enumerate() {
                let _ = reg.register(&job(i as JobId, &[p]));
            }
            let open = reg.list_open().unwrap();
            for (i, x) in open.iter().enumerate() {
                for y in &open[i + 1..] {
                    prop_assert!(x.outputs.conflicts(&y.outputs).is_empty());
                }
            }
        }
    }
}
