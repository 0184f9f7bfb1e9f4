//! Job lifecycle: schedule a job with reserved outputs, finish it into a
//! commit carrying a reproducibility record, reschedule from such a commit.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::Utc;
use thiserror::Error;

use crate::lock::FileLock;
use crate::paths::{PathError, PathSet, RelPath};
use crate::record::{parse_record, render_message, slurm_headline, RecordError, ReproRecord};
use crate::registry::{CloseOutcome, Conflict, Registry, RegistryError, ScheduledJob};
use crate::repo::{BranchRef, CommitId, CommitOutcome, RepoError, RepositoryHandle};
use crate::scheduler::{
    env_file_name, job_log_files, ArraySpec, JobId, JobState, JobStatus, SchedulerBackend,
    SchedulerError, SubmitRequest,
};

mod staging;

pub const REPO_LOCK_FILE: &str = "repo.lock";
pub const NOCHANGE_DIR: &str = "nochange";
pub const DISCARDED_DIR: &str = "discarded";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("conflicting paths: {}", crate::registry::describe_conflicts(.0))]
    ConflictDetected(Vec<Conflict>),
    #[error("working tree has uncommitted changes outside in-flight jobs: {}", join_paths(.0))]
    DirtyWorkingTree(Vec<RelPath>),
    #[error("a job must declare at least one output")]
    NoOutputs,
    #[error("submission rejected: {0}")]
    SubmitRejected(String),
    #[error("cannot stage job directory {}: {reason}", .path.display())]
    StageCollision { path: PathBuf, reason: String },
    #[error("copying {} failed: {source}", .path.display())]
    CopyFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("commit {0} does not carry a scheduler run record")]
    NotASlurmRecord(String),
    #[error("array jobs can only be rescheduled as a whole (recorded {recorded}, requested {requested})")]
    ArrayPartialReschedule { recorded: String, requested: String },
    #[error("job {0} is not in flight")]
    UnknownJob(JobId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("repository lock: {0}")]
    Lock(io::Error),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Registry(RegistryError),
    #[error(transparent)]
    Scheduler(SchedulerError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Path(#[from] PathError),
}

impl From<RegistryError> for WorkflowError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::ConflictDetected(c) => WorkflowError::ConflictDetected(c),
            other => WorkflowError::Registry(other),
        }
    }
}

impl From<SchedulerError> for WorkflowError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::SubmitRejected(m) => WorkflowError::SubmitRejected(m),
            other => WorkflowError::Scheduler(other),
        }
    }
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

fn join_paths(paths: &[RelPath]) -> String {
    let shown: Vec<&str> = paths.iter().take(10).map(RelPath::as_str).collect();
    let more = paths.len().saturating_sub(shown.len());
    if more > 0 {
        format!("{} (and {more} more)", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

fn copy_err(path: &Path) -> impl FnOnce(io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::CopyFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// What to do with jobs that ended FAILED, CANCELLED or TIMEOUT.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FailedJobPolicy {
    /// Report an error and keep the job open.
    #[default]
    Error,
    /// Commit whatever the job produced, with the terminal state in the headline.
    CommitFailed,
    /// Set the outputs aside, restore them to HEAD and close the job.
    CloseFailed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MergeMode {
    /// One commit per job on the current branch.
    #[default]
    Direct,
    /// One commit per job on its own `job-<id>` branch.
    Branches,
    /// Job branches, then a single merge of all of them.
    Octopus,
}

#[derive(Debug, Clone)]
pub struct ScheduleOptions {
    /// Job script, relative to `pwd` unless absolute.
    pub script: PathBuf,
    pub args: Vec<String>,
    /// Working directory of the job, relative to the repository root.
    pub pwd: RelPath,
    pub inputs: PathSet,
    pub outputs: PathSet,
    pub array: Option<ArraySpec>,
    /// Run the job in a mirror of the repository below this directory.
    pub alt_dir: Option<PathBuf>,
    /// Extra commit message paragraph.
    pub message: Option<String>,
    /// Skip the clean working tree check.
    pub allow_dirty: bool,
    /// Commits this run was re-executed from, oldest first.
    pub chain: Vec<String>,
}

impl ScheduleOptions {
    pub fn new(script: impl Into<PathBuf>, outputs: PathSet) -> Self {
        ScheduleOptions {
            script: script.into(),
            args: Vec::new(),
            pwd: RelPath::root(),
            inputs: PathSet::new(),
            outputs,
            array: None,
            alt_dir: None,
            message: None,
            allow_dirty: false,
            chain: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FinishOptions {
    /// Only this job; all open jobs otherwise.
    pub job_id: Option<JobId>,
    pub failed: FailedJobPolicy,
    pub merge: MergeMode,
}

#[derive(Debug, Clone, Default)]
pub struct RescheduleOptions {
    pub alt_dir: Option<PathBuf>,
    pub allow_dirty: bool,
    /// Must match the recorded array range when given.
    pub array: Option<ArraySpec>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinishAction {
    Committed(CommitId),
    /// Outputs were identical to HEAD; the job was closed without a commit.
    NoChange,
    /// Still pending or running; left open.
    SkippedRunning(JobState),
    /// Failed job whose outputs were set aside under the state directory.
    DiscardedFailed(JobState),
    /// Left open; see the message.
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinishOutcome {
    pub scheduler_job_id: JobId,
    pub state: Option<JobState>,
    pub action: FinishAction,
}

impl fmt::Display for FinishOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id = self.scheduler_job_id;
        match &self.action {
            FinishAction::Committed(c) => write!(f, "job {id}: COMMITTED {}", c.short()),
            FinishAction::NoChange => {
                write!(f, "job {id}: NO_CHANGE (outputs identical to HEAD, nothing committed)")
            }
            FinishAction::SkippedRunning(s) => write!(f, "job {id}: SKIPPED_RUNNING ({s})"),
            FinishAction::DiscardedFailed(s) => write!(f, "job {id}: DISCARDED_FAILED ({s})"),
            FinishAction::Error(m) => write!(f, "job {id}: ERROR {m}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FinishReport {
    pub outcomes: Vec<FinishOutcome>,
    /// Job branches created by this call.
    pub branches: Vec<BranchRef>,
    /// Commit joining the job branches, in octopus mode.
    pub merge: Option<CommitId>,
}

impl FinishReport {
    pub fn has_errors(&self) -> bool {
        self.outcomes
            .iter()
            .any(|o| matches!(o.action, FinishAction::Error(_)))
    }
}

/// In-flight job and its latest known state.
#[derive(Debug, Clone)]
pub struct JobView {
    pub job: ScheduledJob,
    pub state: JobState,
}

/// A repository, its job registry and a scheduler backend.
pub struct Workflow<B> {
    repo: RepositoryHandle,
    registry: Registry,
    backend: B,
}

impl<B: SchedulerBackend> Workflow<B> {
    pub fn new(repo: RepositoryHandle, backend: B) -> Result<Self> {
        let registry = Registry::open(&repo)?;
        Ok(Workflow {
            repo,
            registry,
            backend,
        })
    }

    pub fn open(path: &Path, backend: B) -> Result<Self> {
        Self::new(RepositoryHandle::open(path)?, backend)
    }

    pub fn repo(&self) -> &RepositoryHandle {
        &self.repo
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn lock(&self) -> Result<FileLock> {
        let dir = self.repo.state_dir();
        fs::create_dir_all(&dir).map_err(WorkflowError::Lock)?;
        FileLock::exclusive(&dir.join(REPO_LOCK_FILE)).map_err(WorkflowError::Lock)
    }

    /// Submits a job after reserving its outputs.
    pub fn schedule(&mut self, opts: ScheduleOptions) -> Result<ScheduledJob> {
        let _guard = self.lock()?;
        self.schedule_locked(opts)
    }

    fn schedule_locked(&mut self, opts: ScheduleOptions) -> Result<ScheduledJob> {
        if opts.outputs.is_empty() {
            return Err(WorkflowError::NoOutputs);
        }
        if let Some(alt) = &opts.alt_dir {
            if !alt.is_absolute() {
                return Err(WorkflowError::InvalidRequest(format!(
                    "alternative job directory {} must be absolute",
                    alt.display()
                )));
            }
        }
        let root = self.repo.root().to_path_buf();
        let script_rel = if opts.script.is_absolute() {
            RelPath::relative_to(&opts.script, &root).ok()
        } else {
            let raw = opts.script.to_str().ok_or_else(|| {
                WorkflowError::InvalidRequest("job script path is not UTF-8".into())
            })?;
            RelPath::new(&format!("{}/{raw}", opts.pwd.as_str())).ok()
        };
        let script_abs = match &script_rel {
            Some(rel) => rel.to_path(&root),
            None => opts.pwd.to_path(&root).join(&opts.script),
        };
        if script_rel.is_none() {
            log::warn!(
                "job script {} lies outside the repository; re-execution will depend on it",
                script_abs.display()
            );
        }
        if !script_abs.is_file() {
            return Err(WorkflowError::SubmitRejected(format!(
                "job script {} is not a readable file",
                script_abs.display()
            )));
        }

        if !opts.allow_dirty {
            let mut dirty = self.repo.dirty_paths()?;
            if !dirty.is_empty() {
                let reserved: Vec<PathSet> = self
                    .registry
                    .list_open()?
                    .iter()
                    .map(|j| j.reserved_paths())
                    .collect();
                dirty.retain(|p| !reserved.iter().any(|r| r.covers(p)));
            }
            if !dirty.is_empty() {
                return Err(WorkflowError::DirtyWorkingTree(dirty));
            }
        }

        let mut conflicts = self
            .registry
            .find_conflicts_for(&opts.inputs, &opts.outputs)?;
        // The job writes its log into its working directory.
        if !opts.pwd.is_root() {
            let mut pwd = PathSet::new();
            pwd.insert(opts.pwd.clone())?;
            conflicts.extend(
                self.registry
                    .find_conflicts(&pwd)?
                    .into_iter()
                    .filter(|c| c.owned.contains(&opts.pwd)),
            );
        }
        if !conflicts.is_empty() {
            conflicts.sort();
            conflicts.dedup();
            return Err(WorkflowError::ConflictDetected(conflicts));
        }

        self.repo.ensure_inputs_present(&opts.inputs)?;

        let workdir = match &opts.alt_dir {
            Some(alt) => self.stage_alt_dir(alt, &opts, script_rel.as_ref())?,
            None => {
                let dir = opts.pwd.to_path(&root);
                fs::create_dir_all(&dir).map_err(copy_err(&dir))?;
                self.repo.unlock_outputs(&opts.outputs)?;
                dir
            }
        };

        let req = SubmitRequest {
            script: match (&opts.alt_dir, &script_rel) {
                (Some(alt), Some(rel)) => rel.to_path(alt),
                _ => script_abs.clone(),
            },
            args: opts.args.clone(),
            workdir,
            array: opts.array,
        };
        let id = match self.backend.submit(&req) {
            Ok(id) => id,
            Err(e) => {
                if opts.alt_dir.is_none() {
                    let _ = self.repo.annexify(&opts.outputs);
                }
                return Err(e.into());
            }
        };
        log::info!("submitted job {id} via {}", self.backend.name());

        let job = build_job(id, &opts, script_rel.as_ref(), &script_abs, self.repo.dataset_id())?;
        if let Err(e) = self.registry.register(&job) {
            log::warn!("cancelling job {id}: registration failed: {e}");
            if let Err(c) = self.backend.cancel(id) {
                log::error!("could not cancel job {id}: {c}");
            }
            if opts.alt_dir.is_none() {
                let _ = self.repo.annexify(&opts.outputs);
            }
            return Err(e.into());
        }
        Ok(job)
    }

    /// Mirrors inputs, the script and current outputs below `alt_root` and
    /// returns the job's working directory there.
    fn stage_alt_dir(
        &self,
        alt_root: &Path,
        opts: &ScheduleOptions,
        script: Option<&RelPath>,
    ) -> Result<PathBuf> {
        if !alt_root.is_dir() {
            return Err(WorkflowError::StageCollision {
                path: alt_root.to_path_buf(),
                reason: "not an existing directory".into(),
            });
        }
        if alt_root.starts_with(self.repo.root()) {
            return Err(WorkflowError::StageCollision {
                path: alt_root.to_path_buf(),
                reason: "must lie outside the repository".into(),
            });
        }
        let workdir = staging::staged_path(alt_root, &opts.pwd);
        if fs::symlink_metadata(&workdir).is_ok_and(|m| !m.is_dir()) {
            return Err(WorkflowError::StageCollision {
                path: workdir,
                reason: "occupied by a file".into(),
            });
        }
        // Another in-flight job staged in the same tree must not have its
        // files overwritten by this job's inputs.
        let open = if opts.inputs.is_empty() {
            Vec::new()
        } else {
            self.registry.list_open()?
        };
        for job in open.iter().filter(|j| j.alt_dir.as_deref() == Some(alt_root)) {
            let reserved = job.reserved_paths();
            if let Some(p) = opts
                .inputs
                .iter()
                .find(|p| reserved.iter().any(|r| r.conflicts_with(p)))
            {
                return Err(WorkflowError::StageCollision {
                    path: staging::staged_path(alt_root, p),
                    reason: format!("in use by job {}", job.scheduler_job_id),
                });
            }
        }
        let root = self.repo.root();
        let mut copy = opts.inputs.union(&opts.outputs);
        if let Some(s) = script {
            if !s.is_root() {
                copy.insert(s.clone())?;
            }
        }
        for p in &copy {
            let dest = staging::staged_path(alt_root, p);
            staging::mirror(&p.to_path(root), &dest).map_err(copy_err(&dest))?;
        }
        fs::create_dir_all(&workdir).map_err(copy_err(&workdir))?;
        Ok(workdir)
    }

    /// Current state of every in-flight job, refreshed from the backend where
    /// possible.
    pub fn status(&mut self) -> Result<Vec<JobView>> {
        let mut out = Vec::new();
        for job in self.registry.list_open()? {
            let state = match self.backend.status(job.scheduler_job_id) {
                Ok(st) => {
                    if st.state != job.state_cache {
                        self.registry
                            .update_state_cache(job.scheduler_job_id, st.state)?;
                    }
                    st.state
                }
                Err(e) => {
                    log::warn!("status of job {}: {e}", job.scheduler_job_id);
                    job.state_cache
                }
            };
            out.push(JobView { job, state });
        }
        Ok(out)
    }

    /// Finalizes finished jobs, in ascending job id order.
    pub fn finish(&mut self, opts: &FinishOptions) -> Result<FinishReport> {
        let _guard = self.lock()?;
        let jobs = match opts.job_id {
            Some(id) => vec![self.registry.get(id)?.ok_or(WorkflowError::UnknownJob(id))?],
            None => self.registry.list_open()?,
        };
        let base = self.repo.head()?;
        let mut report = FinishReport::default();
        for job in jobs {
            let id = job.scheduler_job_id;
            let (state, action) = match self.finish_one(&job, opts, &base, &mut report) {
                Ok(r) => r,
                Err(e) => (None, FinishAction::Error(e.to_string())),
            };
            report.outcomes.push(FinishOutcome {
                scheduler_job_id: id,
                state,
                action,
            });
        }
        if opts.merge == MergeMode::Octopus {
            report.merge = match report.branches.len() {
                0 => None,
                1 => Some(self.repo.fast_forward(&report.branches[0])?),
                _ => {
                    let names: Vec<&str> =
                        report.branches.iter().map(|b| b.name.as_str()).collect();
                    let msg = format!("Merge job branches {}\n", names.join(", "));
                    Some(self.repo.octopus_merge(&report.branches, &msg)?)
                }
            };
        }
        Ok(report)
    }

    fn finish_one(
        &mut self,
        job: &ScheduledJob,
        opts: &FinishOptions,
        base: &CommitId,
        report: &mut FinishReport,
    ) -> Result<(Option<JobState>, FinishAction)> {
        let id = job.scheduler_job_id;
        let status = self.backend.status(id)?;
        if status.state != job.state_cache {
            self.registry.update_state_cache(id, status.state)?;
        }
        let state = Some(status.state);
        match status.state {
            JobState::Pending | JobState::Running => {
                return Ok((state, FinishAction::SkippedRunning(status.state)))
            }
            JobState::Completed => {}
            failed => match opts.failed {
                FailedJobPolicy::Error => {
                    return Ok((
                        state,
                        FinishAction::Error(format!(
                            "finished {}; rerun finish with a failed-job policy to close it",
                            failed
                        )),
                    ))
                }
                FailedJobPolicy::CloseFailed => {
                    self.discard(job)?;
                    self.registry.close(id, CloseOutcome::Discarded)?;
                    return Ok((state, FinishAction::DiscardedFailed(failed)));
                }
                FailedJobPolicy::CommitFailed => {}
            },
        }
        let action = self.commit_job(job, &status, opts.merge, base, report)?;
        self.registry.close(id, CloseOutcome::Committed)?;
        Ok((state, action))
    }

    fn commit_job(
        &mut self,
        job: &ScheduledJob,
        status: &JobStatus,
        merge: MergeMode,
        base: &CommitId,
        report: &mut FinishReport,
    ) -> Result<FinishAction> {
        let id = job.scheduler_job_id;
        let root = self.repo.root().to_path_buf();
        let pwd = RelPath::new(&job.record.pwd)?;
        let env_rel = pwd.join_str(&env_file_name(id))?;
        let logs: Vec<RelPath> = job
            .slurm_outputs()
            .into_iter()
            .filter(|p| *p != env_rel)
            .collect();

        if let Some(alt) = &job.alt_dir {
            for p in job.outputs.iter().chain(&logs) {
                let src = staging::staged_path(alt, p);
                let dest = p.to_path(&root);
                staging::mirror(&src, &dest).map_err(copy_err(&dest))?;
            }
        }

        let metadata = self.backend.capture_metadata(id)?;
        let env_abs = env_rel.to_path(&root);
        if let Some(dir) = env_abs.parent() {
            fs::create_dir_all(dir).map_err(copy_err(dir))?;
        }
        fs::write(&env_abs, metadata.to_json()).map_err(copy_err(&env_abs))?;

        if !self.repo.has_changes(&job.outputs)? {
            let dest = self.repo.state_dir().join(NOCHANGE_DIR).join(id.to_string());
            for p in job.slurm_outputs() {
                let src = p.to_path(&root);
                let to = dest.join(src.file_name().unwrap_or_default());
                staging::move_aside(&src, &to).map_err(copy_err(&src))?;
            }
            return Ok(FinishAction::NoChange);
        }

        // Scheduler records carry the outcome in the headline, not an `exit` key.
        let message = render_message(
            &slurm_headline(id, &headline_status(status)),
            job.message.as_deref(),
            &job.record,
        )?;
        let paths = job.reserved_paths();
        let outcome = match merge {
            MergeMode::Direct => self.repo.commit_paths(&paths, &message)?,
            MergeMode::Branches | MergeMode::Octopus => {
                let name = format!("job-{id}");
                let branch = self.repo.create_job_branch(base, &name)?;
                let outcome = self.repo.commit_paths_to_branch(&name, &paths, &message)?;
                self.restore_to_head(&paths, None)?;
                if let CommitOutcome::Committed(c) = &outcome {
                    report.branches.push(BranchRef {
                        name: branch.name,
                        head: c.clone(),
                    });
                }
                outcome
            }
        };
        Ok(match outcome {
            CommitOutcome::Committed(c) => FinishAction::Committed(c),
            CommitOutcome::NoChange => FinishAction::NoChange,
        })
    }

    /// Sets a failed job's output changes and logs aside and restores the
    /// outputs to HEAD.
    fn discard(&self, job: &ScheduledJob) -> Result<()> {
        let dest = self
            .repo
            .state_dir()
            .join(DISCARDED_DIR)
            .join(job.scheduler_job_id.to_string());
        let paths = job.reserved_paths();
        if let Some(alt) = &job.alt_dir {
            for p in &paths {
                let src = staging::staged_path(alt, p);
                if src.exists() {
                    staging::mirror(&src, &p.to_path(&dest)).map_err(copy_err(&src))?;
                }
            }
            return Ok(());
        }
        self.restore_to_head(&paths, Some(&dest))
    }

    /// Returns `paths` to their HEAD state, moving changed files below
    /// `keep` when given and deleting them otherwise.
    fn restore_to_head(&self, paths: &PathSet, keep: Option<&Path>) -> Result<()> {
        let root = self.repo.root();
        self.repo.annexify(paths)?;
        for p in self.repo.changed_paths(paths)? {
            let src = p.to_path(root);
            match keep {
                Some(dir) => staging::move_aside(&src, &p.to_path(dir)).map_err(copy_err(&src))?,
                None => {
                    if fs::symlink_metadata(&src).is_ok() {
                        fs::remove_file(&src).map_err(copy_err(&src))?;
                    }
                }
            }
        }
        self.repo.checkout_head(paths)?;
        for p in paths {
            staging::prune_empty_dirs(&p.to_path(root), root);
        }
        Ok(())
    }

    /// Schedules the job recorded in `commit` again, with the same command,
    /// inputs and outputs.
    pub fn reschedule(&mut self, commit: &str, opts: RescheduleOptions) -> Result<ScheduledJob> {
        let _guard = self.lock()?;
        let id = self.repo.resolve(commit)?;
        let message = self.repo.read_commit_message(&id)?;
        let record = parse_record(&message)?
            .filter(ReproRecord::is_slurm)
            .ok_or_else(|| WorkflowError::NotASlurmRecord(commit.to_string()))?;
        let cmd = parse_sbatch_cmd(&record.cmd)
            .ok_or_else(|| WorkflowError::NotASlurmRecord(commit.to_string()))?;
        if let Some(requested) = opts.array {
            if cmd.array != Some(requested) {
                return Err(WorkflowError::ArrayPartialReschedule {
                    recorded: cmd.array.map(|a| a.to_string()).unwrap_or_else(|| "none".into()),
                    requested: requested.to_string(),
                });
            }
        }
        let slurm: Vec<&String> = record.slurm_outputs.iter().flatten().collect();
        let outputs = PathSet::parse(record.outputs.iter().filter(|o| !slurm.contains(o)))?;
        let inputs = PathSet::parse(record.inputs.iter().chain(&record.extra_inputs))?;
        let mut chain = record.chain.clone();
        chain.push(id.as_str().to_string());
        self.schedule_locked(ScheduleOptions {
            script: PathBuf::from(cmd.script),
            args: cmd.args,
            pwd: RelPath::new(&record.pwd)?,
            inputs,
            outputs,
            array: cmd.array,
            alt_dir: opts.alt_dir,
            message: opts.message,
            allow_dirty: opts.allow_dirty,
            chain,
        })
    }
}

/// Headline status word; arrays that did not fully complete also show the
/// task tally.
fn headline_status(status: &JobStatus) -> String {
    match status.completed_tasks() {
        Some((done, total)) if status.state != JobState::Completed => {
            format!("{} ({done}/{total} tasks completed)", status.state.title_case())
        }
        _ => status.state.title_case(),
    }
}

fn build_job(
    id: JobId,
    opts: &ScheduleOptions,
    script_rel: Option<&RelPath>,
    script_abs: &Path,
    dsid: &str,
) -> Result<ScheduledJob> {
    let script_arg = match script_rel {
        Some(rel) => rel.relative_from(&opts.pwd),
        None => script_abs.to_string_lossy().into_owned(),
    };
    let mut words = vec!["sbatch".to_string()];
    if let Some(a) = &opts.array {
        words.push(format!("--array={a}"));
    }
    words.push(script_arg);
    words.extend(opts.args.iter().cloned());
    let cmd = shlex::try_join(words.iter().map(String::as_str))
        .map_err(|e| WorkflowError::InvalidRequest(format!("cannot quote command: {e}")))?;

    let mut slurm_outputs = Vec::new();
    for name in job_log_files(id, opts.array.as_ref()) {
        slurm_outputs.push(opts.pwd.join_str(&name)?.as_str().to_string());
    }
    slurm_outputs.push(opts.pwd.join_str(&env_file_name(id))?.as_str().to_string());
    let mut outputs = opts.outputs.to_strings();
    outputs.extend(slurm_outputs.iter().cloned());

    let record = ReproRecord {
        chain: opts.chain.clone(),
        cmd,
        dsid: dsid.to_string(),
        exit: None,
        extra_inputs: Vec::new(),
        inputs: opts.inputs.to_strings(),
        outputs,
        pwd: if opts.pwd.is_root() {
            ".".into()
        } else {
            opts.pwd.as_str().to_string()
        },
        slurm_job_id: Some(id),
        slurm_outputs: Some(slurm_outputs),
        extra: Default::default(),
    };
    Ok(ScheduledJob {
        scheduler_job_id: id,
        record,
        outputs: opts.outputs.clone(),
        inputs: opts.inputs.clone(),
        alt_dir: opts.alt_dir.clone(),
        submitted_at: Utc::now(),
        is_array: opts.array.is_some(),
        array: opts.array,
        state_cache: JobState::Pending,
        message: opts.message.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SbatchCmd {
    pub array: Option<ArraySpec>,
    pub script: String,
    pub args: Vec<String>,
}

/// Splits a recorded `sbatch [--array=X] script args...` command.
pub(crate) fn parse_sbatch_cmd(cmd: &str) -> Option<SbatchCmd> {
    let words = shlex::split(cmd)?;
    let mut it = words.into_iter();
    if it.next()? != "sbatch" {
        return None;
    }
    let mut array = None;
    let mut next = it.next()?;
    if let Some(spec) = next.strip_prefix("--array=") {
        array = Some(spec.parse().ok()?);
        next = it.next()?;
    }
    Some(SbatchCmd {
        array,
        script: next,
        args: it.collect(),
    })
}

#[cfg(test)]
mod tests;
