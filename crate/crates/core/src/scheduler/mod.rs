//! Batch scheduler adapter: a common interface over a real SLURM installation
//! and a deterministic in-process simulator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::to_pretty_json;

pub mod sim;
pub mod slurm;

pub use sim::{Scenario, ScenarioRule, Simulator, Transition};
pub use slurm::SlurmBackend;

pub type JobId = u64;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("submission rejected: {0}")]
    SubmitRejected(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} is not finished (state {1})")]
    NotTerminal(JobId, JobState),
    #[error("`{command}` failed: {detail}")]
    Backend { command: String, detail: String },
    #[error("invalid simulator scenario: {0}")]
    Scenario(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SchedulerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
    Timeout,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::Pending,
        JobState::Running,
        JobState::Completed,
        JobState::Failed,
        JobState::Cancelled,
        JobState::Timeout,
    ];

    pub fn is_terminal(self) -> bool {
        !matches!(self, JobState::Pending | JobState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "PENDING",
            JobState::Running => "RUNNING",
            JobState::Completed => "COMPLETED",
            JobState::Failed => "FAILED",
            JobState::Cancelled => "CANCELLED",
            JobState::Timeout => "TIMEOUT",
        }
    }

    /// `Completed`, `Failed`, ... as used in commit headlines.
    pub fn title_case(self) -> String {
        let s = self.as_str();
        let mut out = s[..1].to_string();
        out.push_str(&s[1..].to_ascii_lowercase());
        out
    }

    /// Whether `self -> next` is an allowed move of the job state machine.
    pub fn can_transition_to(self, next: JobState) -> bool {
        match (self, next) {
            (JobState::Pending, JobState::Running) => true,
            (JobState::Pending, JobState::Cancelled) => true,
            (JobState::Running, n) => n.is_terminal(),
            _ => false,
        }
    }

    /// Maps a SLURM accounting state string. Unlisted terminal states such as
    /// `NODE_FAIL`, `PREEMPTED`, `OUT_OF_MEMORY` map to `FAILED`.
    ///
    /// | sacct state | JobState |
    /// |---|---|
    /// | PENDING, REQUEUED, REQUEUE_HOLD, REQUEUE_FED | PENDING |
    /// | RUNNING, COMPLETING, CONFIGURING, SIGNALING, STAGE_OUT, RESIZING, SUSPENDED | RUNNING |
    /// | COMPLETED | COMPLETED |
    /// | CANCELLED (incl. `CANCELLED by <uid>`) | CANCELLED |
    /// | TIMEOUT | TIMEOUT |
    /// | anything else | FAILED |
    pub fn from_slurm(raw: &str) -> JobState {
        let word = raw
            .split_whitespace()
            .next()
            .unwrap_or_default()
            .trim_end_matches('+')
            .to_ascii_uppercase();
        match word.as_str() {
            "PENDING" | "REQUEUED" | "REQUEUE_HOLD" | "REQUEUE_FED" => JobState::Pending,
            "RUNNING" | "COMPLETING" | "CONFIGURING" | "SIGNALING" | "STAGE_OUT" | "RESIZING"
            | "SUSPENDED" => JobState::Running,
            "COMPLETED" => JobState::Completed,
            "CANCELLED" => JobState::Cancelled,
            "TIMEOUT" => JobState::Timeout,
            _ => JobState::Failed,
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown job state `{s}`"))
    }
}

/// Collapses per-task states: COMPLETED only when every task completed;
/// otherwise RUNNING/PENDING while any task is unfinished, then the first of
/// FAILED, TIMEOUT, CANCELLED present.
pub fn aggregate_states(states: &[JobState]) -> JobState {
    if states.iter().all(|s| *s == JobState::Completed) {
        return JobState::Completed;
    }
    for st in [
        JobState::Running,
        JobState::Pending,
        JobState::Failed,
        JobState::Timeout,
        JobState::Cancelled,
    ] {
        if states.contains(&st) {
            if st == JobState::Pending && states.contains(&JobState::Running) {
                return JobState::Running;
            }
            return st;
        }
    }
    JobState::Completed
}

/// Inclusive task index range of an array job, written `first-last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub first: u32,
    pub last: u32,
}

impl ArraySpec {
    pub fn new(first: u32, last: u32) -> Option<Self> {
        (first <= last).then_some(ArraySpec { first, last })
    }

    pub fn tasks(&self) -> impl Iterator<Item = u32> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        (self.last - self.first) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for ArraySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

impl FromStr for ArraySpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("invalid array spec `{s}`, expected `N` or `N-M`");
        let (a, b) = s.split_once('-').unwrap_or((s, s));
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        ArraySpec::new(first, last).ok_or_else(bad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    /// Job script; relative paths resolve against `workdir`.
    pub script: PathBuf,
    pub args: Vec<String>,
    pub workdir: PathBuf,
    pub array: Option<ArraySpec>,
}

impl SubmitRequest {
    pub fn script_path(&self) -> PathBuf {
        if self.script.is_absolute() {
            self.script.clone()
        } else {
            self.workdir.join(&self.script)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.workdir.is_dir() {
            return Err(SchedulerError::SubmitRejected(format!(
                "working directory {} does not exist",
                self.workdir.display()
            )));
        }
        let script = self.script_path();
        if std::fs::File::open(&script).is_err() || !script.is_file() {
            return Err(SchedulerError::SubmitRejected(format!(
                "job script {} is not a readable file",
                script.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobStatus {
    pub state: JobState,
    /// Per-task states for array jobs, ordered by task index.
    pub tasks: Option<Vec<(u32, JobState)>>,
    pub exit_code: Option<i32>,
}

impl JobStatus {
    pub fn completed_tasks(&self) -> Option<(usize, usize)> {
        self.tasks.as_ref().map(|t| {
            (
                t.iter().filter(|(_, s)| *s == JobState::Completed).count(),
                t.len(),
            )
        })
    }
}

/// Scheduler environment of a finished job, written as
/// `slurm-job-<id>.env.json`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobMetadata(pub BTreeMap<String, String>);

impl JobMetadata {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Sorted keys, UTF-8, trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = to_pretty_json(&self.0);
        s.push('\n');
        s
    }
}

pub fn log_file_name(id: JobId) -> String {
    format!("log.slurm-{id}.out")
}

pub fn array_log_file_name(id: JobId, task: u32) -> String {
    format!("log.slurm-{id}_{task}.out")
}

pub fn env_file_name(id: JobId) -> String {
    format!("slurm-job-{id}.env.json")
}

/// Scheduler-side files a job leaves in its working directory.
pub fn job_log_files(id: JobId, array: Option<&ArraySpec>) -> Vec<String> {
    match array {
        None => vec![log_file_name(id)],
        Some(spec) => spec.tasks().map(|t| array_log_file_name(id, t)).collect(),
    }
}

pub trait SchedulerBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn submit(&self, req: &SubmitRequest) -> Result<JobId>;
    fn status(&self, id: JobId) -> Result<JobStatus>;
    fn capture_metadata(&self, id: JobId) -> Result<JobMetadata>;
    fn cancel(&self, id: JobId) -> Result<()>;
}

impl<T: SchedulerBackend + ?Sized> SchedulerBackend for std::sync::Arc<T> {
    fn name(&self) -> &'static str {
        (**self).name()
    }
    fn submit(&self, req: &SubmitRequest) -> Result<JobId> {
        (**self).submit(req)
    }
    fn status(&self, id: JobId) -> Result<JobStatus> {
        (**self).status(id)
    }
    fn capture_metadata(&self, id: JobId) -> Result<JobMetadata> {
        (**self).capture_metadata(id)
    }
    fn cancel(&self, id: JobId) -> Result<()> {
        (**self).cancel(id)
    }
}
