//! Deterministic local scheduler simulator.
//!
//! Dwell times run on a simulated clock that only moves through
//! [`Simulator::advance`]. When a task's running phase ends, the real job
//! script is executed in the job's working directory, so outputs are produced
//! on disk exactly as a cluster job would produce them. A task cancelled or
//! timed out before that point never runs its script.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::{
    aggregate_states, array_log_file_name, log_file_name, JobId, JobMetadata, JobState,
    JobStatus, Result, SchedulerBackend, SchedulerError, SubmitRequest,
};

pub const DEFAULT_BASE_JOB_ID: JobId = 11_000_000;

fn default_base() -> JobId {
    DEFAULT_BASE_JOB_ID
}

fn default_pending() -> f64 {
    1.0
}

fn default_running() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Durations {
    #[serde(default = "default_pending")]
    pub pending_seconds: f64,
    #[serde(default = "default_running")]
    pub running_seconds: f64,
}

impl Default for Durations {
    fn default() -> Self {
        Durations {
            pending_seconds: default_pending(),
            running_seconds: default_running(),
        }
    }
}

/// One scenario rule. All given predicate fields must match; the first
/// matching rule applies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRule {
    pub job_id: Option<JobId>,
    /// Zero-based position in the submission sequence.
    pub submit_index: Option<u64>,
    pub task: Option<u32>,
    pub pending_seconds: Option<f64>,
    pub running_seconds: Option<f64>,
    /// Forced final state; `COMPLETED`/`FAILED` still execute the script.
    pub terminal_state: Option<JobState>,
    /// Cancel this many simulated seconds after submission.
    pub cancel_after_seconds: Option<f64>,
}

impl ScenarioRule {
    fn matches(&self, job_id: JobId, submit_index: u64, task: Option<u32>) -> bool {
        self.job_id.is_none_or(|j| j == job_id)
            && self.submit_index.is_none_or(|i| i == submit_index)
            && self.task.is_none_or(|t| Some(t) == task)
    }
}

/// Declarative simulator configuration, usually read from TOML:
///
/// ```toml
/// base_job_id = 11000000
/// [defaults]
/// pending_seconds = 1.0
/// running_seconds = 2.0
/// [[rules]]
/// task = 3
/// terminal_state = "FAILED"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_base")]
    pub base_job_id: JobId,
    #[serde(default)]
    pub defaults: Durations,
    #[serde(default)]
    pub rules: Vec<ScenarioRule>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            base_job_id: DEFAULT_BASE_JOB_ID,
            defaults: Durations::default(),
            rules: Vec::new(),
        }
    }
}

impl Scenario {
    /// Jobs start and finish as soon as the clock is advanced at all.
    pub fn instant() -> Self {
        Scenario {
            defaults: Durations {
                pending_seconds: 0.0,
                running_seconds: 0.0,
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| SchedulerError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| SchedulerError::Io {
            context: format!("reading scenario {}", path.display()),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.defaults.pending_seconds) || !ok(self.defaults.running_seconds) {
            return Err(SchedulerError::Scenario("durations must be finite and >= 0".into()));
        }
        for r in &self.rules {
            for v in [r.pending_seconds, r.running_seconds, r.cancel_after_seconds]
                .into_iter()
                .flatten()
            {
                if !ok(v) {
                    return Err(SchedulerError::Scenario(
                        "durations must be finite and >= 0".into(),
                    ));
                }
            }
            if matches!(r.terminal_state, Some(JobState::Pending | JobState::Running)) {
                return Err(SchedulerError::Scenario(
                    "terminal_state must be a terminal state".into(),
                ));
            }
        }
        Ok(())
    }

    fn plan(&self, job_id: JobId, submit_index: u64, task: Option<u32>) -> TaskPlan {
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(job_id, submit_index, task));
        TaskPlan {
            pending: rule
                .and_then(|r| r.pending_seconds)
                .unwrap_or(self.defaults.pending_seconds),
            running: rule
                .and_then(|r| r.running_seconds)
                .unwrap_or(self.defaults.running_seconds),
            terminal: rule.and_then(|r| r.terminal_state),
            cancel_after: rule.and_then(|r| r.cancel_after_seconds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskPlan {
    pending: f64,
    running: f64,
    terminal: Option<JobState>,
    cancel_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SimTask {
    index: Option<u32>,
    state: JobState,
    plan: TaskPlan,
    started_at: Option<f64>,
    ended_at: Option<f64>,
    exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SimJob {
    id: JobId,
    submit_index: u64,
    request: SubmitRequest,
    submitted_at: f64,
    tasks: Vec<SimTask>,
}

/// One observed state change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub time: f64,
    pub job_id: JobId,
    pub task: Option<u32>,
    pub from: JobState,
    pub to: JobState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SimState {
    scenario: Scenario,
    clock: f64,
    next_id: JobId,
    submitted: u64,
    jobs: BTreeMap<JobId, SimJob>,
    history: Vec<Transition>,
}

enum Event {
    Start,
    Finish,
    Cancel,
}

pub struct Simulator {
    state: Mutex<SimState>,
    state_file: Option<PathBuf>,
}

impl Simulator {
    pub fn new(scenario: Scenario) -> Self {
        Simulator {
            state: Mutex::new(SimState {
                clock: 0.0,
                next_id: scenario.base_job_id,
                submitted: 0,
                jobs: BTreeMap::new(),
                history: Vec::new(),
                scenario,
            }),
            state_file: None,
        }
    }

    /// A simulator whose state lives in `path` and is rewritten after every
    /// mutation, so separate processes can share one simulated cluster.
    /// `scenario` only applies when the file does not exist yet.
    pub fn persistent(path: &Path, scenario: Scenario) -> Result<Self> {
        let state = if path.exists() {
            let text = fs::read_to_string(path).map_err(|source| SchedulerError::Io {
                context: format!("reading simulator state {}", path.display()),
                source,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| SchedulerError::Scenario(format!("corrupt simulator state: {e}")))?
        } else {
            Simulator::new(scenario).state.into_inner().expect("fresh mutex")
        };
        let sim = Simulator {
            state: Mutex::new(state),
            state_file: Some(path.to_path_buf()),
        };
        sim.save(&sim.lock())?;
        Ok(sim)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn save(&self, state: &SimState) -> Result<()> {
        let Some(path) = &self.state_file else {
            return Ok(());
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| SchedulerError::Io {
                context: "creating simulator state dir".into(),
                source,
            })?;
        }
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string(state).expect("state serializes");
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|source| SchedulerError::Io {
                context: format!("writing simulator state {}", path.display()),
                source,
            })
    }

    pub fn now(&self) -> f64 {
        self.lock().clock
    }

    /// Every transition observed so far, in order.
    pub fn history(&self) -> Vec<Transition> {
        self.lock().history.clone()
    }

    pub fn job_ids(&self) -> Vec<JobId> {
        self.lock().jobs.keys().copied().collect()
    }

    /// Moves the simulated clock forward by `delta` seconds, applying every
    /// due transition in time order (ties broken by job id, then task).
    pub fn advance(&self, delta: f64) -> Result<()> {
        let mut st = self.lock();
        let target = st.clock + delta.max(0.0);
        loop {
            let mut next: Option<(f64, JobId, usize, Event)> = None;
            for job in st.jobs.values() {
                for (ti, task) in job.tasks.iter().enumerate() {
                    let Some((t, ev)) = next_event(job, task) else {
                        continue;
                    };
                    if t <= target && next.as_ref().is_none_or(|(nt, ..)| t < *nt) {
                        next = Some((t, job.id, ti, ev));
                    }
                }
            }
            let Some((t, id, ti, ev)) = next else { break };
            st.clock = st.clock.max(t);
            apply_event(&mut st, id, ti, ev, t);
        }
        st.clock = target;
        self.save(&st)
    }

    /// Advances until every job is terminal; returns the final clock.
    pub fn drain(&self) -> Result<f64> {
        loop {
            let due = {
                let st = self.lock();
                let mut due: Option<f64> = None;
                for job in st.jobs.values() {
                    for task in &job.tasks {
                        if let Some((t, _)) = next_event(job, task) {
                            due = Some(due.map_or(t, |d: f64| d.min(t)));
                        }
                    }
                }
                due.map(|d| (d - st.clock).max(0.0))
            };
            match due {
                Some(delta) => self.advance(delta)?,
                None => return Ok(self.now()),
            }
        }
    }
}

fn next_event(job: &SimJob, task: &SimTask) -> Option<(f64, Event)> {
    let cancel_at = task.plan.cancel_after.map(|c| job.submitted_at + c);
    let (due, ev) = match task.state {
        JobState::Pending => (job.submitted_at + task.plan.pending, Event::Start),
        JobState::Running => (
            task.started_at.unwrap_or(job.submitted_at) + task.plan.running,
            Event::Finish,
        ),
        _ => return None,
    };
    match cancel_at {
        Some(c) if c < due => Some((c, Event::Cancel)),
        _ => Some((due, ev)),
    }
}

fn apply_event(st: &mut SimState, id: JobId, ti: usize, ev: Event, t: f64) {
    let job = st.jobs.get_mut(&id).expect("event for known job");
    let from = job.tasks[ti].state;
    let to = match ev {
        Event::Start => {
            job.tasks[ti].started_at = Some(t);
            JobState::Running
        }
        Event::Cancel => {
            job.tasks[ti].ended_at = Some(t);
            JobState::Cancelled
        }
        Event::Finish => {
            let forced = job.tasks[ti].plan.terminal;
            let exit = match forced {
                Some(JobState::Cancelled | JobState::Timeout) => None,
                _ => Some(run_script(job, ti)),
            };
            job.tasks[ti].exit_code = exit;
            job.tasks[ti].ended_at = Some(t);
            match (forced, exit) {
                (Some(state), _) => state,
                (None, Some(0)) => JobState::Completed,
                (None, _) => JobState::Failed,
            }
        }
    };
    job.tasks[ti].state = to;
    let task = job.tasks[ti].index;
    st.history.push(Transition {
        time: t,
        job_id: id,
        task,
        from,
        to,
    });
}

fn run_script(job: &SimJob, ti: usize) -> i32 {
    let req = &job.request;
    let task = job.tasks[ti].index;
    let log_name = match task {
        Some(t) => array_log_file_name(job.id, t),
        None => log_file_name(job.id),
    };
    let log_path = req.workdir.join(log_name);
    let log = OpenOptions::new().create(true).append(true).open(&log_path);
    let Ok(log) = log else {
        log::warn!("cannot open {}", log_path.display());
        return 1;
    };
    let err = match log.try_clone() {
        Ok(e) => e,
        Err(_) => return 1,
    };
    let script = req.script_path();
    let executable = fs::metadata(&script)
        .map(|m| m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false);
    let mut cmd = if executable {
        Command::new(&script)
    } else {
        let mut c = Command::new("/bin/sh");
        c.arg(&script);
        c
    };
    cmd.args(&req.args)
        .current_dir(&req.workdir)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(err)
        .env("SLURM_JOB_ID", job.id.to_string())
        .env("SLURM_SUBMIT_DIR", &req.workdir);
    if let Some(t) = task {
        cmd.env("SLURM_ARRAY_JOB_ID", job.id.to_string())
            .env("SLURM_ARRAY_TASK_ID", t.to_string());
    }
    match cmd.status() {
        Ok(s) => s.code().unwrap_or(128),
        Err(e) => {
            log::warn!("running {} failed: {e}", script.display());
            127
        }
    }
}

fn sim_time(t: f64) -> String {
    let epoch: DateTime<Utc> = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    let at = epoch + Duration::milliseconds((t * 1000.0).round() as i64);
    at.format("%Y-%m-%dT%H:%M:%S").to_string()
}

impl SchedulerBackend for Simulator {
    fn name(&self) -> &'static str {
        "sim"
    }

    fn submit(&self, req: &SubmitRequest) -> Result<JobId> {
        req.validate()?;
        let mut st = self.lock();
        let id = st.next_id;
        st.next_id += 1;
        let submit_index = st.submitted;
        st.submitted += 1;
        let indices: Vec<Option<u32>> = match &req.array {
            Some(spec) => spec.tasks().map(Some).collect(),
            None => vec![None],
        };
        let tasks = indices
            .into_iter()
            .map(|index| SimTask {
                index,
                state: JobState::Pending,
                plan: st.scenario.plan(id, submit_index, index),
                started_at: None,
                ended_at: None,
                exit_code: None,
            })
            .collect();
        let submitted_at = st.clock;
        st.jobs.insert(
            id,
            SimJob {
                id,
                submit_index,
                request: req.clone(),
                submitted_at,
                tasks,
            },
        );
        self.save(&st)?;
        Ok(id)
    }

    fn status(&self, id: JobId) -> Result<JobStatus> {
        let st = self.lock();
        let job = st.jobs.get(&id).ok_or(SchedulerError::UnknownJob(id))?;
        let states: Vec<JobState> = job.tasks.iter().map(|t| t.state).collect();
        let tasks = job.request.array.map(|_| {
            job.tasks
                .iter()
                .map(|t| (t.index.unwrap_or_default(), t.state))
                .collect()
        });
        let exit_code = if job.tasks.iter().all(|t| t.state.is_terminal()) {
            job.tasks.iter().filter_map(|t| t.exit_code).max()
        } else {
            None
        };
        Ok(JobStatus {
            state: aggregate_states(&states),
            tasks,
            exit_code,
        })
    }

    fn capture_metadata(&self, id: JobId) -> Result<JobMetadata> {
        let status = self.status(id)?;
        if !status.state.is_terminal() {
            return Err(SchedulerError::NotTerminal(id, status.state));
        }
        let st = self.lock();
        let job = &st.jobs[&id];
        let name = job
            .request
            .script
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let start = job
            .tasks
            .iter()
            .filter_map(|t| t.started_at)
            .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.min(b))));
        let end = job
            .tasks
            .iter()
            .filter_map(|t| t.ended_at)
            .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.max(b))));
        let mut m = BTreeMap::new();
        m.insert("SLURM_JOB_ID".to_string(), id.to_string());
        m.insert("SLURM_JOB_NAME".into(), name);
        m.insert("SLURM_JOB_PARTITION".into(), "sim".into());
        m.insert("SLURM_JOB_NODELIST".into(), "sim-node-0".into());
        m.insert("SLURM_NTASKS".into(), "1".into());
        m.insert("SLURM_SUBMIT_TIME".into(), sim_time(job.submitted_at));
        m.insert(
            "SLURM_START_TIME".into(),
            start.map(sim_time).unwrap_or_else(|| "Unknown".into()),
        );
        m.insert(
            "SLURM_END_TIME".into(),
            end.map(sim_time).unwrap_or_else(|| "Unknown".into()),
        );
        m.insert("SLURM_JOB_STATE".into(), status.state.as_str().into());
        m.insert(
            "SLURM_JOB_EXIT_CODE".into(),
            format!("{}:0", status.exit_code.unwrap_or(0)),
        );
        if let Some(spec) = job.request.array {
            m.insert("SLURM_ARRAY_JOB_ID".into(), id.to_string());
            m.insert("SLURM_ARRAY_TASK_MIN".into(), spec.first.to_string());
            m.insert("SLURM_ARRAY_TASK_MAX".into(), spec.last.to_string());
            m.insert("SLURM_ARRAY_TASK_COUNT".into(), spec.len().to_string());
        }
        Ok(JobMetadata(m))
    }

    fn cancel(&self, id: JobId) -> Result<()> {
        let mut st = self.lock();
        let now = st.clock;
        let job = st.jobs.get_mut(&id).ok_or(SchedulerError::UnknownJob(id))?;
        let mut changes = Vec::new();
        for task in job.tasks.iter_mut().filter(|t| !t.state.is_terminal()) {
            changes.push(Transition {
                time: now,
                job_id: id,
                task: task.index,
                from: task.state,
                to: JobState::Cancelled,
            });
            task.state = JobState::Cancelled;
            task.ended_at = Some(now);
        }
        st.history.extend(changes);
        self.save(&st)
    }
}
