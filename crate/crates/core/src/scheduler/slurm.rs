//! SLURM backend driving `sbatch`, `sacct` and `scancel`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Command, Output};

use super::{
    aggregate_states, JobId, JobMetadata, JobState, JobStatus, Result, SchedulerBackend,
    SchedulerError, SubmitRequest,
};

const METADATA_FIELDS: [(&str, &str); 10] = [
    ("JobID", "SLURM_JOB_ID"),
    ("JobName", "SLURM_JOB_NAME"),
    ("Partition", "SLURM_JOB_PARTITION"),
    ("NodeList", "SLURM_JOB_NODELIST"),
    ("NTasks", "SLURM_NTASKS"),
    ("Submit", "SLURM_SUBMIT_TIME"),
    ("Start", "SLURM_START_TIME"),
    ("End", "SLURM_END_TIME"),
    ("State", "SLURM_JOB_STATE"),
    ("ExitCode", "SLURM_JOB_EXIT_CODE"),
];

#[derive(Debug, Clone)]
pub struct SlurmBackend {
    pub sbatch: PathBuf,
    pub sacct: PathBuf,
    pub scancel: PathBuf,
}

impl Default for SlurmBackend {
    fn default() -> Self {
        SlurmBackend {
            sbatch: "sbatch".into(),
            sacct: "sacct".into(),
            scancel: "scancel".into(),
        }
    }
}

fn run(mut cmd: Command) -> Result<Output> {
    let shown = format!("{cmd:?}");
    let out = cmd.output().map_err(|e| SchedulerError::Backend {
        command: shown.clone(),
        detail: e.to_string(),
    })?;
    if !out.status.success() {
        return Err(SchedulerError::Backend {
            command: shown,
            detail: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(out)
}

/// Extracts the id from `Submitted batch job <id>` (optionally followed by
/// ` on cluster <name>`).
pub fn parse_submit_output(stdout: &str) -> Option<JobId> {
    stdout.lines().find_map(|line| {
        line.trim()
            .strip_prefix("Submitted batch job ")?
            .split_whitespace()
            .next()?
            .parse()
            .ok()
    })
}

/// One `sacct --parsable2` row, job steps (`123.batch`) excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingRow {
    pub job_id: JobId,
    /// Array task selector: a single index, or a pending range like `[0-9]`.
    pub task: Option<String>,
    pub fields: Vec<String>,
}

pub fn parse_accounting(stdout: &str) -> Vec<AccountingRow> {
    stdout
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|line| {
            let fields: Vec<String> = line.split('|').map(|s| s.trim().to_string()).collect();
            let raw_id = fields.first()?;
            if raw_id.contains('.') {
                return None;
            }
            let (id, task) = match raw_id.split_once('_') {
                Some((j, t)) => (j.parse().ok()?, Some(t.to_string())),
                None => (raw_id.parse().ok()?, None),
            };
            Some(AccountingRow {
                job_id: id,
                task,
                fields,
            })
        })
        .collect()
}

fn expand_tasks(sel: &str) -> Vec<u32> {
    let inner = sel.trim_start_matches('[').trim_end_matches(']');
    let inner = inner.split('%').next().unwrap_or_default();
    let mut out = Vec::new();
    for part in inner.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                if let (Ok(a), Ok(b)) = (a.parse::<u32>(), b.parse::<u32>()) {
                    out.extend(a..=b);
                }
            }
            None => out.extend(part.parse::<u32>().ok()),
        }
    }
    out
}

/// Builds a status from `JobID|State|ExitCode` rows.
pub fn status_from_rows(id: JobId, rows: &[AccountingRow]) -> Result<JobStatus> {
    let rows: Vec<&AccountingRow> = rows.iter().filter(|r| r.job_id == id).collect();
    if rows.is_empty() {
        return Err(SchedulerError::UnknownJob(id));
    }
    let field = |r: &AccountingRow, i: usize| r.fields.get(i).cloned().unwrap_or_default();
    let exit_of = |r: &AccountingRow| {
        field(r, 2)
            .split(':')
            .next()
            .and_then(|c| c.parse::<i32>().ok())
    };
    let task_rows: Vec<&&AccountingRow> = rows.iter().filter(|r| r.task.is_some()).collect();
    if task_rows.is_empty() {
        let r = rows[0];
        let state = JobState::from_slurm(&field(r, 1));
        return Ok(JobStatus {
            state,
            tasks: None,
            exit_code: state.is_terminal().then(|| exit_of(r)).flatten(),
        });
    }
    let mut tasks: BTreeMap<u32, JobState> = BTreeMap::new();
    let mut exit = None;
    for r in task_rows {
        let state = JobState::from_slurm(&field(r, 1));
        for t in expand_tasks(r.task.as_deref().unwrap_or_default()) {
            tasks.insert(t, state);
        }
        if let Some(code) = exit_of(r) {
            exit = Some(exit.map_or(code, |e: i32| e.max(code)));
        }
    }
    let states: Vec<JobState> = tasks.values().copied().collect();
    let state = aggregate_states(&states);
    Ok(JobStatus {
        state,
        tasks: Some(tasks.into_iter().collect()),
        exit_code: if state.is_terminal() { exit } else { None },
    })
}

impl SlurmBackend {
    fn sacct(&self, id: JobId, format: &str) -> Result<Vec<AccountingRow>> {
        let mut cmd = Command::new(&self.sacct);
        cmd.args([
            "-j",
            &id.to_string(),
            "--noheader",
            "--parsable2",
            &format!("--format={format}"),
        ]);
        let out = run(cmd)?;
        Ok(parse_accounting(&String::from_utf8_lossy(&out.stdout)))
    }
}

impl SchedulerBackend for SlurmBackend {
    fn name(&self) -> &'static str {
        "slurm"
    }

    fn submit(&self, req: &SubmitRequest) -> Result<JobId> {
        req.validate()?;
        let mut cmd = Command::new(&self.sbatch);
        cmd.current_dir(&req.workdir);
        match &req.array {
            Some(spec) => {
                cmd.arg(format!("--array={spec}"));
                cmd.arg("--output=log.slurm-%A_%a.out");
            }
            None => {
                cmd.arg("--output=log.slurm-%j.out");
            }
        }
        cmd.arg(&req.script).args(&req.args);
        let out = run(cmd).map_err(|e| SchedulerError::SubmitRejected(e.to_string()))?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        parse_submit_output(&stdout).ok_or_else(|| {
            SchedulerError::SubmitRejected(format!("unexpected sbatch output: {}", stdout.trim()))
        })
    }

    fn status(&self, id: JobId) -> Result<JobStatus> {
        let rows = self.sacct(id, "JobID,State,ExitCode")?;
        status_from_rows(id, &rows)
    }

    fn capture_metadata(&self, id: JobId) -> Result<JobMetadata> {
        let status = self.status(id)?;
        if !status.state.is_terminal() {
            return Err(SchedulerError::NotTerminal(id, status.state));
        }
        let format: Vec<&str> = METADATA_FIELDS.iter().map(|(f, _)| *f).collect();
        let rows = self.sacct(id, &format.join(","))?;
        let row = rows
            .iter()
            .find(|r| r.job_id == id && r.task.is_none())
            .or_else(|| rows.iter().find(|r| r.job_id == id))
            .ok_or(SchedulerError::UnknownJob(id))?;
        let mut map = BTreeMap::new();
        for (i, (_, key)) in METADATA_FIELDS.iter().enumerate() {
            map.insert(key.to_string(), row.fields.get(i).cloned().unwrap_or_default());
        }
        map.insert("SLURM_JOB_ID".into(), id.to_string());
        map.insert("SLURM_JOB_STATE".into(), status.state.as_str().into());
        if let Some(tasks) = &status.tasks {
            map.insert("SLURM_ARRAY_JOB_ID".into(), id.to_string());
            map.insert("SLURM_ARRAY_TASK_COUNT".into(), tasks.len().to_string());
        }
        Ok(JobMetadata(map))
    }

    fn cancel(&self, id: JobId) -> Result<()> {
        let mut cmd = Command::new(&self.scancel);
        cmd.arg(id.to_string());
        run(cmd).map(|_| ())
    }
}
