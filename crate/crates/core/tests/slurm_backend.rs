//! SlurmBackend against stand-in `sbatch`/`sacct`/`scancel` scripts.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use batchvc::scheduler::{JobState, SchedulerBackend, SchedulerError, SubmitRequest};
use batchvc::workflow::{FinishAction, FinishOptions, ScheduleOptions, Workflow};
use batchvc::{parse_record, PathSet, RepositoryHandle, SlurmBackend};

const JOB_ID: u64 = 4242;

// Runs the script synchronously in the submit directory, like a cluster with
// zero queue time.
const SBATCH: &str = r#"#!/bin/sh
state="$FAKE_SLURM_DIR"
echo "$@" > "$state/sbatch.args"
if [ -f "$state/reject" ]; then
    echo "sbatch: error: Batch job submission failed" >&2
    exit 1
fi
while [ $# -gt 0 ]; do
    case "$1" in --*) shift ;; *) break ;; esac
done
script="$1"; shift
SLURM_JOB_ID=4242 sh "$script" "$@" > "log.slurm-4242.out" 2>&1
echo "COMPLETED" > "$state/state"
echo "Submitted batch job 4242"
"#;

const SACCT: &str = r#"#!/bin/sh
state="$FAKE_SLURM_DIR"
echo "$@" > "$state/sacct.args"
s=$(cat "$state/state" 2>/dev/null || echo PENDING)
case "$*" in
    *Partition*)
        echo "4242|job.sh|normal|node01|1|2025-03-14T11:00:00|2025-03-14T11:00:05|2025-03-14T11:01:00|$s|0:0"
        echo "4242.batch|batch|normal|node01|1|2025-03-14T11:00:00|2025-03-14T11:00:05|2025-03-14T11:01:00|$s|0:0"
        ;;
    *)
        echo "4242|$s|0:0"
        echo "4242.batch|$s|0:0"
        echo "4242.extern|$s|0:0"
        ;;
esac
"#;

const SCANCEL: &str = r#"#!/bin/sh
echo "$@" > "$FAKE_SLURM_DIR/scancel.args"
echo CANCELLED > "$FAKE_SLURM_DIR/state"
"#;

fn write_exe(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p
}

struct Fake {
    dir: tempfile::TempDir,
    backend: SlurmBackend,
}

impl Fake {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let backend = SlurmBackend {
            sbatch: write_exe(dir.path(), "sbatch", SBATCH),
            sacct: write_exe(dir.path(), "sacct", SACCT),
            scancel: write_exe(dir.path(), "scancel", SCANCEL),
        };
        // The fake tools find their state through this variable; every test
        // in this file uses its own directory but the variable is
        // process-wide, so tests serialize on it.
        std::env::set_var("FAKE_SLURM_DIR", dir.path());
        Fake { dir, backend }
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.dir.path().join(name)).unwrap_or_default()
    }
}

static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn submit_status_metadata_cancel() {
    let _g = serial();
    let fake = Fake::new();
    let work = tempfile::tempdir().unwrap();
    fs::write(work.path().join("job.sh"), "echo hello\n").unwrap();
    let req = SubmitRequest {
        script: "job.sh".into(),
        args: vec!["a b".into()],
        workdir: work.path().to_path_buf(),
        array: None,
    };
    assert_eq!(fake.backend.status(JOB_ID).unwrap().state, JobState::Pending);
    let id = fake.backend.submit(&req).unwrap();
    assert_eq!(id, JOB_ID);
    assert!(fake.read("sbatch.args").starts_with("--output=log.slurm-%j.out job.sh"));
    assert_eq!(
        fs::read_to_string(work.path().join("log.slurm-4242.out")).unwrap(),
        "hello\n"
    );
    let st = fake.backend.status(id).unwrap();
    assert_eq!(st.state, JobState::Completed);
    assert_eq!(st.exit_code, Some(0));
    assert!(fake.read("sacct.args").contains("--parsable2"));

    let meta = fake.backend.capture_metadata(id).unwrap();
    assert_eq!(meta.get("SLURM_JOB_ID"), Some("4242"));
    assert_eq!(meta.get("SLURM_JOB_NODELIST"), Some("node01"));
    assert_eq!(meta.get("SLURM_JOB_STATE"), Some("COMPLETED"));

    fake.backend.cancel(id).unwrap();
    assert_eq!(fake.read("scancel.args").trim(), "4242");
    assert_eq!(fake.backend.status(id).unwrap().state, JobState::Cancelled);
}

#[test]
fn rejected_submission() {
    let _g = serial();
    let fake = Fake::new();
    fs::write(fake.dir.path().join("reject"), "").unwrap();
    let work = tempfile::tempdir().unwrap();
    fs::write(work.path().join("job.sh"), "true\n").unwrap();
    let err = fake
        .backend
        .submit(&SubmitRequest {
            script: "job.sh".into(),
            args: vec![],
            workdir: work.path().to_path_buf(),
            array: None,
        })
        .unwrap_err();
    assert!(matches!(err, SchedulerError::SubmitRejected(_)), "{err}");
}

#[test]
fn missing_tool_is_a_backend_error() {
    let backend = SlurmBackend {
        sacct: "/nonexistent/sacct".into(),
        ..Default::default()
    };
    assert!(matches!(
        backend.status(1),
        Err(SchedulerError::Backend { .. })
    ));
}

#[test]
fn workflow_over_fake_cluster() {
    let _g = serial();
    let fake = Fake::new();
    let d = tempfile::tempdir().unwrap();
    let repo = RepositoryHandle::init(&d.path().join("ds"), None).unwrap();
    fs::write(
        repo.root().join("job.sh"),
        "mkdir -p out\necho \"$SLURM_JOB_ID\" > out/id.txt\n",
    )
    .unwrap();
    repo.commit_paths(&PathSet::parse(["job.sh"]).unwrap(), "script\n")
        .unwrap();
    let mut wf = Workflow::new(repo, fake.backend.clone()).unwrap();
    let job = wf
        .schedule(ScheduleOptions::new(
            "job.sh",
            PathSet::parse(["out"]).unwrap(),
        ))
        .unwrap();
    assert_eq!(job.scheduler_job_id, JOB_ID);
    let report = wf.finish(&FinishOptions::default()).unwrap();
    let FinishAction::Committed(c) = &report.outcomes[0].action else {
        panic!("{:?}", report.outcomes);
    };
    let repo = wf.repo();
    let msg = repo.read_commit_message(c).unwrap();
    assert!(msg.starts_with("[DATALAD SLURM RUN] Slurm job 4242: Completed\n\n"));
    let rec = parse_record(&msg).unwrap().unwrap();
    assert_eq!(rec.cmd, "sbatch job.sh");
    assert_eq!(
        fs::read_to_string(repo.root().join("out/id.txt")).unwrap(),
        "4242\n"
    );
    let env: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(repo.root().join("slurm-job-4242.env.json")).unwrap())
            .unwrap();
    assert_eq!(env["SLURM_JOB_PARTITION"], "normal");
    assert!(repo.dirty_paths().unwrap().is_empty());
}
