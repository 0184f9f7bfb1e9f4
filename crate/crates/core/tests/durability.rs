//! A process killed after scheduling must leave its job registered.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use batchvc::scheduler::Scenario;
use batchvc::workflow::{ScheduleOptions, Workflow, WorkflowError};
use batchvc::{PathSet, Registry, RepositoryHandle, Simulator};

const CHILD_ENV: &str = "BATCHVC_DURABILITY_REPO";

fn setup(root: &Path) -> RepositoryHandle {
    let repo = RepositoryHandle::init(root, None).unwrap();
    std::fs::write(root.join("job.sh"), "mkdir -p out; echo x > out/x\n").unwrap();
    repo.commit_paths(&PathSet::parse(["job.sh"]).unwrap(), "script\n")
        .unwrap();
    repo
}

/// Child half: schedules one job, reports, then waits to be killed.
#[test]
fn durability_child() {
    let Ok(root) = std::env::var(CHILD_ENV) else {
        return;
    };
    let mut wf = Workflow::open(Path::new(&root), Simulator::new(Scenario::default())).unwrap();
    let job = wf
        .schedule(ScheduleOptions::new("job.sh", PathSet::parse(["out"]).unwrap()))
        .unwrap();
    println!("registered {}", job.scheduler_job_id);
    loop {
        std::thread::sleep(Duration::from_secs(60));
    }
}

#[test]
fn killed_process_leaves_job_registered() {
    if std::env::var(CHILD_ENV).is_ok() {
        return;
    }
    let d = tempfile::tempdir().unwrap();
    let root = d.path().join("ds");
    setup(&root);

    let mut child = Command::new(std::env::current_exe().unwrap())
        .args(["--exact", "durability_child", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, &root)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut id = None;
    for line in BufReader::new(stdout).lines() {
        let line = line.unwrap();
        // libtest prints the test name on the same line.
        if let Some((_, rest)) = line.split_once("registered ") {
            id = Some(rest.trim().parse::<u64>().unwrap());
            break;
        }
    }
    let id = id.expect("child reported a registered job");
    // SIGKILL: no destructors, no chance to flush anything else.
    child.kill().unwrap();
    child.wait().unwrap();

    let repo = RepositoryHandle::open(&root).unwrap();
    let registry = Registry::open(&repo).unwrap();
    let open = registry.list_open().unwrap();
    assert_eq!(open.len(), 1);
    assert_eq!(open[0].scheduler_job_id, id);
    assert!(!registry
        .find_conflicts(&PathSet::parse(["out/x"]).unwrap())
        .unwrap()
        .is_empty());

    let mut wf = Workflow::new(repo, Simulator::new(Scenario::default())).unwrap();
    let err = wf
        .schedule(ScheduleOptions::new("job.sh", PathSet::parse(["out"]).unwrap()))
        .unwrap_err();
    assert!(matches!(err, WorkflowError::ConflictDetected(_)), "{err}");
}
