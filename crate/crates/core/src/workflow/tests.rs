use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::*;
use crate::scheduler::{JobMetadata, Scenario, ScenarioRule, Simulator};

struct Spy {
    sim: Simulator,
    submits: AtomicUsize,
}

impl SchedulerBackend for Spy {
    fn name(&self) -> &'static str {
        "spy"
    }
    fn submit(&self, req: &SubmitRequest) -> crate::scheduler::Result<JobId> {
        self.submits.fetch_add(1, Ordering::SeqCst);
        self.sim.submit(req)
    }
    fn status(&self, id: JobId) -> crate::scheduler::Result<JobStatus> {
        self.sim.status(id)
    }
    fn capture_metadata(&self, id: JobId) -> crate::scheduler::Result<JobMetadata> {
        self.sim.capture_metadata(id)
    }
    fn cancel(&self, id: JobId) -> crate::scheduler::Result<()> {
        self.sim.cancel(id)
    }
}

const SCRIPT: &str = r#"#!/bin/sh
set -e
d="$1${SLURM_ARRAY_TASK_ID:+/$SLURM_ARRAY_TASK_ID}"
mkdir -p "$d"
echo "result of $d" > "$d/result.txt"
printf 'bin\000ary' > "$d/blob.bin"
echo ran
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    wf: Workflow<Arc<Spy>>,
    spy: Arc<Spy>,
}

fn fixture_with(scenario: Scenario) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let repo = RepositoryHandle::init(&dir.path().join("ds"), Some("test-ds".into())).unwrap();
    fs::write(repo.root().join("job.sh"), SCRIPT).unwrap();
    repo.commit_paths(&PathSet::parse(["job.sh"]).unwrap(), "add job script\n")
        .unwrap();
    let spy = Arc::new(Spy {
        sim: Simulator::new(scenario),
        submits: AtomicUsize::new(0),
    });
    let wf = Workflow::new(repo, spy.clone()).unwrap();
    Fixture {
        _dir: dir,
        wf,
        spy,
    }
}

fn fixture() -> Fixture {
    fixture_with(Scenario::instant())
}

fn opts(out: &str) -> ScheduleOptions {
    let mut o = ScheduleOptions::new("job.sh", PathSet::parse([out]).unwrap());
    o.args = vec![out.to_string()];
    o
}

fn finish_all(f: &mut Fixture, options: FinishOptions) -> FinishReport {
    f.spy.sim.drain().unwrap();
    f.wf.finish(&options).unwrap()
}

#[test]
fn schedule_finish_commits_record() {
    let mut f = fixture();
    let job = f.wf.schedule(opts("out")).unwrap();
    let id = job.scheduler_job_id;
    assert_eq!(job.record.cmd, "sbatch job.sh out");
    assert_eq!(
        job.record.outputs,
        vec![
            "out".to_string(),
            format!("log.slurm-{id}.out"),
            format!("slurm-job-{id}.env.json")
        ]
    );
    let report = finish_all(&mut f, FinishOptions::default());
    let FinishAction::Committed(c) = &report.outcomes[0].action else {
        panic!("{:?}", report.outcomes);
    };
    let repo = f.wf.repo();
    let msg = repo.read_commit_message(c).unwrap();
    assert_eq!(
        crate::record::headline_of(&msg),
        format!("[DATALAD SLURM RUN] Slurm job {id}: Completed")
    );
    let rec = parse_record(&msg).unwrap().unwrap();
    assert_eq!(rec.exit, None);
    assert_eq!(rec, job.record);
    assert_eq!(rec.slurm_job_id, Some(id));
    let files = repo.files_at("HEAD").unwrap();
    for p in ["out/result.txt", "out/blob.bin"] {
        assert!(files.contains(&RelPath::new(p).unwrap()), "{p}");
    }
    assert!(files.contains(&RelPath::new(&format!("slurm-job-{id}.env.json")).unwrap()));
    assert!(repo.dirty_paths().unwrap().is_empty());
    assert!(f.wf.registry().list_open().unwrap().is_empty());
    let blob = repo.root().join("out/blob.bin");
    assert!(fs::symlink_metadata(&blob).unwrap().file_type().is_symlink());
    assert_eq!(fs::read(&blob).unwrap(), b"bin\0ary");
}

#[test]
fn conflicting_schedule_never_reaches_backend() {
    let mut f = fixture();
    f.wf.schedule(opts("data/a")).unwrap();
    let before = f.wf.registry().list_open().unwrap();
    for out in ["data", "data/a", "data/a/x"] {
        let err = f.wf.schedule(opts(out)).unwrap_err();
        assert!(matches!(err, WorkflowError::ConflictDetected(_)), "{err}");
    }
    assert_eq!(f.spy.submits.load(Ordering::SeqCst), 1);
    assert_eq!(f.wf.registry().list_open().unwrap(), before);
    f.wf.schedule(opts("data/ab")).unwrap();
    assert_eq!(f.spy.submits.load(Ordering::SeqCst), 2);
}

#[test]
fn pwd_inside_open_output_conflicts() {
    let mut f = fixture();
    f.wf.schedule(opts("a")).unwrap();
    let mut o = opts("b");
    o.pwd = RelPath::new("a/sub").unwrap();
    o.script = "../../job.sh".into();
    let err = f.wf.schedule(o).unwrap_err();
    assert!(matches!(err, WorkflowError::ConflictDetected(_)), "{err}");
}

#[test]
fn dirty_tree_is_refused_unless_allowed() {
    let mut f = fixture();
    fs::write(f.wf.repo().root().join("stray.txt"), "x").unwrap();
    assert!(matches!(
        f.wf.schedule(opts("out")),
        Err(WorkflowError::DirtyWorkingTree(_))
    ));
    let mut o = opts("out");
    o.allow_dirty = true;
    f.wf.schedule(o).unwrap();
}

#[test]
fn in_flight_outputs_do_not_count_as_dirty() {
    let mut f = fixture();
    f.wf.schedule(opts("one")).unwrap();
    f.spy.sim.drain().unwrap();
    f.wf.schedule(opts("two")).unwrap();
}

#[test]
fn reschedule_identical_output_is_no_change() {
    let mut f = fixture();
    f.wf.schedule(opts("out")).unwrap();
    let report = finish_all(&mut f, FinishOptions::default());
    let FinishAction::Committed(c) = report.outcomes[0].action.clone() else {
        panic!();
    };
    let count = f.wf.repo().commit_count().unwrap();
    let job = f
        .wf
        .reschedule(c.as_str(), RescheduleOptions::default())
        .unwrap();
    assert_eq!(job.record.chain, vec![c.as_str().to_string()]);
    assert_eq!(job.record.cmd, "sbatch job.sh out");
    let report = finish_all(&mut f, FinishOptions::default());
    assert_eq!(report.outcomes[0].action, FinishAction::NoChange);
    assert_eq!(f.wf.repo().commit_count().unwrap(), count);
    assert!(f.wf.repo().dirty_paths().unwrap().is_empty());
    assert!(f.wf.registry().list_open().unwrap().is_empty());
}

#[test]
fn reschedule_rejects_plain_commits() {
    let mut f = fixture();
    assert!(matches!(
        f.wf.reschedule("HEAD", RescheduleOptions::default()),
        Err(WorkflowError::NotASlurmRecord(_))
    ));
}

#[test]
fn octopus_merges_all_job_branches() {
    let mut f = fixture();
    for out in ["a", "b", "c"] {
        f.wf.schedule(opts(out)).unwrap();
    }
    let report = finish_all(
        &mut f,
        FinishOptions {
            merge: MergeMode::Octopus,
            ..Default::default()
        },
    );
    assert_eq!(report.branches.len(), 3);
    let merge = report.merge.unwrap();
    let repo = f.wf.repo();
    assert_eq!(repo.head().unwrap(), merge);
    assert_eq!(repo.parents(&merge).unwrap().len(), 4);
    let files = repo.files_at("HEAD").unwrap();
    for out in ["a", "b", "c"] {
        assert!(files.contains(&RelPath::new(&format!("{out}/result.txt")).unwrap()));
    }
    assert!(repo.dirty_paths().unwrap().is_empty());
}

#[test]
fn branches_mode_leaves_head_alone() {
    let mut f = fixture();
    let head = f.wf.repo().head().unwrap();
    f.wf.schedule(opts("a")).unwrap();
    let report = finish_all(
        &mut f,
        FinishOptions {
            merge: MergeMode::Branches,
            ..Default::default()
        },
    );
    assert_eq!(report.branches.len(), 1);
    assert_eq!(f.wf.repo().head().unwrap(), head);
    assert!(f.wf.repo().dirty_paths().unwrap().is_empty());
    assert!(!f.wf.repo().root().join("a").exists());
}

fn failing_array() -> Fixture {
    fixture_with(Scenario {
        rules: vec![ScenarioRule {
            task: Some(3),
            terminal_state: Some(JobState::Failed),
            ..Default::default()
        }],
        ..Scenario::instant()
    })
}

fn array_opts() -> ScheduleOptions {
    let mut o = ScheduleOptions::new("job.sh", PathSet::parse(["arr"]).unwrap());
    o.args = vec!["arr".into()];
    o.array = Some("0-9".parse().unwrap());
    o
}

#[test]
fn array_failure_policies() {
    let mut f = failing_array();
    let job = f.wf.schedule(array_opts()).unwrap();
    let id = job.scheduler_job_id;
    assert_eq!(job.record.slurm_outputs.as_ref().unwrap().len(), 11);
    let report = finish_all(&mut f, FinishOptions::default());
    assert!(report.has_errors());
    assert!(f.wf.registry().is_open(id).unwrap());

    let report = f
        .wf
        .finish(&FinishOptions {
            failed: FailedJobPolicy::CommitFailed,
            ..Default::default()
        })
        .unwrap();
    let FinishAction::Committed(c) = &report.outcomes[0].action else {
        panic!("{:?}", report.outcomes);
    };
    let msg = f.wf.repo().read_commit_message(c).unwrap();
    assert_eq!(
        crate::record::headline_of(&msg),
        format!("[DATALAD SLURM RUN] Slurm job {id}: Failed (9/10 tasks completed)")
    );
}

#[test]
fn close_failed_discards_outputs() {
    let mut f = fixture_with(Scenario {
        rules: vec![ScenarioRule {
            terminal_state: Some(JobState::Failed),
            ..Default::default()
        }],
        ..Scenario::instant()
    });
    let job = f.wf.schedule(opts("out")).unwrap();
    let report = finish_all(
        &mut f,
        FinishOptions {
            failed: FailedJobPolicy::CloseFailed,
            ..Default::default()
        },
    );
    assert_eq!(
        report.outcomes[0].action,
        FinishAction::DiscardedFailed(JobState::Failed)
    );
    let repo = f.wf.repo();
    assert!(repo.dirty_paths().unwrap().is_empty());
    assert!(!repo.root().join("out").exists());
    let kept = repo
        .state_dir()
        .join(DISCARDED_DIR)
        .join(job.scheduler_job_id.to_string());
    assert!(kept.join("out/result.txt").exists());
}

#[test]
fn running_jobs_are_skipped() {
    let mut f = fixture_with(Scenario::default());
    f.wf.schedule(opts("out")).unwrap();
    let report = f.wf.finish(&FinishOptions::default()).unwrap();
    assert_eq!(
        report.outcomes[0].action,
        FinishAction::SkippedRunning(JobState::Pending)
    );
    assert!(!report.has_errors());
}

#[test]
fn alt_dir_matches_in_repo_tree() {
    let mut a = fixture();
    a.wf.schedule(opts("out")).unwrap();
    finish_all(&mut a, FinishOptions::default());

    let mut b = fixture();
    let scratch = tempfile::tempdir().unwrap();
    let mut o = opts("out");
    o.alt_dir = Some(scratch.path().to_path_buf());
    b.wf.schedule(o).unwrap();
    assert!(!b.wf.repo().root().join("out").exists());
    finish_all(&mut b, FinishOptions::default());

    let ta = a.wf.repo().tree_hash("HEAD", None).unwrap();
    let tb = b.wf.repo().tree_hash("HEAD", None).unwrap();
    assert_eq!(ta, tb);
    assert!(b.wf.repo().dirty_paths().unwrap().is_empty());
}

#[test]
fn submit_failure_leaves_registry_empty() {
    let mut f = fixture();
    let mut o = opts("out");
    o.script = "missing.sh".into();
    assert!(matches!(
        f.wf.schedule(o),
        Err(WorkflowError::SubmitRejected(_))
    ));
    assert!(f.wf.registry().list_open().unwrap().is_empty());
}

#[test]
fn sbatch_cmd_parsing() {
    assert_eq!(
        parse_sbatch_cmd("sbatch --array=0-9 'my job.sh' a 'b c'"),
        Some(SbatchCmd {
            array: Some("0-9".parse().unwrap()),
            script: "my job.sh".into(),
            args: vec!["a".into(), "b c".into()],
        })
    );
    assert_eq!(parse_sbatch_cmd("python run.py"), None);
    assert_eq!(parse_sbatch_cmd("sbatch"), None);
}
