use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use batchvc::bench::{self, BenchError, BenchSample, Phase, WorkloadSpec};
use batchvc::registry::RegistryError;
use batchvc::repo::RepoError;
use batchvc::scheduler::{ArraySpec, JobId, Scenario, SchedulerBackend};
use batchvc::workflow::{
    FailedJobPolicy, FinishOptions, MergeMode, RescheduleOptions, ScheduleOptions, Workflow,
    WorkflowError,
};
use batchvc::{PathSet, RelPath, RepositoryHandle, Simulator, SlurmBackend};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFLICT: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

const SIM_STATE_FILE: &str = "sim-state.json";

#[derive(Parser)]
#[command(
    name = "batchvc",
    version,
    about = "Schedule batch jobs against a version-controlled dataset and record them reproducibly",
    after_help = "Exit status: 0 success, 1 usage or precondition error, 2 output conflict, \
                  3 scheduler failure, 4 some jobs could not be finished."
)]
struct Cli {
    /// Run as if started in DIR.
    #[arg(short = 'C', global = true, value_name = "DIR")]
    chdir: Option<PathBuf>,

    /// Scheduler backend.
    #[arg(long, global = true, env = "BATCHVC_BACKEND", value_enum, default_value_t = BackendKind::Slurm)]
    backend: BackendKind,

    /// Simulator scenario (TOML); read when the simulated cluster is created.
    #[arg(long, global = true, value_name = "FILE")]
    sim_scenario: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Slurm,
    Sim,
}

#[derive(Subcommand)]
enum Command {
    /// Create a new dataset.
    Init {
        #[arg(default_value = ".")]
        path: PathBuf,
        #[arg(long)]
        dataset_id: Option<String>,
    },
    /// Submit a job script after reserving its outputs.
    Schedule(ScheduleArgs),
    /// Commit the results of finished jobs.
    Finish(FinishArgs),
    /// Submit the job recorded in a commit again.
    Reschedule(RescheduleArgs),
    /// List in-flight jobs.
    Status {
        /// Tab-separated: job id, state, number of outputs, submission time.
        #[arg(long)]
        porcelain: bool,
    },
    /// Time schedule and finish over a synthetic workload.
    Bench(BenchArgs),
    /// Drive the persistent simulated cluster of this dataset.
    Sim {
        #[command(subcommand)]
        action: SimAction,
    },
}

#[derive(Args)]
struct ScheduleArgs {
    /// Input path (repeatable); content is retrieved before submission.
    #[arg(short, long = "input", value_name = "PATH")]
    inputs: Vec<PathBuf>,
    /// Output path (repeatable, at least one).
    #[arg(short, long = "output", value_name = "PATH", required = true)]
    outputs: Vec<PathBuf>,
    /// Run the job in a mirror of the dataset below DIR.
    #[arg(long, env = "BATCHVC_ALT_DIR", value_name = "DIR")]
    alt_dir: Option<PathBuf>,
    /// Extra paragraph for the commit message.
    #[arg(short, long)]
    message: Option<String>,
    /// Submit as an array job, e.g. 0-9.
    #[arg(long, value_name = "RANGE")]
    array: Option<ArraySpec>,
    /// Schedule even if the working tree has unrelated changes.
    #[arg(long)]
    allow_dirty: bool,
    script: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    args: Vec<String>,
}

#[derive(Args)]
struct FinishArgs {
    /// Only finish this job.
    #[arg(long, value_name = "ID")]
    slurm_job_id: Option<JobId>,
    /// Commit outputs of failed, cancelled or timed-out jobs.
    #[arg(long, conflicts_with = "close_failed_jobs")]
    commit_failed_jobs: bool,
    /// Discard outputs of failed, cancelled or timed-out jobs and close them.
    #[arg(long)]
    close_failed_jobs: bool,
    /// Commit each job on its own branch.
    #[arg(long, conflicts_with = "octopus")]
    branches: bool,
    /// Commit each job on its own branch, then merge them all at once.
    #[arg(long)]
    octopus: bool,
}

#[derive(Args)]
struct RescheduleArgs {
    /// Commit holding the run record.
    commit: String,
    #[arg(long, env = "BATCHVC_ALT_DIR", value_name = "DIR")]
    alt_dir: Option<PathBuf>,
    /// Must match the recorded array range; partial arrays are refused.
    #[arg(long, value_name = "RANGE")]
    array: Option<ArraySpec>,
    #[arg(short, long)]
    message: Option<String>,
    #[arg(long)]
    allow_dirty: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    jobs: usize,
    /// Outputs per job (4, 8 or 12); several values run round-robin.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    outputs: Vec<usize>,
    #[arg(long, env = "BATCHVC_ALT_DIR", value_name = "DIR")]
    alt_dir: Option<PathBuf>,
    /// Directory for the freshly created benchmark dataset(s).
    #[arg(long, default_value = "batchvc-bench")]
    dataset: PathBuf,
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Rolling averages of each phase, written as CSV.
    #[arg(long, value_name = "FILE")]
    smoothed: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 64)]
    text_bytes: usize,
    #[arg(long, default_value_t = 64)]
    binary_bytes: usize,
}

#[derive(Subcommand)]
enum SimAction {
    /// Move the simulated clock forward.
    Advance { seconds: f64 },
    /// Run until every job is finished.
    Drain,
}

/// Error carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<WorkflowError> for Failure {
    fn from(e: WorkflowError) -> Self {
        let code = match &e {
            WorkflowError::ConflictDetected(_) => EXIT_CONFLICT,
            WorkflowError::Registry(RegistryError::ConflictDetected(_)) => EXIT_CONFLICT,
            WorkflowError::SubmitRejected(_) | WorkflowError::Scheduler(_) => EXIT_BACKEND,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Workflow(w) => w.into(),
            other => Failure::usage(other.to_string()),
        }
    }
}

impl From<RepoError> for Failure {
    fn from(e: RepoError) -> Self {
        WorkflowError::from(e).into()
    }
}

impl From<batchvc::scheduler::SchedulerError> for Failure {
    fn from(e: batchvc::scheduler::SchedulerError) -> Self {
        let code = match e {
            batchvc::scheduler::SchedulerError::Scenario(_) => EXIT_USAGE,
            _ => EXIT_BACKEND,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("batchvc: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<u8> {
    if let Some(dir) = &cli.chdir {
        std::env::set_current_dir(dir)
            .map_err(|e| Failure::usage(format!("cannot change to {}: {e}", dir.display())))?;
    }
    match &cli.command {
        Command::Init { path, dataset_id } => {
            let repo = RepositoryHandle::init(path, dataset_id.clone())?;
            println!("created dataset {} at {}", repo.dataset_id(), repo.root().display());
            Ok(0)
        }
        Command::Bench(args) => bench_cmd(&cli, args),
        _ => {
            let repo = RepositoryHandle::open(&cwd()?)?;
            match cli.backend {
                BackendKind::Slurm => dispatch(&cli, repo, SlurmBackend::default()),
                BackendKind::Sim => {
                    let sim = open_sim(&cli, &repo)?;
                    dispatch(&cli, repo, sim)
                }
            }
        }
    }
}

fn cwd() -> CliResult<PathBuf> {
    std::env::current_dir().map_err(|e| Failure::usage(format!("no current directory: {e}")))
}

fn open_sim(cli: &Cli, repo: &RepositoryHandle) -> CliResult<Arc<Simulator>> {
    let scenario = match &cli.sim_scenario {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    let path = repo.state_dir().join(SIM_STATE_FILE);
    Ok(Arc::new(Simulator::persistent(&path, scenario)?))
}

fn dispatch<B: SchedulerBackend>(cli: &Cli, repo: RepositoryHandle, backend: B) -> CliResult<u8> {
    let root = repo.root().to_path_buf();
    let mut wf = Workflow::new(repo, backend)?;
    match &cli.command {
        Command::Schedule(args) => {
            let here = cwd()?;
            let pwd = repo_path(Path::new("."), &root, &here)?;
            let mut opts = ScheduleOptions::new(args.script.clone(), path_set(&args.outputs, &here, &root)?);
            opts.args = args.args.clone();
            opts.pwd = pwd;
            opts.inputs = path_set(&args.inputs, &here, &root)?;
            opts.array = args.array;
            opts.alt_dir = args.alt_dir.as_deref().map(|d| absolute(d, &here));
            opts.message = args.message.clone();
            opts.allow_dirty = args.allow_dirty;
            let job = wf.schedule(opts)?;
            println!("{}", job.scheduler_job_id);
            eprintln!(
                "scheduled job {} with outputs {}",
                job.scheduler_job_id,
                job.outputs.to_strings().join(", ")
            );
            Ok(0)
        }
        Command::Finish(args) => {
            let opts = FinishOptions {
                job_id: args.slurm_job_id,
                failed: if args.commit_failed_jobs {
                    FailedJobPolicy::CommitFailed
                } else if args.close_failed_jobs {
                    FailedJobPolicy::CloseFailed
                } else {
                    FailedJobPolicy::Error
                },
                merge: if args.octopus {
                    MergeMode::Octopus
                } else if args.branches {
                    MergeMode::Branches
                } else {
                    MergeMode::Direct
                },
            };
            let report = wf.finish(&opts)?;
            for outcome in &report.outcomes {
                println!("{outcome}");
            }
            if let Some(merge) = &report.merge {
                println!("merged {} job branches as {}", report.branches.len(), merge.short());
            }
            Ok(if report.has_errors() { EXIT_PARTIAL } else { 0 })
        }
        Command::Reschedule(args) => {
            let here = cwd()?;
            let job = wf.reschedule(
                &args.commit,
                RescheduleOptions {
                    alt_dir: args.alt_dir.as_deref().map(|d| absolute(d, &here)),
                    allow_dirty: args.allow_dirty,
                    array: args.array,
                    message: args.message.clone(),
                },
            )?;
            println!("{}", job.scheduler_job_id);
            eprintln!("rescheduled {} as job {}", args.commit, job.scheduler_job_id);
            Ok(0)
        }
        Command::Status { porcelain } => {
            let jobs = wf.status()?;
            if *porcelain {
                for v in &jobs {
                    println!(
                        "{}\t{}\t{}\t{}",
                        v.job.scheduler_job_id,
                        v.state,
                        v.job.outputs.len(),
                        v.job.submitted_at.format("%Y-%m-%dT%H:%M:%SZ")
                    );
                }
            } else if jobs.is_empty() {
                println!("no jobs in flight");
            } else {
                println!("{:<12} {:<10} {:<20} OUTPUTS", "JOB", "STATE", "SUBMITTED");
                for v in &jobs {
                    println!(
                        "{:<12} {:<10} {:<20} {}",
                        v.job.scheduler_job_id,
                        v.state.to_string(),
                        v.job.submitted_at.format("%Y-%m-%d %H:%M:%S"),
                        v.job.outputs.to_strings().join(" ")
                    );
                }
            }
            Ok(0)
        }
        Command::Sim { action } => {
            if cli.backend != BackendKind::Sim {
                return Err(Failure::usage("`sim` needs --backend sim"));
            }
            let sim = open_sim(cli, wf.repo())?;
            let now = match action {
                SimAction::Advance { seconds } => {
                    sim.advance(*seconds)?;
                    sim.now()
                }
                SimAction::Drain => sim.drain()?,
            };
            println!("simulated clock at {now:.3}s");
            Ok(0)
        }
        Command::Init { .. } | Command::Bench(_) => unreachable!("handled before opening"),
    }
}

fn absolute(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// A command-line path (relative to the current directory) as a dataset path.
fn repo_path(raw: &Path, root: &Path, here: &Path) -> CliResult<RelPath> {
    let abs = normalize(&absolute(raw, here));
    RelPath::relative_to(&abs, root).map_err(|e| Failure::usage(format!("{}: {e}", raw.display())))
}

fn normalize(path: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

fn path_set(raw: &[PathBuf], here: &Path, root: &Path) -> CliResult<PathSet> {
    let mut set = PathSet::new();
    for p in raw {
        let rel = repo_path(p, root, here)?;
        set.insert(rel)
            .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
    }
    Ok(set)
}

fn bench_cmd(cli: &Cli, args: &BenchArgs) -> CliResult<u8> {
    let here = cwd()?;
    let base = absolute(&args.dataset, &here);
    if base.exists() {
        return Err(Failure::usage(format!(
            "{} already exists; benchmarks need a fresh dataset",
            base.display()
        )));
    }
    let mut outputs = args.outputs.clone();
    outputs.dedup();
    let specs: Vec<WorkloadSpec> = outputs
        .iter()
        .map(|&o| WorkloadSpec {
            n_jobs: args.jobs,
            outputs_per_job: o,
            text_payload_bytes: args.text_bytes,
            binary_payload_bytes: args.binary_bytes,
            alt_dir: args.alt_dir.as_deref().map(|d| {
                let d = absolute(d, &here);
                if outputs.len() > 1 {
                    d.join(format!("outputs-{o}"))
                } else {
                    d
                }
            }),
        })
        .collect();
    for spec in &specs {
        spec.validate()?;
        if let Some(d) = &spec.alt_dir {
            std::fs::create_dir_all(d)
                .map_err(|e| Failure::usage(format!("creating {}: {e}", d.display())))?;
        }
    }
    let dirs: Vec<PathBuf> = outputs
        .iter()
        .map(|o| {
            if outputs.len() > 1 {
                base.join(format!("outputs-{o}"))
            } else {
                base.clone()
            }
        })
        .collect();

    let samples = match cli.backend {
        BackendKind::Sim => {
            let scenario = match &cli.sim_scenario {
                Some(path) => Scenario::load(path)?,
                None => Scenario::default(),
            };
            let sim = Arc::new(Simulator::new(scenario));
            let sims = vec![sim.clone(); dirs.len()];
            let mut settle = || -> bench::Result<()> {
                sim.drain().map(|_| ()).map_err(|e| WorkflowError::from(e).into())
            };
            run_bench(&specs, &dirs, sims, &mut settle)?
        }
        BackendKind::Slurm => {
            let backend = Arc::new(SlurmBackend::default());
            let poller = backend.clone();
            let polled = dirs.clone();
            let mut settle = move || wait_for_slurm(&poller, &polled);
            let backends = vec![backend; dirs.len()];
            run_bench(&specs, &dirs, backends, &mut settle)?
        }
    };

    if let Some(path) = &args.csv {
        bench::emit_csv(&samples, path)?;
        eprintln!("wrote {} samples to {}", samples.len(), path.display());
    }
    if let Some(path) = &args.smoothed {
        write_smoothed(&samples, args.window, path)?;
    }
    for s in bench::summarize(&samples) {
        println!("{s}");
    }
    Ok(0)
}

fn run_bench<B: SchedulerBackend>(
    specs: &[WorkloadSpec],
    dirs: &[PathBuf],
    backends: Vec<B>,
    settle: &mut dyn FnMut() -> bench::Result<()>,
) -> CliResult<Vec<BenchSample>> {
    let mut wfs = Vec::new();
    for (dir, backend) in dirs.iter().zip(backends) {
        let repo = RepositoryHandle::init(dir, None)?;
        wfs.push(Workflow::new(repo, backend)?);
    }
    let mut runs: Vec<(WorkloadSpec, &mut Workflow<B>)> =
        specs.iter().cloned().zip(wfs.iter_mut()).collect();
    let per_run = bench::run_interleaved(&mut runs, settle)?;
    Ok(per_run.into_iter().flatten().collect())
}

/// Polls accounting until no open job in any of the datasets is pending or
/// running.
fn wait_for_slurm(backend: &SlurmBackend, dirs: &[PathBuf]) -> bench::Result<()> {
    loop {
        let mut busy = false;
        for dir in dirs {
            let repo = RepositoryHandle::open(dir).map_err(WorkflowError::from)?;
            let registry =
                batchvc::Registry::open(&repo).map_err(WorkflowError::from)?;
            for job in registry.list_open().map_err(WorkflowError::from)? {
                let st = backend
                    .status(job.scheduler_job_id)
                    .map_err(WorkflowError::from)?;
                busy |= !st.state.is_terminal();
            }
        }
        if !busy {
            return Ok(());
        }
        std::thread::sleep(Duration::from_secs(5));
    }
}

fn write_smoothed(samples: &[BenchSample], window: usize, path: &Path) -> CliResult {
    let mut out = String::from("phase,outputs_per_job,job_index,rolling_mean_seconds\n");
    let mut groups: Vec<(Phase, usize)> = samples
        .iter()
        .map(|s| (s.phase, s.outputs_per_job))
        .collect();
    groups.sort();
    groups.dedup();
    for (phase, outputs) in groups {
        let subset: Vec<BenchSample> = samples
            .iter()
            .filter(|s| s.outputs_per_job == outputs)
            .cloned()
            .collect();
        let values = bench::durations(&subset, phase);
        for (i, v) in bench::rolling_average(&values, window)?.iter().enumerate() {
            out.push_str(&format!("{phase},{outputs},{i},{v}\n"));
        }
    }
    std::fs::write(path, out)
        .map_err(|e| Failure::usage(format!("writing {}: {e}", path.display())))
}
