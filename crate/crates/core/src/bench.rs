//! Benchmark harness: synthetic job workloads, per-call timing, CSV output
//! and the smoothing/binning used to analyse it.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::paths::{PathSet, RelPath};
use crate::repo::RepositoryHandle;
use crate::scheduler::{JobId, SchedulerBackend};
use crate::workflow::{
    FinishAction, FinishOptions, ScheduleOptions, Workflow, WorkflowError,
};

pub const SCRIPT_NAME: &str = "bench_job.sh";
pub const CSV_HEADER: [&str; 7] = [
    "phase",
    "job_index",
    "duration_seconds",
    "outputs_per_job",
    "use_alt_dir",
    "files_in_repo_before",
    "backend",
];
/// Jobs per directory bucket in the `jobs/<bucket>/<index>` layout.
pub const BUCKET_SIZE: usize = 100;

// Writes `$2` files into the working directory, half text and half binary,
// with bytes that depend only on (job index, file index).
const SCRIPT: &str = r#"#!/bin/sh
# usage: bench_job.sh JOB_INDEX N_FILES TEXT_BYTES BINARY_BYTES
set -e
i=$1; n=$2; tb=$3; bb=$4
k=0
while [ "$k" -lt "$n" ]; do
    if [ $((k % 2)) -eq 0 ]; then
        yes "job $i file $k" | head -c "$tb" > "out_$k.txt"
    else
        { printf '\000\001\002'; yes "bin $i $k"; } | head -c "$bb" > "out_$k.bin"
    fi
    k=$((k + 1))
done
"#;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("job {job_index} (scheduler id {job_id}) did not complete: {detail}")]
    JobNotCompleted {
        job_index: usize,
        job_id: JobId,
        detail: String,
    },
    #[error("series is empty")]
    EmptySeries,
    #[error("window must be at least 1")]
    InvalidWindow,
    #[error("bin width must be positive and finite, got {0}")]
    InvalidBinWidth(f64),
    #[error("CSV does not match the sample schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Schedule,
    Finish,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Schedule => "SCHEDULE",
            Phase::Finish => "FINISH",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub n_jobs: usize,
    /// Includes the scheduler log and env.json of each job.
    pub outputs_per_job: usize,
    pub text_payload_bytes: usize,
    pub binary_payload_bytes: usize,
    /// Run jobs in a mirror below this directory.
    pub alt_dir: Option<PathBuf>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_jobs: 10,
            outputs_per_job: 4,
            text_payload_bytes: 64,
            binary_payload_bytes: 64,
            alt_dir: None,
        }
    }
}

impl WorkloadSpec {
    pub fn use_alt_dir(&self) -> bool {
        self.alt_dir.is_some()
    }

    /// Files the job script writes itself.
    pub fn generated_files(&self) -> usize {
        self.outputs_per_job - 2
    }

    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 12].contains(&self.outputs_per_job) {
            return Err(BenchError::InvalidSpec(format!(
                "outputs_per_job must be 4, 8 or 12, got {}",
                self.outputs_per_job
            )));
        }
        if self.binary_payload_bytes == 0 {
            return Err(BenchError::InvalidSpec(
                "binary payload needs at least one byte".into(),
            ));
        }
        Ok(())
    }
}

/// Working directory (and sole declared output) of job `index`.
pub fn job_dir(index: usize) -> RelPath {
    RelPath::new(&format!("jobs/{}/{index}", index / BUCKET_SIZE)).expect("valid path")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub phase: Phase,
    pub job_index: usize,
    pub duration_seconds: f64,
    pub outputs_per_job: usize,
    pub use_alt_dir: bool,
    pub files_in_repo_before: usize,
    pub backend: String,
}

/// Commits the benchmark job script unless it is already there.
pub fn install_script(repo: &RepositoryHandle) -> Result<()> {
    let path = repo.root().join(SCRIPT_NAME);
    if fs::read_to_string(&path).is_ok_and(|s| s == SCRIPT) {
        return Ok(());
    }
    fs::write(&path, SCRIPT).map_err(|source| BenchError::Io {
        context: format!("writing {}", path.display()),
        source,
    })?;
    let paths = PathSet::parse([SCRIPT_NAME]).expect("valid path");
    repo.commit_paths(&paths, "Add benchmark job script\n")
        .map_err(WorkflowError::from)?;
    Ok(())
}

/// Runs one workload: schedules every job, waits via `settle` until all
/// are terminal, then finishes them one by one.
pub fn run_workload<B: SchedulerBackend>(
    spec: &WorkloadSpec,
    wf: &mut Workflow<B>,
    settle: &mut dyn FnMut() -> Result<()>,
) -> Result<Vec<BenchSample>> {
    let mut runs = [(spec.clone(), wf)];
    Ok(run_interleaved(&mut runs, settle)?.pop().unwrap_or_default())
}

/// Round-robin driver over several workloads, each against its own
/// repository: job `i` of every workload is scheduled before job `i + 1` of
/// any. Returns the samples of each workload in input order.
pub fn run_interleaved<B: SchedulerBackend>(
    runs: &mut [(WorkloadSpec, &mut Workflow<B>)],
    settle: &mut dyn FnMut() -> Result<()>,
) -> Result<Vec<Vec<BenchSample>>> {
    for (spec, wf) in runs.iter() {
        spec.validate()?;
        install_script(wf.repo())?;
    }
    let mut samples: Vec<Vec<BenchSample>> = vec![Vec::new(); runs.len()];
    let mut ids: Vec<Vec<JobId>> = vec![Vec::new(); runs.len()];
    let max_jobs = runs.iter().map(|(s, _)| s.n_jobs).max().unwrap_or(0);

    for i in 0..max_jobs {
        for (r, (spec, wf)) in runs.iter_mut().enumerate() {
            if i >= spec.n_jobs {
                continue;
            }
            let opts = job_options(spec, i);
            let before = tracked_count(wf)?;
            let start = Instant::now();
            let job = wf.schedule(opts)?;
            let elapsed = start.elapsed().as_secs_f64();
            ids[r].push(job.scheduler_job_id);
            samples[r].push(sample(Phase::Schedule, i, elapsed, spec, before, wf));
        }
    }

    settle()?;

    for i in 0..max_jobs {
        for (r, (spec, wf)) in runs.iter_mut().enumerate() {
            if i >= spec.n_jobs {
                continue;
            }
            let id = ids[r][i];
            let before = tracked_count(wf)?;
            let start = Instant::now();
            let report = wf.finish(&FinishOptions {
                job_id: Some(id),
                ..Default::default()
            })?;
            let elapsed = start.elapsed().as_secs_f64();
            let outcome = report.outcomes.into_iter().next();
            match outcome.as_ref().map(|o| &o.action) {
                Some(FinishAction::Committed(_)) => {}
                _ => {
                    return Err(BenchError::JobNotCompleted {
                        job_index: i,
                        job_id: id,
                        detail: outcome.map_or("no outcome".into(), |o| o.to_string()),
                    })
                }
            }
            samples[r].push(sample(Phase::Finish, i, elapsed, spec, before, wf));
        }
    }
    Ok(samples)
}

fn job_options(spec: &WorkloadSpec, index: usize) -> ScheduleOptions {
    let dir = job_dir(index);
    let script = RelPath::new(SCRIPT_NAME).expect("valid path").relative_from(&dir);
    let mut outputs = PathSet::new();
    outputs.insert(dir.clone()).expect("job dir is not the root");
    let mut opts = ScheduleOptions::new(script, outputs);
    opts.pwd = dir;
    opts.args = vec![
        index.to_string(),
        spec.generated_files().to_string(),
        spec.text_payload_bytes.to_string(),
        spec.binary_payload_bytes.to_string(),
    ];
    opts.alt_dir = spec.alt_dir.clone();
    opts
}

fn tracked_count<B: SchedulerBackend>(wf: &Workflow<B>) -> Result<usize> {
    Ok(wf
        .repo()
        .tracked_file_count()
        .map_err(WorkflowError::from)?)
}

fn sample<B: SchedulerBackend>(
    phase: Phase,
    job_index: usize,
    duration_seconds: f64,
    spec: &WorkloadSpec,
    files_in_repo_before: usize,
    wf: &Workflow<B>,
) -> BenchSample {
    BenchSample {
        phase,
        job_index,
        duration_seconds,
        outputs_per_job: spec.outputs_per_job,
        use_alt_dir: spec.use_alt_dir(),
        files_in_repo_before,
        backend: wf.backend().name().to_string(),
    }
}

/// Trailing-window mean: `out[i]` averages `values[max(0, i-w+1)..=i]`.
pub fn rolling_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(BenchError::InvalidWindow);
    }
    if values.is_empty() {
        return Err(BenchError::EmptySeries);
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = NeumaierSum::default();
    for (i, &v) in values.iter().enumerate() {
        sum.add(v);
        if i >= window {
            sum.add(-values[i - window]);
        }
        // Bound drift from long add/subtract chains.
        if i % window == window - 1 {
            let lo = (i + 1).saturating_sub(window);
            sum = values[lo..=i].iter().copied().collect();
        }
        let len = (i + 1).min(window);
        out.push(sum.value() / len as f64);
    }
    Ok(out)
}

#[derive(Debug, Default, Clone, Copy)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::default();
        for v in iter {
            s.add(v);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Fixed-width histogram from the bin holding the minimum to the bin
/// holding the maximum; empty input gives no bins.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<Bin>> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(BenchError::InvalidBinWidth(bin_width));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Ok(Vec::new());
    }
    let index = |v: f64| (v / bin_width).floor() as i64;
    let lo = finite.iter().copied().map(index).min().expect("non-empty");
    let hi = finite.iter().copied().map(index).max().expect("non-empty");
    let mut bins: Vec<Bin> = (lo..=hi)
        .map(|k| Bin {
            lower: k as f64 * bin_width,
            upper: (k + 1) as f64 * bin_width,
            count: 0,
        })
        .collect();
    for v in finite {
        bins[(index(v) - lo) as usize].count += 1;
    }
    Ok(bins)
}

pub fn write_csv<W: io::Write>(samples: &[BenchSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if samples.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|source| BenchError::Io {
        context: "writing CSV".into(),
        source,
    })?;
    Ok(())
}

pub fn emit_csv(samples: &[BenchSample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|source| BenchError::Io {
        context: format!("creating {}", path.display()),
        source,
    })?;
    write_csv(samples, io::BufWriter::new(file))
}

/// Reads samples back, rejecting any deviation from the header or column
/// types.
pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<BenchSample>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(BenchError::Schema(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<BenchSample>().enumerate() {
        let s = row.map_err(|e| BenchError::Schema(format!("row {}: {e}", line + 1)))?;
        if !(s.duration_seconds.is_finite() && s.duration_seconds >= 0.0) {
            return Err(BenchError::Schema(format!(
                "row {}: negative or non-finite duration",
                line + 1
            )));
        }
        out.push(s);
    }
    Ok(out)
}

/// Raw and quartile statistics of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub count: usize,
    pub total_seconds: f64,
    pub mean_seconds: f64,
    pub first_quartile_mean: f64,
    pub last_quartile_mean: f64,
}

impl fmt::Display for PhaseSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} n={:<6} total={:.4}s mean={:.6}s first-quartile={:.6}s last-quartile={:.6}s",
            self.phase,
            self.count,
            self.total_seconds,
            self.mean_seconds,
            self.first_quartile_mean,
            self.last_quartile_mean
        )
    }
}

/// Means of the first and last quarter of `values` (at least one element
/// each).
pub fn quartile_means(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(BenchError::EmptySeries);
    }
    let q = (values.len() / 4).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&values[..q]), mean(&values[values.len() - q..])))
}

/// Durations of `phase` in job order.
pub fn durations(samples: &[BenchSample], phase: Phase) -> Vec<f64> {
    let mut rows: Vec<&BenchSample> = samples.iter().filter(|s| s.phase == phase).collect();
    rows.sort_by_key(|s| s.job_index);
    rows.iter().map(|s| s.duration_seconds).collect()
}

pub fn summarize(samples: &[BenchSample]) -> Vec<PhaseSummary> {
    [Phase::Schedule, Phase::Finish]
        .into_iter()
        .filter_map(|phase| {
            let d = durations(samples, phase);
            let (first, last) = quartile_means(&d).ok()?;
            let total: f64 = d.iter().sum();
            Some(PhaseSummary {
                phase,
                count: d.len(),
                total_seconds: total,
                mean_seconds: total / d.len() as f64,
                first_quartile_mean: first,
                last_quartile_mean: last,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(values: &[f64], w: usize) -> Vec<f64> {
        (0..values.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s = &values[lo..=i];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect()
    }

    #[test]
    fn rolling_constant_and_identity() {
        let c = vec![2.5; 37];
        for w in [1, 5, 100] {
            assert!(rolling_average(&c, w).unwrap().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        }
        let v: Vec<f64> = (0..20).map(|i| (i * i) as f64 * 0.1).collect();
        assert_eq!(rolling_average(&v, 1).unwrap(), v);
    }

    #[test]
    fn rolling_spike_spreads_over_window() {
        let mut v = vec![0.0; 400];
        v[150] = 100.0;
        let r = rolling_average(&v, 100).unwrap();
        for (i, x) in r.iter().enumerate() {
            let want = if (150..250).contains(&i) { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-12, "{i}: {x}");
        }
    }

    #[test]
    fn rolling_errors() {
        assert!(matches!(rolling_average(&[], 3), Err(BenchError::EmptySeries)));
        assert!(matches!(rolling_average(&[1.0], 0), Err(BenchError::InvalidWindow)));
    }

    proptest! {
        #[test]
        fn rolling_matches_oracle(
            values in prop::collection::vec(0.0f64..10.0, 1..500),
            w in 1usize..150,
        ) {
            let got = rolling_average(&values, w).unwrap();
            for (g, o) in got.iter().zip(oracle(&values, w)) {
                prop_assert!((g - o).abs() <= 1e-12 * o.abs().max(1e-300), "{} vs {}", g, o);
            }
        }

        #[test]
        fn histogram_counts_sum(values in prop::collection::vec(0.0f64..5.0, 0..300), bw in 0.01f64..2.0) {
            let bins = histogram(&values, bw).unwrap();
            prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), values.len());
        }
    }

    #[test]
    fn histogram_edges() {
        assert!(histogram(&[], 1.0).unwrap().is_empty());
        assert!(histogram(&[1.0], 0.0).is_err());
        let bins = histogram(&[0.1, 0.2, 1.5, 3.9], 1.0).unwrap();
        let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, [2, 1, 0, 1]);
    }

    fn samples(n: usize) -> Vec<BenchSample> {
        (0..n)
            .map(|i| BenchSample {
                phase: if i % 2 == 0 { Phase::Schedule } else { Phase::Finish },
                job_index: i / 2,
                duration_seconds: 0.25 * i as f64,
                outputs_per_job: 4,
                use_alt_dir: false,
                files_in_repo_before: i,
                backend: "sim".into(),
            })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let s = samples(3);
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1], "SCHEDULE,0,0.0,4,false,0,sim");
        assert_eq!(read_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn csv_rejects_wrong_schema() {
        assert!(read_csv("phase,job\nSCHEDULE,0\n".as_bytes()).is_err());
        let bad = format!("{}\nSCHEDULE,0,-1.0,4,false,0,sim\n", CSV_HEADER.join(","));
        assert!(read_csv(bad.as_bytes()).is_err());
        let bad = format!("{}\nSTART,0,1.0,4,false,0,sim\n", CSV_HEADER.join(","));
        assert!(read_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn empty_csv_has_header() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), CSV_HEADER.join(","));
    }

    #[test]
    fn nested_layout() {
        assert_eq!(job_dir(0).as_str(), "jobs/0/0");
        assert_eq!(job_dir(99).as_str(), "jobs/0/99");
        assert_eq!(job_dir(100).as_str(), "jobs/1/100");
        assert_eq!(job_dir(12345).as_str(), "jobs/123/12345");
    }

    #[test]
    fn summary_quartiles() {
        let s = samples(16);
        let sum = summarize(&s);
        assert_eq!(sum.len(), 2);
        let sched = &sum[0];
        assert_eq!(sched.count, 8);
        // Schedule durations are 0, 0.5, ..., 3.5.
        assert!((sched.total_seconds - 14.0).abs() < 1e-12);
        assert!((sched.first_quartile_mean - 0.25).abs() < 1e-12);
        assert!((sched.last_quartile_mean - 3.25).abs() < 1e-12);
    }
}
