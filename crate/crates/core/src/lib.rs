//! Version-controlled data repositories under concurrent batch-scheduler jobs.
//!
//! Jobs are scheduled with their outputs reserved in a clone-local registry,
//! finalized into commits that carry a machine-actionable reproducibility
//! record, and can be re-executed from any such commit.

mod annex;
mod git;

pub mod bench;
pub mod lock;
pub mod paths;
pub mod record;
pub mod registry;
pub mod repo;
pub mod scheduler;
pub mod workflow;

pub use paths::{PathError, PathSet, RelPath};
pub use record::{parse_record, render_record, ReproRecord};
pub use registry::{Registry, ScheduledJob};
pub use repo::{CommitId, CommitOutcome, FileClass, RepositoryHandle};
pub use scheduler::{JobState, SchedulerBackend, Simulator, SlurmBackend};
