//! Experiment harness: single training runs with telemetry, hyperparameter
//! sweeps with deterministic per-run seeding, and report emission.

pub mod report;
pub mod run;
pub mod sweep;

use thiserror::Error;

// The training loop churns through ~100 KiB buffers; glibc malloc answers
// that with heap trim/mmap cycles that dominate wall time. mimalloc keeps
// the buffers pooled.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] quest_core::CoreError),
    #[error(transparent)]
    Optim(#[from] quest_core::optim::OptimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
