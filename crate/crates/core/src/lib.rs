//! Class-incremental learning over frozen feature embeddings.
//!
//! The crate is organised around a handful of modules:
//!
//! * [`featureset`]: labeled embedding matrices, FEATSET/CSV I/O, synthetic
//!   data and task-stream splitting.
//! * [`ipc`]: the incremental prototype classifier (distance softmax,
//!   hybrid CE + prototype loss, frozen old prototypes).
//! * [`baselines`]: linear, cosine-normalized linear and nearest-mean heads.
//! * [`diagnostics`]: Jacobi eigensolver, covariance spectrum / PC-ID and
//!   class-blocked cosine similarity matrices.
//! * [`harness`]: replays a task stream through a learner, manages herding
//!   exemplar memory and reports average incremental accuracy.
//! * [`cli`]: the `protocil` command line front end.

pub mod baselines;
pub mod cli;
pub mod diagnostics;
pub mod featureset;
pub mod harness;
pub mod ipc;
pub mod optim;

use thiserror::Error;

pub use baselines::{BaselineError, LinearHead, NmeHead};
pub use diagnostics::{DiagnosticsError, SimilarityReport, SpectrumReport};
pub use featureset::{FeatureSet, LoadError, Sample, SynthSpec, TaskStream};
pub use harness::{HarnessError, RunReport};
pub use ipc::{IpcError, LossBreakdown, PrototypeClassifier};
pub use optim::{LrSchedule, Objective, TrainConfig};

/// Version string embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Coarse failure class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Ipc(#[from] IpcError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Load(e) => e.category(),
            Error::Ipc(e) => e.category(),
            Error::Baseline(e) => e.category(),
            Error::Diagnostics(e) => e.category(),
            Error::Harness(e) => e.category(),
            Error::Config(_) => ErrorCategory::Usage,
            Error::Io { .. } | Error::Json { .. } => ErrorCategory::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
