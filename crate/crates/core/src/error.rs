use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the degeneracy threshold")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sphere dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("transport between near-antipodal points is undefined (cosine {cosine})")]
    AntipodalTransport { cosine: f64 },

    #[error("class {0} has no bank entries")]
    EmptyClass(usize),

    #[error("selected neighbours of class {0} carry zero total weight")]
    ZeroMass(usize),

    #[error("feature bank has no entries in any class")]
    EmptyBank,

    #[error("need at least 2 prototypes to initialize chains, got {0}")]
    InsufficientPrototypes(usize),

    #[error("need at least 2 losses to fit a mixture, got {0}")]
    InsufficientData(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    InsufficientBatch(usize),

    #[error("no OOD direction found {theta_min} rad from every class mean after {attempts} attempts")]
    PlacementFailure { theta_min: f64, attempts: usize },

    #[error("empty score list")]
    EmptyInput,

    #[error("FPR95 needs at least 20 in-distribution scores, got {0}")]
    InsufficientId(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
