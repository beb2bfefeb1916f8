use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("time ordering violated: expected r < t, got t = {t}, r = {r}")]
    Ordering { t: f64, r: f64 },
    #[error("degenerate time t = {t}: sigma is zero")]
    DegenerateTime { t: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("condition error: {0}")]
    Condition(String),
    #[error("all importance weights degenerate at t = {t}")]
    NumericalDegeneracy { t: f64 },
    #[error("non-finite value in {op} at t = {t}, r = {r}")]
    NonFinite { op: &'static str, t: f64, r: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated before end of header")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

impl Error {
    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NumericalDegeneracy { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
