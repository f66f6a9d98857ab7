use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{column}`")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    /// Row indices are 1-based and count data rows only (the CSV header is not a row).
    #[error("validation error in row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("validation error: duplicate observation for market `{market_id}` period {period}")]
    DuplicateKey { market_id: String, period: i64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: no observation for market `{market_id}` period {period}")]
    Lookup { market_id: String, period: i64 },

    #[error("no local support at (u={u}, v={v}): total kernel mass {mass:e}")]
    NoLocalSupport { u: f64, v: f64, mass: f64 },

    #[error("efficiency distribution column u={u} is unsupported: {missing} of {span} traced cells missing")]
    UnsupportedColumn { u: f64, missing: usize, span: usize },

    #[error("point outside traced range: {0}")]
    OutsideTracedRange(String),

    #[error("degenerate design: column `{column}` is constant")]
    DegenerateDesign { column: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("solver fell back to the nonconcave path in {periods} period(s)")]
    SolverFallback { periods: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn { .. } | Error::Schema(_) => "schema",
            Error::InvalidRow { .. } | Error::DuplicateKey { .. } | Error::Validation(_) => {
                "validation"
            }
            Error::Lookup { .. } => "lookup",
            Error::NoLocalSupport { .. } => "no_local_support",
            Error::UnsupportedColumn { .. } => "unsupported_column",
            Error::OutsideTracedRange(_) => "outside_traced_range",
            Error::DegenerateDesign { .. } => "degenerate_design",
            Error::Domain(_) => "domain",
            Error::Unsupported(_) => "unsupported",
            Error::SolverFallback { .. } => "solver_fallback",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingColumn { .. }
            | Error::Schema(_)
            | Error::InvalidRow { .. }
            | Error::DuplicateKey { .. }
            | Error::Validation(_)
            | Error::Lookup { .. }
            | Error::Csv(_)
            | Error::Json(_) => 2,
            Error::NoLocalSupport { .. }
            | Error::UnsupportedColumn { .. }
            | Error::OutsideTracedRange(_)
            | Error::DegenerateDesign { .. }
            | Error::Domain(_)
            | Error::Unsupported(_) => 3,
            Error::SolverFallback { .. } => 4,
            Error::Io(_) => 1,
        }
    }
}
