use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report, grouped by the subsystem that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("optimizer did not converge after {iterations} iterations (KKT residual {residual:.3e}, objective {objective:.6e})")]
    Optimizer {
        iterations: usize,
        residual: f64,
        objective: f64,
    },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Short category label, also used by the CLI to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Ingest(_) | Error::Csv(_) => "ingest",
            Error::Oracle(_) => "oracle",
            Error::Domain(_) => "domain",
            Error::Allocation(_) => "allocation",
            Error::Optimizer { .. } => "optimizer",
            Error::Estimation(_) => "estimation",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
            Error::Toml(_) => "config",
        }
    }
}
