use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while ingesting, transforming or matching data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("cannot parse `{value}` at row {row}, column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: {message}")]
    Validity { row: usize, message: String },
    #[error("column `{0}` is constant and cannot be scaled")]
    ConstantColumn(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("match pool exhausted: need {needed} rows, pool has {available} (shortfall {shortfall})")]
    PoolExhausted {
        needed: usize,
        available: usize,
        shortfall: usize,
    },
}

/// Errors from dense linear algebra on Gram matrices.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is rank deficient: column {column} ({name}) is collinear with earlier columns")]
    RankDeficient { column: usize, name: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid penalty parameter: {0}")]
    Parameter(String),
    #[error("design has {rows} rows but response has {len}")]
    NonConformant { rows: usize, len: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("stratum {stratum} has {size} rows, fewer than {folds} folds")]
    StratumTooSmall {
        stratum: &'static str,
        size: usize,
        folds: usize,
    },
    #[error("invalid cross-validation plan: {0}")]
    Plan(String),
    #[error("every cross-validation cell failed")]
    NoValidCell,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("{0}")]
    Precondition(String),
    #[error("logistic inclusion model did not converge after {0} iterations")]
    LogisticNonConvergence(usize),
    #[error("insufficient external controls for stage 3: {unmatched} unmatched treated, {available} unused external controls")]
    InsufficientControls { unmatched: usize, available: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("monte carlo needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("no methods requested")]
    NoMethods,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report error: {0}")]
    Report(String),
}

/// Top-level error carrying the module the failure came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data_model: {0}")]
    Data(#[from] DataError),
    #[error("sieve_basis: {0}")]
    Basis(#[from] LinalgError),
    #[error("scad_core: {0}")]
    Solver(#[from] SolverError),
    #[error("tuning: {0}")]
    Tuning(#[from] TuningError),
    #[error("estimators: {0}")]
    Estimate(#[from] EstimateError),
    #[error("sim_harness: {0}")]
    Sim(#[from] SimError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
