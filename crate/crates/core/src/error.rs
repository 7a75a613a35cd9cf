use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix must be square, got {n_rows}x{n_cols}")]
    NotSquare { n_rows: usize, n_cols: usize },

    #[error("invalid CSR structure: {0}")]
    InvalidCsr(String),

    #[error("{path}: line {line}: {msg}")]
    MalformedInput {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: unsupported Matrix Market field `{field}`")]
    UnsupportedField { path: PathBuf, field: String },

    #[error("cannot scale: diagonal entry of row {row} is zero (structural zero diagonals are not repaired; a matching-based reordering is required)")]
    SingularScaling { row: usize },

    #[error("partition layout infeasible: n={n} with p={p}, k={k} needs n >= {min_n}")]
    LayoutInfeasible {
        n: usize,
        p: usize,
        k: usize,
        min_n: usize,
    },

    #[error("matrix is not block tridiagonal under the layout: nonzero at ({row}, {col}); increase k or decrease p")]
    NotBlockTridiagonal { row: usize, col: usize },

    #[error("singular block: zero pivot in column {col}")]
    SingularBlock { col: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ill-conditioned interface {interface}: condition estimate {cond:.3e}")]
    IllConditionedInterface { interface: usize, cond: f64 },

    #[error("variant {variant} does not support {op}")]
    UnsupportedVariant {
        variant: &'static str,
        op: &'static str,
    },

    #[error("inner reduced-system solve failed: relative residual {residual:.3e} after {iterations} iterations")]
    PreconditionerFailure { residual: f64, iterations: f64 },

    #[error("Krylov breakdown ({what}) after {iterations} iterations")]
    Breakdown { what: &'static str, iterations: f64 },

    #[error("matrix too large for dense study: n={n}, limit {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
