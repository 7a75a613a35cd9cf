//! Low-rank SPIKE: preconditioned Krylov solvers for banded and
//! block-tridiagonal sparse systems.
//!
//! The matrix is reordered to a narrow band, split into `p` diagonal blocks
//! coupled by `k x k` corner blocks, and each block is LU-factorized. The
//! coupling spikes are replaced by rank-`n_svd` approximations, and the
//! resulting reduced system (or its block-diagonal truncation) is used as a
//! preconditioner for an outer BiCGStab or CG iteration.

pub mod dense;
pub mod error;
pub mod krylov;
pub mod ledger;
pub mod lu;
pub mod mm;
pub mod parallel;
pub mod partition;
pub mod reduced;
pub mod reorder;
pub mod solver;
pub mod sparse;
pub mod spikes;
pub mod study;
pub mod synth;

pub use error::{Error, Result};
pub use parallel::Schedule;
pub use partition::{PartitionBlocks, PartitionLayout};
pub use sparse::{CsrMatrix, DenseBlock};
