//! Causal separation of a vector sequence into a slowly-changing low-rank part
//! and a correlated sparse part.
//!
//! Each incoming frame is projected onto the orthogonal complement of the
//! current principal-subspace estimate; the sparse outlier is recovered from
//! that projection by partial-support ℓ1 minimization whose support prior
//! comes from a per-object Kalman tracker; the cleaned low-rank estimate is
//! fed back to keep the subspace current. Plain recursive projection (no
//! support prior) and offline principal components' pursuit are included as
//! baselines, along with a synthetic scene generator and CSV metrics.

use openblas_src as _; // link the system BLAS/LAPACK backend

pub mod config;
pub mod error;
pub mod geom;
pub mod io;
pub mod pcp;
pub mod pipeline;
pub mod report;
pub mod sparse;
pub mod subspace;
pub mod support;
pub mod synthdata;
pub mod tracker;

pub use error::{Error, Result};
