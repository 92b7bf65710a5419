//! Generalized discrepancy minimization (GDM) for kernel ridge regression
//! under covariate shift, with discrepancy minimization (DM), KMM and FE
//! baselines and the convex-optimization machinery they need.
//!
//! Module map:
//! - [`data`]: datasets, CSV ingestion, the synthetic shift benchmark.
//! - [`kernel`]: kernels, Gram matrices, normalized kernel bundles.
//! - [`optim`]: dense QP solver, simplex projection, spectral tools.
//! - [`learner`]: weighted kernel ridge regression.
//! - [`discrepancy`]: discrepancy, DM weights, diagnostics, loss lemmas.
//! - [`surrogate`]: surrogate loss balls and boundary sampling.
//! - [`gdm`]: the GDM objective, its dual QP and r validation.
//! - [`sdp`]: trust-region inner solver, SDP construction and export.
//! - [`baselines`]: Uniform, FE, KMM and DM reference learners.
//! - [`experiment`]: the benchmark harness behind the `gdm` binary.

pub mod baselines;
pub mod data;
pub mod discrepancy;
pub mod error;
pub mod experiment;
pub mod gdm;
pub mod kernel;
pub mod learner;
pub mod optim;
pub mod par;
pub mod rng;
pub mod sdp;
pub mod surrogate;

pub use error::{Error, Result};
