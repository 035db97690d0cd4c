//! Monte Carlo laboratory for the trace of the incipient infinite oriented
//! branching random walk.
//!
//! The crate samples the finite surrogate `T(n, m)` of the incipient infinite
//! critical Galton–Watson tree (a backbone of length `n` with critical side
//! trees conditioned to die out by a deadline), embeds it in `Z^d x Z_+` with
//! a symmetric random walk, and treats the resulting space-time multigraph as
//! a unit-conductance electrical network.
//!
//! Modules:
//!
//! - [`branching`]: progeny laws, extinction tables, deadline-conditioned
//!   sampling, `T(n, m)`.
//! - [`walk`]: step laws on `Z^d`, the covariance norm, exact n-step pmfs,
//!   bridges, local CLT and Green function checks.
//! - [`trace`]: the random-walk embedding and the trace multigraph.
//! - [`resistance`]: effective resistance (preconditioned CG), level
//!   resistance, Nash-Williams bound and the resistance laws.
//! - [`blocks`]: the good-block event hierarchy and intersection counting,
//!   including the two-tree experiment.
//! - [`harness`]: configuration, scans, exponent fits and the check suite.

pub mod blocks;
pub mod branching;
pub mod harness;
pub mod resistance;
pub mod rng;
pub mod stats;
pub mod trace;
pub mod walk;

pub use branching::{CondTree, ProgenyLaw, Tree};
pub use trace::{Embedding, TraceGraph};
pub use walk::{Site, StepLaw};
