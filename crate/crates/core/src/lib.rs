//! Source separation as a diffusion inverse problem.
//!
//! The crate provides the noise schedule, analytic source priors, the DPS,
//! DSG, Dirac and hybrid anchor samplers, speaker-embedding guidance,
//! synthetic mixtures, separation metrics and the experiment harness used by
//! the `sepdiff` command-line tool.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod prior;
pub mod rng;
pub mod schedule;
pub mod signals;
pub mod solvers;

pub use error::{Error, Result};
pub use guidance::{BandEnergyEmbedder, Embedder, EmbeddingMatrix};
pub use prior::{BlockDctPrior, GaussianPrior, GmmPrior, ScoreModel};
pub use schedule::NoiseSchedule;
pub use solvers::{separate, SeparationConfig, SolverKind, TrackSet};
