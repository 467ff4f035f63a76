//! Hyperspectral unmixing under endmember variability by marginal maximum
//! likelihood, with the marginal likelihood replaced by a variational lower
//! bound (ELBO) maximized by alternating updates.
//!
//! The image is partitioned into patches that share one random endmember
//! matrix. Each pixel mixes those endmembers with Dirichlet-distributed
//! abundances, and any pixel may be replaced by an outlier.

pub mod apg;
pub mod cli;
pub mod dirichlet;
pub mod elbo;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod priors;
pub mod special;
pub mod synth;

pub use engine::{run, run_with_progress, Engine, EngineConfig, InitMode, InitSpec, SweepRecord};
pub use error::{HelenError, Result};
pub use metrics::EvalReport;
pub use model::{HsiCube, ModelParameters, OutlierDensity, PatchGrid, UnmixResult, VariationalState};
pub use priors::{Family, PosteriorParams, PriorParams};
pub use synth::{SynthConfig, SynthGroundTruth};
