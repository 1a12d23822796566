//! Posterior sampling, convergence diagnostics and the maximum-likelihood
//! comparator.

pub mod diagnostics;
pub mod hmc;
pub mod mle;
pub mod nuts;
mod optimize;
pub mod summary;
pub mod transform;

pub use diagnostics::{effective_sample_size, ess_ratio, split_rhat};
pub use hmc::{run_chain, run_hmc, ChainDraws, McmcConfig, PosteriorDraws};
pub use mle::{fit_mle, MleFit, StartTrace};
pub use nuts::{sample_chain, ChainOutput, ChainStats, LogDensity, NutsSettings};
pub use summary::{posterior_summary, FitSummary, ParameterSummary};
pub use transform::{to_constrained, to_unconstrained, unconstrained_dim};
