//! Bayesian circadian hidden Markov model for actigraphy.
//!
//! Activity epochs are modelled by a Gaussian HMM whose transition
//! probabilities follow harmonic (cosinor) functions of clock time. The crate
//! provides the likelihood and its gradient, a NUTS posterior sampler, a
//! multi-start maximum-likelihood comparator, simulation of reference
//! scenarios, and rest-activity rhythm metrics derived from fitted models.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

pub mod error;
pub mod inference;
pub mod likelihood;
pub mod metrics;
pub mod model;
mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use likelihood::{
    brute_force_log_likelihood, filtered_probabilities, forward_log_likelihood, log_likelihood_gradient, log_posterior,
    log_posterior_gradient, log_prior, FilteredProbabilities, ObservationSeries, Posterior,
};
pub use metrics::{
    accumulated_state_prob_bias, gaussian_kl, gravity_center, rar_summary, replicate_metrics, rest_amount, rhythmic_index,
    state_probability_curve, RarSummary, ReplicateEstimate, ReplicateMetrics, StateProbabilityCurve,
};
pub use model::{
    harmonic_covariates, log_emission_density, parameter_names, transition_matrix_at, validate, CircadianCoefficients,
    EmissionParams, HyperParams, InitialDistribution, ModelConfig, ThetaParams, TransitionMatrix, Violation,
};
pub use scalar::Scalar;
pub use simulate::{builtin_scenario, simulate_scenario, simulate_series, ScenarioSpec, SimulatedSeries};

pub type Theta = ThetaParams<f64>;
pub type Series = ObservationSeries<f64>;
pub type Hyper = HyperParams<f64>;
pub type Scenario = ScenarioSpec<f64>;
pub type Simulated = SimulatedSeries<f64>;
