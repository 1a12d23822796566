//! Posterior summaries: medians, intervals and convergence flags.

use serde::{Deserialize, Serialize};

use super::diagnostics::{ess_ratio, split_rhat};
use super::hmc::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::{CircadianCoefficients, EmissionParams, InitialDistribution, ModelConfig, ThetaParams};
use crate::scalar::Scalar;

/// Split-R̂ below this value counts as converged.
pub const RHAT_THRESHOLD: f64 = 1.05;
/// Effective-sample-size ratio above this value counts as adequate.
pub const ESS_RATIO_THRESHOLD: f64 = 0.5;
/// Divergence rate above which a fit is flagged.
pub const DIVERGENCE_WARNING_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub median: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// `None` when fewer than 4 draws per chain are available.
    pub rhat: Option<f64>,
    pub ess_ratio: Option<f64>,
    pub rhat_ok: bool,
    pub ess_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub config: ModelConfig,
    pub parameters: Vec<ParameterSummary>,
    pub n_chains: usize,
    pub n_draws: usize,
    pub n_divergent: usize,
    pub divergence_warning: bool,
}

impl FitSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Parameters assembled from posterior medians. The initial distribution
    /// is renormalized, since coordinate-wise medians need not sum to 1.
    pub fn median_theta(&self) -> Result<ThetaParams<f64>> {
        let m = self.config.n_states;
        let nc = self.config.n_coefficients();
        let med: Vec<f64> = self.parameters.iter().map(|p| p.median).collect();
        let nb = m * (m - 1) * nc;
        if med.len() != 3 * m + nb {
            return Err(Error::Dimension {
                what: "summary parameters",
                expected: 3 * m + nb,
                actual: med.len(),
            });
        }
        let delta = &med[2 * m + nb..];
        let total: f64 = delta.iter().sum();
        Ok(ThetaParams {
            config: self.config.clone(),
            emission: EmissionParams {
                means: med[..m].to_vec(),
                variances: med[m..2 * m].to_vec(),
            },
            coefficients: CircadianCoefficients::from_off_diagonal(m, nc, &med[2 * m..2 * m + nb])?,
            initial: InitialDistribution {
                delta: delta.iter().map(|d| d / total).collect(),
            },
        })
    }

    /// `true` when every parameter in `names` passes both diagnostic flags.
    pub fn converged(&self, names: &[&str]) -> bool {
        names
            .iter()
            .all(|n| self.get(n).is_some_and(|p| p.rhat_ok && p.ess_ok))
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median, SD and central 95% interval of each parameter, with split-R̂ and
/// ESS ratio.
pub fn posterior_summary<T: Scalar>(draws: &PosteriorDraws<T>) -> Result<FitSummary> {
    if draws.n_draws() == 0 {
        return Err(Error::Argument("no retained draws".into()));
    }
    let names = draws.parameter_names();
    let flat = draws.flat_chains();
    let chains: Vec<&Vec<Vec<f64>>> = flat.iter().filter(|c| !c.is_empty()).collect();
    let equal_length = chains.iter().all(|c| c.len() == chains[0].len());
    let parameters = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|d| d[k]).collect()).collect();
            let mut pooled = per_chain.concat();
            pooled.sort_by(f64::total_cmp);
            let n = pooled.len() as f64;
            let mean = pooled.iter().sum::<f64>() / n;
            let sd = if pooled.len() > 1 && pooled[0] != pooled[pooled.len() - 1] {
                (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let diag_ok = equal_length && per_chain[0].len() >= 4;
            let rhat = diag_ok.then(|| split_rhat(&per_chain).ok()).flatten();
            let ess = diag_ok.then(|| ess_ratio(&per_chain).ok()).flatten();
            ParameterSummary {
                name,
                median: quantile(&pooled, 0.5),
                sd,
                lower: quantile(&pooled, 0.025),
                upper: quantile(&pooled, 0.975),
                rhat_ok: rhat.is_some_and(|r| r < RHAT_THRESHOLD),
                ess_ok: ess.is_some_and(|e| e > ESS_RATIO_THRESHOLD),
                rhat,
                ess_ratio: ess,
            }
        })
        .collect();
    let n_sampling: usize = draws.chains.iter().map(|c| c.stats.n_sampling_iterations).sum();
    let n_divergent = draws.n_divergent();
    Ok(FitSummary {
        config: draws.config.clone(),
        parameters,
        n_chains: draws.chains.len(),
        n_draws: draws.n_draws(),
        n_divergent,
        divergence_warning: n_sampling > 0 && n_divergent as f64 > DIVERGENCE_WARNING_RATE * n_sampling as f64,
    })
}
