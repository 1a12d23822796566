//! Posterior sampling for the circadian HMM.

use serde::{Deserialize, Serialize};

use super::nuts::{sample_chain, ChainStats, NutsSettings};
use super::transform::to_constrained;
use crate::error::{Error, Result};
use crate::likelihood::{ObservationSeries, Posterior};
use crate::model::{parameter_names, HyperParams, ModelConfig, ThetaParams};
use crate::scalar::Scalar;

/// Sampler run configuration. `n_iter` counts warm-up iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub n_warmup: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_leapfrog_depth: usize,
}

impl Default for McmcConfig {
    /// Two chains of 20000 iterations, half warm-up, every 4th draw kept.
    fn default() -> Self {
        Self {
            n_chains: 2,
            n_iter: 20_000,
            n_warmup: 10_000,
            thin: 4,
            seed: 1,
            target_accept: 0.8,
            max_leapfrog_depth: 10,
        }
    }
}

impl McmcConfig {
    /// Reduced budget: two chains of 4000 iterations, 2000 warm-up.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_iter: 4000,
            n_warmup: 2000,
            seed,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Argument("n_chains must be at least 1".into()));
        }
        if self.n_warmup >= self.n_iter {
            return Err(Error::Argument("n_warmup must be less than n_iter".into()));
        }
        if self.thin == 0 {
            return Err(Error::Argument("thin must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Argument("target_accept must lie in (0, 1)".into()));
        }
        if self.max_leapfrog_depth == 0 {
            return Err(Error::Argument("max_leapfrog_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> NutsSettings {
        NutsSettings {
            n_iter: self.n_iter,
            n_warmup: self.n_warmup,
            thin: self.thin,
            target_accept: self.target_accept,
            max_depth: self.max_leapfrog_depth,
        }
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.n_warmup).div_ceil(self.thin)
    }
}

/// Constrained draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ChainDraws<T> {
    pub draws: Vec<ThetaParams<T>>,
    pub stats: ChainStats,
}

/// Retained draws of every chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PosteriorDraws<T> {
    pub config: ModelConfig,
    pub chains: Vec<ChainDraws<T>>,
}

impl<T: Scalar> PosteriorDraws<T> {
    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(&self.config)
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn n_divergent(&self) -> usize {
        self.chains.iter().map(|c| c.stats.n_divergent).sum()
    }

    /// Draws of flat parameter `k` (ordering of [`ThetaParams::to_flat`]),
    /// one vector per chain.
    pub fn parameter_chains(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d.to_flat()[k].as_f64()).collect())
            .collect()
    }

    /// All draws as flat parameter vectors, one matrix per chain.
    pub fn flat_chains(&self) -> Vec<Vec<Vec<f64>>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d.to_flat().iter().map(|v| v.as_f64()).collect()).collect())
            .collect()
    }
}

/// Draws from one chain of the posterior. Chain `c` uses stream `c` of the
/// generator seeded by `mcmc.seed`.
pub fn run_chain<T: Scalar>(posterior: &Posterior<T>, mcmc: &McmcConfig, chain: usize) -> Result<ChainDraws<T>> {
    let out = sample_chain(posterior, &mcmc.settings(), mcmc.seed, chain as u64)?;
    let draws = out
        .draws
        .iter()
        .map(|z| to_constrained(z, posterior.config()).map(|(theta, _)| theta))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainDraws {
        draws,
        stats: out.stats,
    })
}

/// Samples the posterior of `config` given one subject's series.
pub fn run_hmc<T: Scalar>(
    obs: &ObservationSeries<T>,
    config: &ModelConfig,
    hyper: &HyperParams<T>,
    mcmc: &McmcConfig,
) -> Result<PosteriorDraws<T>> {
    mcmc.check()?;
    let posterior = Posterior::new(obs.clone(), config.clone(), hyper.clone())?;
    let chains = (0..mcmc.n_chains)
        .map(|c| run_chain(&posterior, mcmc, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        config: config.clone(),
        chains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    #[test]
    fn defaults_and_desk_budget() {
        let d = McmcConfig::default();
        assert_eq!((d.n_chains, d.n_iter, d.n_warmup, d.thin), (2, 20_000, 10_000, 4));
        assert_eq!(d.draws_per_chain(), 2500);
        let desk = McmcConfig::desk(9);
        assert_eq!(desk.draws_per_chain(), 500);
        let mut bad = desk.clone();
        bad.n_warmup = bad.n_iter;
        assert!(bad.check().is_err());
    }

    /// With no observed epochs the posterior is the prior; compare the median
    /// of the lowest mean with that of sorted Gamma(1, 1) triples.
    #[test]
    fn prior_only_recovers_ordered_prior() {
        let config = ModelConfig::default();
        let obs = ObservationSeries {
            values: vec![0.0],
            missing: vec![true],
            epoch_minutes: 5,
            start_hour: 0.0,
        };
        let mcmc = McmcConfig {
            n_chains: 2,
            n_iter: 6000,
            n_warmup: 1000,
            thin: 1,
            seed: 17,
            ..McmcConfig::default()
        };
        let draws = run_hmc(&obs, &config, &HyperParams::weakly_informative(3), &mcmc).unwrap();
        for c in &draws.chains {
            assert!(c.draws.iter().all(|d| validate(d).is_empty()));
        }
        let mut mu1: Vec<f64> = draws.parameter_chains(0).concat();
        mu1.sort_by(f64::total_cmp);
        let median = mu1[mu1.len() / 2];

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gamma = Gamma::new(1.0, 1.0).unwrap();
        let mut oracle: Vec<f64> = (0..200_000)
            .map(|_| {
                let mut v = [gamma.sample(&mut rng), gamma.sample(&mut rng), gamma.sample(&mut rng)];
                v.sort_by(f64::total_cmp);
                v[0]
            })
            .collect();
        oracle.sort_by(f64::total_cmp);
        let oracle_median = oracle[oracle.len() / 2];
        // minimum of three unit exponentials is Exp(3)
        assert!((oracle_median - 2f64.ln() / 3.0).abs() < 0.005);
        assert!((median - oracle_median).abs() < 0.1 * oracle_median, "{median} vs {oracle_median}");
    }
}
