//! Multi-start maximum-likelihood comparator.
//!
//! The log-likelihood is maximized by BFGS over log means, log variances,
//! circadian coefficients and stick-breaking logits. The means are left
//! unordered during optimization, so nothing pins state labels or prevents
//! two states from sharing a mode; the winning solution is relabeled by
//! ascending mean afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::optimize::minimize_bfgs;
use super::summary::quantile;
use super::transform::{inverse_stick_breaking, stick_breaking, stick_breaking_pullback, Layout};
use crate::error::{Error, Result};
use crate::likelihood::{log_likelihood_gradient_with, ObservationSeries, Schedule};
use crate::model::{CircadianCoefficients, EmissionParams, InitialDistribution, ModelConfig, ThetaParams};
use crate::scalar::Scalar;

/// Convergence threshold on the gradient sup-norm.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Iteration cap per start.
pub const MAX_ITERATIONS: usize = 500;
/// Standard deviation of the log-scale jitter applied to initial means.
pub const MEAN_JITTER_SD: f64 = 0.5;

/// Outcome of one optimizer start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: usize,
    pub initial_loglik: f64,
    pub final_loglik: f64,
    pub iterations: usize,
    pub gradient_sup_norm: f64,
    pub converged: bool,
    pub status: String,
}

/// Best solution over all starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct MleFit<T> {
    /// Relabeled so that means ascend.
    pub theta: ThetaParams<T>,
    pub loglik: T,
    pub best_start: usize,
    pub traces: Vec<StartTrace>,
}

struct Objective<'a, T> {
    obs: &'a ObservationSeries<T>,
    config: &'a ModelConfig,
    schedule: Schedule<T>,
    layout: Layout,
}

impl<'a, T: Scalar> Objective<'a, T> {
    fn theta(&self, w: &[T]) -> Result<ThetaParams<T>> {
        let m = self.layout.n_states;
        let (delta, _) = stick_breaking(&w[self.layout.simplex()]);
        Ok(ThetaParams {
            config: self.config.clone(),
            emission: EmissionParams {
                means: w[self.layout.means()].iter().map(|v| v.exp()).collect(),
                variances: w[self.layout.variances()].iter().map(|v| v.exp()).collect(),
            },
            coefficients: CircadianCoefficients::from_off_diagonal(m, self.layout.n_coefficients, &w[self.layout.beta()])?,
            initial: InitialDistribution { delta },
        })
    }

    fn params(&self, theta: &ThetaParams<T>) -> Result<Vec<T>> {
        let mut w: Vec<T> = theta.emission.means.iter().map(|v| v.ln()).collect();
        w.extend(theta.emission.variances.iter().map(|v| v.ln()));
        w.extend(theta.coefficients.off_diagonal());
        w.extend(inverse_stick_breaking(&theta.initial.delta)?);
        Ok(w)
    }

    /// Negative log-likelihood and its gradient; `+inf` when not finite.
    fn eval(&self, w: &[T], grad: &mut [T]) -> Result<T> {
        let theta = self.theta(w)?;
        let (ll, natural) = log_likelihood_gradient_with(self.obs, &theta, &self.schedule)?;
        let Some(g) = natural.filter(|_| ll.is_finite()) else {
            return Ok(T::infinity());
        };
        let m = self.layout.n_states;
        let nc = self.layout.n_coefficients;
        for k in 0..m {
            grad[k] = -g.means[k] * theta.emission.means[k];
            grad[m + k] = -g.log_variances[k];
        }
        let mut idx = self.layout.beta().start;
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                let start = (i * m + j) * nc;
                for c in 0..nc {
                    grad[idx + c] = -g.beta[start + c];
                }
                idx += nc;
            }
        }
        let simplex = self.layout.simplex();
        stick_breaking_pullback(&w[simplex.clone()], &g.delta, false, &mut grad[simplex.clone()]);
        for v in &mut grad[simplex] {
            *v = -*v;
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Ok(T::infinity());
        }
        Ok(-ll)
    }
}

/// Random starting parameters: jittered data quantiles for the means, the
/// data variance for every state, standard normal coefficients and a uniform
/// initial distribution.
fn initial_theta<T: Scalar>(obs: &ObservationSeries<T>, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ThetaParams<T>> {
    let mut y: Vec<f64> = obs.observed().map(|v| v.as_f64()).collect();
    if y.len() < 2 {
        return Err(Error::Input("at least two observed epochs are required".into()));
    }
    y.sort_by(f64::total_cmp);
    let m = config.n_states;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).max(1e-6);
    let floor = 1e-3 * var.sqrt();
    let means = (0..m)
        .map(|k| {
            let q = quantile(&y, (k as f64 + 0.5) / m as f64).max(floor);
            let e: f64 = rng.sample(StandardNormal);
            T::lit(q * (MEAN_JITTER_SD * e).exp())
        })
        .collect();
    let nb = m * (m - 1) * config.n_coefficients();
    let beta: Vec<T> = (0..nb).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Ok(ThetaParams {
        config: config.clone(),
        emission: EmissionParams {
            means,
            variances: vec![T::lit(var); m],
        },
        coefficients: CircadianCoefficients::from_off_diagonal(m, config.n_coefficients(), &beta)?,
        initial: InitialDistribution::uniform(m),
    })
}

/// Maximizes the marginal likelihood from `n_starts` random starts and
/// returns the best solution. Start `s` draws from stream `s` of the
/// generator seeded by `seed`.
pub fn fit_mle<T: Scalar>(obs: &ObservationSeries<T>, config: &ModelConfig, n_starts: usize, seed: u64) -> Result<MleFit<T>> {
    if n_starts == 0 {
        return Err(Error::Argument("n_starts must be at least 1".into()));
    }
    obs.check()?;
    let objective = Objective {
        obs,
        config,
        schedule: Schedule::new(config, obs),
        layout: Layout::new(config),
    };
    let mut traces = Vec::with_capacity(n_starts);
    let mut best: Option<(usize, Vec<T>, T)> = None;
    for start in 0..n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(start as u64);
        let init = initial_theta(obs, config, &mut rng)?;
        let w0 = objective.params(&init)?;
        let mut scratch = vec![T::zero(); w0.len()];
        let initial = -objective.eval(&w0, &mut scratch)?.as_f64();
        let out = minimize_bfgs(|w, g| objective.eval(w, g), w0, MAX_ITERATIONS, GRADIENT_TOLERANCE)?;
        let loglik = -out.value.as_f64();
        traces.push(StartTrace {
            start,
            initial_loglik: initial,
            final_loglik: loglik,
            iterations: out.iterations,
            gradient_sup_norm: out.gradient_sup_norm,
            converged: out.converged,
            status: out.status,
        });
        if loglik.is_finite() && best.as_ref().is_none_or(|(_, _, v)| out.value < *v) {
            best = Some((start, out.w, out.value));
        }
    }
    let Some((best_start, w, value)) = best else {
        let detail: Vec<String> = traces.iter().map(|t| format!("start {}: {}", t.start, t.status)).collect();
        return Err(Error::Optimization(detail.join("; ")));
    };
    let theta = objective.theta(&w)?.sorted_by_mean();
    Ok(MleFit {
        theta,
        loglik: -value,
        best_start,
        traces,
    })
}
