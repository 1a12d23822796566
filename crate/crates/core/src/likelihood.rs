//! Marginal likelihood, priors and posterior gradients.
//!
//! The forward recursion runs on normalized probabilities and accumulates the
//! log normalizers, so long series (a week of 5-minute epochs) do not
//! underflow. State `S_{k+1}` is drawn from the row of the transition matrix
//! evaluated at the clock time of the source epoch `k`. At a missing epoch
//! the emission term is 1, so the step is pure state propagation.
//!
//! Gradients with respect to the natural parameters use the Fisher identity:
//! smoothed state and pair probabilities from a scaled backward pass give the
//! exact derivative of the log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::transform::{pullback_to_unconstrained, to_constrained, Layout, NaturalGradient};
use crate::model::{fill_transition, gaussian_log_density, harmonic_covariates, transition_matrix_at, HyperParams, ModelConfig, ThetaParams};
use crate::scalar::{ln_gamma, log_sum_exp, Scalar};

/// Largest number of paths [`brute_force_log_likelihood`] will enumerate.
pub const BRUTE_FORCE_PATH_LIMIT: usize = 1_000_000;

/// Floor applied to transition probabilities before taking logarithms.
const PROB_FLOOR: f64 = 1e-300;

/// One subject's epoch-aligned activity series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries<T> {
    pub values: Vec<T>,
    /// `true` where the epoch carries no observation; the matching entry of
    /// `values` is ignored.
    pub missing: Vec<bool>,
    pub epoch_minutes: u32,
    /// Clock time of epoch 0, in hours.
    pub start_hour: T,
}

impl<T: Scalar> ObservationSeries<T> {
    /// Fully observed series starting at midnight.
    pub fn complete(values: Vec<T>, epoch_minutes: u32) -> Self {
        let missing = vec![false; values.len()];
        Self {
            values,
            missing,
            epoch_minutes,
            start_hour: T::zero(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Clock time of epoch `k`, in hours (not reduced modulo 24).
    pub fn t_hours(&self, k: usize) -> T {
        self.start_hour + T::lit(k as f64 * self.epoch_minutes as f64 / 60.0)
    }

    /// Observed values, skipping missing epochs.
    pub fn observed(&self) -> impl Iterator<Item = T> + '_ {
        self.values
            .iter()
            .zip(&self.missing)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Input("observation series is empty".into()));
        }
        if self.missing.len() != self.values.len() {
            return Err(Error::Dimension {
                what: "missing mask",
                expected: self.values.len(),
                actual: self.missing.len(),
            });
        }
        if self.epoch_minutes == 0 {
            return Err(Error::Input("epoch length must be positive".into()));
        }
        if let Some(k) = self
            .values
            .iter()
            .zip(&self.missing)
            .position(|(v, &m)| !m && !v.is_finite())
        {
            return Err(Error::Input(format!("non-finite observation at epoch {k}")));
        }
        Ok(())
    }
}

/// Normalized forward probabilities `p(S_k | y_{1:k})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredProbabilities<T> {
    /// One row of `m` probabilities per epoch.
    pub probs: Vec<Vec<T>>,
    pub log_norm_constants: Vec<T>,
}

/// Which transition matrix each step uses. When the model repeats every 24
/// hours, matrices are shared between epochs at the same clock time.
#[derive(Debug, Clone)]
pub(crate) struct Schedule<T> {
    covariates: Vec<Vec<T>>,
    period: Option<usize>,
}

impl<T: Scalar> Schedule<T> {
    pub(crate) fn new(config: &ModelConfig, obs: &ObservationSeries<T>) -> Self {
        let steps = obs.len().saturating_sub(1);
        let period = (config.is_daily_periodic() && 1440 % obs.epoch_minutes == 0)
            .then(|| (1440 / obs.epoch_minutes) as usize)
            .filter(|&p| p < steps);
        let n_slots = period.unwrap_or(steps);
        let covariates = (0..n_slots)
            .map(|k| harmonic_covariates(obs.t_hours(k), config))
            .collect();
        Self { covariates, period }
    }

    #[inline]
    fn slot(&self, step: usize) -> usize {
        match self.period {
            Some(p) => step % p,
            None => step,
        }
    }

    fn n_slots(&self) -> usize {
        self.covariates.len()
    }
}

/// Scratch output of one forward (and optionally backward) sweep.
struct Sweep<T> {
    loglik: T,
    gradient: Option<NaturalGradient<T>>,
    filtered: Option<FilteredProbabilities<T>>,
}

fn dims_check<T: Scalar>(theta: &ThetaParams<T>) -> Result<()> {
    let m = theta.n_states();
    let checks = [
        ("means", theta.emission.means.len()),
        ("variances", theta.emission.variances.len()),
        ("delta", theta.initial.delta.len()),
        ("coefficient states", theta.coefficients.n_states()),
    ];
    for (what, actual) in checks {
        if actual != m {
            return Err(Error::Dimension { what, expected: m, actual });
        }
    }
    if theta.coefficients.n_coefficients() != theta.config.n_coefficients() {
        return Err(Error::Dimension {
            what: "coefficient vector",
            expected: theta.config.n_coefficients(),
            actual: theta.coefficients.n_coefficients(),
        });
    }
    Ok(())
}

fn sweep<T: Scalar>(
    obs: &ObservationSeries<T>,
    theta: &ThetaParams<T>,
    schedule: &Schedule<T>,
    want_gradient: bool,
    want_filtered: bool,
) -> Result<Sweep<T>> {
    let m = theta.n_states();
    let n = obs.len();
    let mm = m * m;

    let mut gamma = vec![T::zero(); schedule.n_slots() * mm];
    for (s, x) in schedule.covariates.iter().enumerate() {
        fill_transition(&theta.coefficients, x, &mut gamma[s * mm..(s + 1) * mm]).map_err(|(from, to)| {
            Error::NonFinitePredictor {
                from,
                to,
                t_hours: obs.t_hours(s).as_f64(),
            }
        })?;
    }

    // emission terms scaled by their per-epoch maximum
    let means = &theta.emission.means;
    let vars = &theta.emission.variances;
    let mut emis = vec![T::one(); n * m];
    let mut offset = vec![T::zero(); n];
    let log_norm: Vec<T> = vars.iter().map(|&v| -T::lit(0.5) * (T::TAU() * v).ln()).collect();
    let half_precision: Vec<T> = vars.iter().map(|&v| T::lit(0.5) / v).collect();
    for k in 0..n {
        if obs.missing[k] {
            continue;
        }
        let y = obs.values[k];
        let row = &mut emis[k * m..(k + 1) * m];
        let mut hi = T::neg_infinity();
        for j in 0..m {
            let d = y - means[j];
            row[j] = log_norm[j] - d * d * half_precision[j];
            hi = hi.max(row[j]);
        }
        if !hi.is_finite() {
            return Ok(Sweep {
                loglik: T::neg_infinity(),
                gradient: None,
                filtered: None,
            });
        }
        row.iter_mut().for_each(|v| *v = (*v - hi).exp());
        offset[k] = hi;
    }

    let mut alpha = vec![T::zero(); n * m];
    let mut scale = vec![T::zero(); n];
    let mut inv_scale = vec![T::zero(); n];
    let mut loglik = T::zero();
    for k in 0..n {
        let (done, rest) = alpha.split_at_mut(k * m);
        let cur = &mut rest[..m];
        let f = &emis[k * m..(k + 1) * m];
        if k == 0 {
            for j in 0..m {
                cur[j] = theta.initial.delta[j] * f[j];
            }
        } else {
            let prev = &done[(k - 1) * m..];
            let g = &gamma[schedule.slot(k - 1) * mm..][..mm];
            for j in 0..m {
                let mut acc = T::zero();
                for i in 0..m {
                    acc += prev[i] * g[i * m + j];
                }
                cur[j] = acc * f[j];
            }
        }
        let c: T = cur.iter().copied().sum();
        if !(c > T::zero()) || !c.is_finite() {
            return Ok(Sweep {
                loglik: T::neg_infinity(),
                gradient: None,
                filtered: None,
            });
        }
        let inv = T::one() / c;
        cur.iter_mut().for_each(|v| *v *= inv);
        scale[k] = c;
        inv_scale[k] = inv;
        loglik += c.ln() + offset[k];
    }

    let filtered = want_filtered.then(|| FilteredProbabilities {
        probs: alpha.chunks(m).map(|r| r.to_vec()).collect(),
        log_norm_constants: scale.iter().zip(&offset).map(|(c, o)| c.ln() + *o).collect(),
    });

    if !want_gradient {
        return Ok(Sweep {
            loglik,
            gradient: None,
            filtered,
        });
    }

    let layout = Layout::new(&theta.config);
    let nc = layout.n_coefficients;
    let mut grad = NaturalGradient::zeros(&layout);
    let mut eta_adj = vec![T::zero(); schedule.n_slots() * mm];
    let mut back_next = vec![T::one(); m];
    let mut back = vec![T::zero(); m];
    let mut w = vec![T::zero(); m];

    let precision: Vec<T> = vars.iter().map(|&v| T::one() / v).collect();
    let add_emission = |k: usize, post: &[T], grad: &mut NaturalGradient<T>| {
        if obs.missing[k] {
            return;
        }
        let y = obs.values[k];
        for j in 0..m {
            let d = y - means[j];
            grad.means[j] += post[j] * d * precision[j];
            grad.log_variances[j] += post[j] * (d * d * half_precision[j] - T::lit(0.5));
        }
    };

    let mut post = vec![T::zero(); m];
    for j in 0..m {
        post[j] = alpha[(n - 1) * m + j];
    }
    add_emission(n - 1, &post, &mut grad);

    for k in (0..n.saturating_sub(1)).rev() {
        let f = &emis[(k + 1) * m..(k + 2) * m];
        let inv = inv_scale[k + 1];
        for j in 0..m {
            w[j] = f[j] * back_next[j] * inv;
        }
        let s = schedule.slot(k);
        let g = &gamma[s * mm..][..mm];
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..m {
                acc += g[i * m + j] * w[j];
            }
            back[i] = acc;
        }
        let a = &alpha[k * m..(k + 1) * m];
        let adj = &mut eta_adj[s * mm..][..mm];
        for i in 0..m {
            for j in 0..m {
                adj[i * m + j] += a[i] * g[i * m + j] * (w[j] - back[i]);
            }
        }
        for j in 0..m {
            post[j] = a[j] * back[j];
        }
        add_emission(k, &post, &mut grad);
        std::mem::swap(&mut back, &mut back_next);
    }

    // back_next now holds the scaled backward vector at epoch 0
    for j in 0..m {
        grad.delta[j] = emis[j] * back_next[j] * inv_scale[0];
    }
    for (s, x) in schedule.covariates.iter().enumerate() {
        let adj = &eta_adj[s * mm..][..mm];
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                let a = adj[i * m + j];
                let dst = &mut grad.beta[(i * m + j) * nc..][..nc];
                for (d, &xc) in dst.iter_mut().zip(x) {
                    *d += a * xc;
                }
            }
        }
    }

    Ok(Sweep {
        loglik,
        gradient: Some(grad),
        filtered,
    })
}

/// Marginal log-likelihood `log L(y | theta)` by the scaled forward recursion.
///
/// The ordering of the means is not required here, so the function also
/// serves unconstrained (maximum-likelihood) fits.
pub fn forward_log_likelihood<T: Scalar>(obs: &ObservationSeries<T>, theta: &ThetaParams<T>) -> Result<T> {
    obs.check()?;
    dims_check(theta)?;
    let schedule = Schedule::new(&theta.config, obs);
    Ok(sweep(obs, theta, &schedule, false, false)?.loglik)
}

/// Log-likelihood together with its gradient with respect to means,
/// log-variances, the full coefficient tensor and the initial distribution.
pub fn log_likelihood_gradient<T: Scalar>(
    obs: &ObservationSeries<T>,
    theta: &ThetaParams<T>,
) -> Result<(T, Option<NaturalGradient<T>>)> {
    obs.check()?;
    dims_check(theta)?;
    let schedule = Schedule::new(&theta.config, obs);
    let s = sweep(obs, theta, &schedule, true, false)?;
    Ok((s.loglik, s.gradient))
}

pub(crate) fn log_likelihood_gradient_with<T: Scalar>(
    obs: &ObservationSeries<T>,
    theta: &ThetaParams<T>,
    schedule: &Schedule<T>,
) -> Result<(T, Option<NaturalGradient<T>>)> {
    let s = sweep(obs, theta, schedule, true, false)?;
    Ok((s.loglik, s.gradient))
}

/// Filtered probabilities and per-step log normalizers.
pub fn filtered_probabilities<T: Scalar>(
    obs: &ObservationSeries<T>,
    theta: &ThetaParams<T>,
) -> Result<FilteredProbabilities<T>> {
    obs.check()?;
    dims_check(theta)?;
    let schedule = Schedule::new(&theta.config, obs);
    sweep(obs, theta, &schedule, false, true)?
        .filtered
        .ok_or_else(|| Error::Domain("observations have zero likelihood under theta".into()))
}

/// Exact log-likelihood by enumerating every state path. Testing oracle.
pub fn brute_force_log_likelihood<T: Scalar>(obs: &ObservationSeries<T>, theta: &ThetaParams<T>) -> Result<T> {
    obs.check()?;
    dims_check(theta)?;
    let m = theta.n_states();
    let n = obs.len();
    let paths = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(m).filter(|&p| p <= BRUTE_FORCE_PATH_LIMIT));
    let Some(paths) = paths else {
        return Err(Error::TooLarge { n_states: m, n_obs: n });
    };
    let floor = T::lit(PROB_FLOOR);
    let log_gamma = (0..n.saturating_sub(1))
        .map(|k| {
            transition_matrix_at(theta, obs.t_hours(k)).map(|g| g.probs.iter().map(|p| p.max(floor).ln()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let log_emis: Vec<Vec<T>> = (0..n)
        .map(|k| {
            (0..m)
                .map(|j| {
                    if obs.missing[k] {
                        T::zero()
                    } else {
                        gaussian_log_density(obs.values[k], theta.emission.means[j], theta.emission.variances[j])
                    }
                })
                .collect()
        })
        .collect();
    let mut terms = Vec::with_capacity(paths);
    let mut path = vec![0usize; n];
    for code in 0..paths {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % m;
            c /= m;
        }
        let mut lp = theta.initial.delta[path[0]].ln() + log_emis[0][path[0]];
        for k in 1..n {
            lp += log_gamma[k - 1][path[k - 1] * m + path[k]] + log_emis[k][path[k]];
        }
        terms.push(lp);
    }
    Ok(log_sum_exp(&terms))
}

fn gamma_log_density<T: Scalar>(x: T, shape: T, rate: T) -> T {
    shape * rate.ln() - ln_gamma(shape) + (shape - T::one()) * x.ln() - rate * x
}

/// Scaled inverse-chi-squared log-density in its standard normalized form.
fn scaled_inv_chi2_log_density<T: Scalar>(x: T, dof: T, scale: T) -> T {
    let half = dof * T::lit(0.5);
    half * (half * scale).ln() - ln_gamma(half) - (half + T::one()) * x.ln() - half * scale / x
}

/// Sum of the prior log-densities, normalizing constants included.
///
/// Returns `-inf` for a nonpositive mean or variance; NaN inputs are an error.
pub fn log_prior<T: Scalar>(theta: &ThetaParams<T>, hyper: &HyperParams<T>) -> Result<T> {
    dims_check(theta)?;
    hyper.check(theta.n_states())?;
    let flat = theta.to_flat();
    if flat.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN parameter in log_prior".into()));
    }
    let means = &theta.emission.means;
    let vars = &theta.emission.variances;
    if means.iter().chain(vars).any(|&v| !(v > T::zero())) {
        return Ok(T::neg_infinity());
    }
    let mut lp = T::zero();
    for &mu in means {
        lp += gamma_log_density(mu, hyper.mu0, hyper.nu0);
    }
    for &v in vars {
        lp += scaled_inv_chi2_log_density(v, hyper.kappa0, hyper.sigma02);
    }
    let norm_const = -T::lit(0.5) * (T::TAU() * hyper.sigma2_beta).ln();
    for b in theta.coefficients.off_diagonal() {
        let d = b - hyper.mu_beta;
        lp += norm_const - d * d / (hyper.sigma2_beta + hyper.sigma2_beta);
    }
    let alpha_sum: T = hyper.alpha.iter().copied().sum();
    lp += ln_gamma(alpha_sum);
    for (&a, &d) in hyper.alpha.iter().zip(&theta.initial.delta) {
        lp -= ln_gamma(a);
        if a != T::one() {
            lp += (a - T::one()) * d.ln();
        }
    }
    Ok(lp)
}

/// Adds the prior gradient (with respect to the natural parameters) to `grad`.
fn add_prior_gradient<T: Scalar>(theta: &ThetaParams<T>, hyper: &HyperParams<T>, grad: &mut NaturalGradient<T>) {
    let m = theta.n_states();
    let nc = theta.config.n_coefficients();
    for (g, &mu) in grad.means.iter_mut().zip(&theta.emission.means) {
        *g += (hyper.mu0 - T::one()) / mu - hyper.nu0;
    }
    let half = hyper.kappa0 * T::lit(0.5);
    for (g, &v) in grad.log_variances.iter_mut().zip(&theta.emission.variances) {
        *g += -(half + T::one()) + half * hyper.sigma02 / v;
    }
    let coef = theta.coefficients.as_slice();
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            for c in 0..nc {
                let idx = (i * m + j) * nc + c;
                grad.beta[idx] -= (coef[idx] - hyper.mu_beta) / hyper.sigma2_beta;
            }
        }
    }
    for ((g, &a), &d) in grad.delta.iter_mut().zip(&hyper.alpha).zip(&theta.initial.delta) {
        if a != T::one() {
            *g += (a - T::one()) / d;
        }
    }
}

/// `log L(y | theta) + log p(theta)`; `-inf` outside the support.
pub fn log_posterior<T: Scalar>(obs: &ObservationSeries<T>, theta: &ThetaParams<T>, hyper: &HyperParams<T>) -> Result<T> {
    let lp = log_prior(theta, hyper)?;
    if lp == T::neg_infinity() {
        return Ok(lp);
    }
    Ok(forward_log_likelihood(obs, theta)? + lp)
}

/// Log posterior density on the unconstrained scale, with cached transition
/// covariates for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Posterior<T> {
    obs: ObservationSeries<T>,
    config: ModelConfig,
    hyper: HyperParams<T>,
    layout: Layout,
    schedule: Schedule<T>,
}

impl<T: Scalar> Posterior<T> {
    pub fn new(obs: ObservationSeries<T>, config: ModelConfig, hyper: HyperParams<T>) -> Result<Self> {
        obs.check()?;
        hyper.check(config.n_states)?;
        let schedule = Schedule::new(&config, &obs);
        let layout = Layout::new(&config);
        Ok(Self {
            obs,
            config,
            hyper,
            layout,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn observations(&self) -> &ObservationSeries<T> {
        &self.obs
    }

    /// `log p(to_constrained(z) | y) + log |J|(z)`.
    pub fn log_density(&self, z: &[T]) -> Result<T> {
        let (theta, log_jac) = to_constrained(z, &self.config)?;
        let lp = log_prior(&theta, &self.hyper)?;
        if lp == T::neg_infinity() {
            return Ok(lp);
        }
        let s = sweep(&self.obs, &theta, &self.schedule, false, false)?;
        Ok(s.loglik + lp + log_jac)
    }

    /// Log density and its gradient with respect to `z`, written into `grad`.
    pub fn log_density_gradient(&self, z: &[T], grad: &mut [T]) -> Result<T> {
        if grad.len() != self.dim() {
            return Err(Error::Dimension {
                what: "gradient buffer",
                expected: self.dim(),
                actual: grad.len(),
            });
        }
        let (theta, log_jac) = to_constrained(z, &self.config)?;
        let lp = log_prior(&theta, &self.hyper)?;
        let (loglik, natural) = log_likelihood_gradient_with(&self.obs, &theta, &self.schedule)?;
        let total = loglik + lp + log_jac;
        let Some(mut natural) = natural.filter(|_| total.is_finite()) else {
            return Ok(T::neg_infinity());
        };
        add_prior_gradient(&theta, &self.hyper, &mut natural);
        pullback_to_unconstrained(z, &self.layout, &natural, grad);
        if let Some(coordinate) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { coordinate });
        }
        Ok(total)
    }
}

/// Gradient of the unconstrained log posterior (including the log-Jacobian)
/// at `z`.
pub fn log_posterior_gradient<T: Scalar>(
    obs: &ObservationSeries<T>,
    config: &ModelConfig,
    z: &[T],
    hyper: &HyperParams<T>,
) -> Result<Vec<T>> {
    let post = Posterior::new(obs.clone(), config.clone(), hyper.clone())?;
    let mut grad = vec![T::zero(); post.dim()];
    let value = post.log_density_gradient(z, &mut grad)?;
    if !value.is_finite() {
        return Err(Error::Domain("log posterior is not finite at z".into()));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::transform::{to_unconstrained, unconstrained_dim};
    use crate::model::{CircadianCoefficients, EmissionParams, InitialDistribution};
    use crate::simulate::{builtin_scenario, simulate_series};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scenario(id: u8) -> ThetaParams<f64> {
        builtin_scenario(id).unwrap().theta_true
    }

    fn random_theta(rng: &mut ChaCha8Rng, m: usize) -> ThetaParams<f64> {
        let config = ModelConfig::new(m, vec![1.0 / 24.0], 5).unwrap();
        let mut means = Vec::new();
        let mut acc = 0.0;
        for _ in 0..m {
            acc += rng.gen_range(0.5..4.0);
            means.push(acc);
        }
        let variances = (0..m).map(|_| rng.gen_range(0.2..2.0)).collect();
        let nb = m * (m - 1) * 3;
        let beta: Vec<f64> = (0..nb).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let tot: f64 = w.iter().sum();
        ThetaParams {
            config,
            emission: EmissionParams { means, variances },
            coefficients: CircadianCoefficients::from_off_diagonal(m, 3, &beta).unwrap(),
            initial: InitialDistribution {
                delta: w.iter().map(|x| x / tot).collect(),
            },
        }
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize, theta: &ThetaParams<f64>) -> ObservationSeries<f64> {
        let hi = theta.emission.means.last().unwrap() + 2.0;
        let values = (0..n).map(|_| rng.gen_range(-1.0..hi)).collect();
        let missing = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        ObservationSeries {
            values,
            missing,
            epoch_minutes: 60 * rng.gen_range(1..4),
            start_hour: rng.gen_range(0.0..24.0),
        }
    }

    #[test]
    fn single_step_degenerate_initial() {
        let mut theta = scenario(1);
        theta.initial.delta = vec![1.0, 0.0, 0.0];
        let obs = ObservationSeries::complete(vec![2.0], 5);
        let ll = forward_log_likelihood(&obs, &theta).unwrap();
        let expected = crate::model::log_emission_density(2.0, 0, &theta.emission).unwrap();
        assert_abs_diff_eq!(ll, expected, epsilon = 1e-14);
    }

    #[test]
    fn five_steps_against_enumeration() {
        let theta = scenario(1);
        let obs = ObservationSeries::complete(vec![2.1, 5.4, 6.3, 10.2, 1.7], 5);
        let f = forward_log_likelihood(&obs, &theta).unwrap();
        let b = brute_force_log_likelihood(&obs, &theta).unwrap();
        assert_abs_diff_eq!(f, b, epsilon = 1e-10);
    }

    #[test]
    fn all_missing_is_zero() {
        let theta = scenario(1);
        let obs = ObservationSeries {
            values: vec![f64::NAN; 3],
            missing: vec![true; 3],
            epoch_minutes: 5,
            start_hour: 0.0,
        };
        assert_abs_diff_eq!(forward_log_likelihood(&obs, &theta).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn nan_observation_is_input_error() {
        let theta = scenario(1);
        let obs = ObservationSeries::complete(vec![1.0, f64::NAN], 5);
        assert!(matches!(forward_log_likelihood(&obs, &theta), Err(Error::Input(_))));
    }

    #[test]
    fn symmetric_evidence_keeps_uniform_filter() {
        let mut theta = scenario(1);
        theta.emission.means = vec![4.0, 4.0, 4.0];
        let obs = ObservationSeries::complete(vec![3.3], 5);
        let f = filtered_probabilities(&obs, &theta).unwrap();
        for p in &f.probs[0] {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn high_activity_evidence_favours_top_state() {
        let theta = scenario(1);
        let obs = ObservationSeries::complete(vec![10.8, 11.3, 10.9, 11.1, 11.4, 10.7], 5);
        let f = filtered_probabilities(&obs, &theta).unwrap();
        let last = f.probs.last().unwrap();
        let argmax = (0..3).max_by(|&a, &b| last[a].partial_cmp(&last[b]).unwrap()).unwrap();
        assert_eq!(argmax, 2);
        // exhaustive posterior of the final state
        let mut lp = [f64::NEG_INFINITY; 3];
        for s in 0..3 {
            let mut terms = Vec::new();
            for code in 0..3usize.pow(6) {
                let mut c = code;
                let path: Vec<usize> = (0..6).map(|_| { let v = c % 3; c /= 3; v }).collect();
                if path[5] != s { continue; }
                let mut l = theta.initial.delta[path[0]].ln()
                    + gaussian_log_density(obs.values[0], theta.emission.means[path[0]], theta.emission.variances[path[0]]);
                for k in 1..6 {
                    let g = transition_matrix_at(&theta, obs.t_hours(k - 1)).unwrap();
                    l += g.get(path[k - 1], path[k]).ln()
                        + gaussian_log_density(obs.values[k], theta.emission.means[path[k]], theta.emission.variances[path[k]]);
                }
                terms.push(l);
            }
            lp[s] = log_sum_exp(&terms);
        }
        let z = log_sum_exp(&lp);
        for s in 0..3 {
            assert_abs_diff_eq!(last[s], (lp[s] - z).exp(), epsilon = 1e-10);
        }
    }

    #[test]
    fn brute_force_guard() {
        let theta = scenario(1);
        let obs = ObservationSeries::complete(vec![1.0; 13], 5);
        assert!(matches!(brute_force_log_likelihood(&obs, &theta), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn two_state_hand_expansion() {
        let config = ModelConfig::new(2, vec![1.0 / 24.0], 60).unwrap();
        let mut coefficients = CircadianCoefficients::zeros(2, 3);
        coefficients.get_mut(0, 1)[0] = -1.0;
        coefficients.get_mut(1, 0)[0] = 0.5;
        let theta = ThetaParams {
            config,
            emission: EmissionParams {
                means: vec![1.0, 3.0],
                variances: vec![0.5, 1.5],
            },
            coefficients,
            initial: InitialDistribution { delta: vec![0.3, 0.7] },
        };
        let obs = ObservationSeries::complete(vec![1.4, 2.6], 60);
        // at t = 0 covariates are (1, 1, 0) and only intercepts are nonzero
        let g01 = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        let g10 = 0.5f64.exp() / (1.0 + 0.5f64.exp());
        let gam = [[1.0 - g01, g01], [g10, 1.0 - g10]];
        let f = |y: f64, s: usize| gaussian_log_density(y, theta.emission.means[s], theta.emission.variances[s]).exp();
        let mut total = 0.0;
        for s1 in 0..2 {
            for s2 in 0..2 {
                total += theta.initial.delta[s1] * f(1.4, s1) * gam[s1][s2] * f(2.6, s2);
            }
        }
        let forward = forward_log_likelihood(&obs, &theta).unwrap();
        assert_abs_diff_eq!(forward, total.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(brute_force_log_likelihood(&obs, &theta).unwrap(), total.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_step_brute_force_equals_forward() {
        let theta = scenario(3);
        let obs = ObservationSeries::complete(vec![5.5], 5);
        assert_eq!(
            brute_force_log_likelihood(&obs, &theta).unwrap(),
            forward_log_likelihood(&obs, &theta).unwrap()
        );
    }

    #[test]
    fn seven_steps_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let theta = random_theta(&mut rng, 3);
            let obs = random_obs(&mut rng, 7, &theta);
            let f = forward_log_likelihood(&obs, &theta).unwrap();
            let b = brute_force_log_likelihood(&obs, &theta).unwrap();
            assert_abs_diff_eq!(f, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn normalizers_reconstruct_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut theta = random_theta(&mut rng, 3);
            // keep every density below 1 so each normalizer is a probability
            theta.emission.variances.iter_mut().for_each(|v| *v = v.max(0.2) + 1.0 / std::f64::consts::TAU);
            let obs = random_obs(&mut rng, 40, &theta);
            let f = filtered_probabilities(&obs, &theta).unwrap();
            let ll = forward_log_likelihood(&obs, &theta).unwrap();
            let sum: f64 = f.log_norm_constants.iter().sum();
            assert_abs_diff_eq!(sum, ll, epsilon = 1e-10);
            for c in &f.log_norm_constants {
                assert!(*c <= 1e-15 && c.exp() > 0.0);
            }
            for row in &f.probs {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn missing_epoch_marginalizes_out() {
        // a missing epoch contributes the same as summing the joint over every
        // value of that epoch's state with emission 1
        let theta = scenario(2);
        let mut obs = ObservationSeries::complete(vec![2.2, 0.0, 6.1, 5.8, 11.5], 5);
        obs.missing[1] = true;
        let f = forward_log_likelihood(&obs, &theta).unwrap();
        let b = brute_force_log_likelihood(&obs, &theta).unwrap();
        assert_abs_diff_eq!(f, b, epsilon = 1e-12);
        // and equals integrating the emission density numerically over y_1
        let mut grid = Vec::new();
        let h: f64 = 0.01;
        let mut y = -10.0;
        while y < 25.0 {
            let mut o = obs.clone();
            o.missing[1] = false;
            o.values[1] = y;
            grid.push(forward_log_likelihood(&o, &theta).unwrap() + h.ln());
            y += h;
        }
        assert_abs_diff_eq!(log_sum_exp(&grid), f, epsilon = 1e-6);
    }

    #[test]
    fn periodic_cache_matches_direct_evaluation() {
        let theta = scenario(1);
        let sim = simulate_series(&theta, 700, 5, 3.5, 3).unwrap();
        let cached = forward_log_likelihood(&sim.observations, &theta).unwrap();
        let mut config = theta.config.clone();
        config.omegas = vec![1.0 / 24.0 + 1e-9];
        // non-periodic configuration forces one matrix per step
        let mut t2 = theta.clone();
        t2.config = config;
        let direct = forward_log_likelihood(&sim.observations, &t2).unwrap();
        assert_abs_diff_eq!(cached, direct, epsilon = 1e-4);
        let schedule = Schedule::new(&t2.config, &sim.observations);
        assert_eq!(schedule.n_slots(), 699);
    }

    #[test]
    fn prior_examples() {
        let hyper = HyperParams::<f64>::weakly_informative(3);
        let mut theta = scenario(1);
        theta.coefficients = CircadianCoefficients::zeros(3, 3);
        theta.emission.means = vec![1.0, 1.0 + 1e-9, 1.0 + 2e-9];
        let lp = log_prior(&theta, &hyper).unwrap();
        let mean_part = -3.0;
        let var_part: f64 = theta
            .emission
            .variances
            .iter()
            .map(|&v| scaled_inv_chi2_log_density(v, 2.0, 0.5))
            .sum();
        let beta_part = 18.0 * -0.5 * (std::f64::consts::TAU * 10.0).ln();
        let dir_part = 2.0f64.ln();
        assert_abs_diff_eq!(lp, mean_part + var_part + beta_part + dir_part, epsilon = 1e-8);
        // Inv-chi2(2, 0.5) is Inv-Gamma(1, 0.5): log(0.5) - 2 log v - 0.5 / v
        assert_abs_diff_eq!(scaled_inv_chi2_log_density(0.5, 2.0, 0.5), 0.5f64.ln() - 2.0 * 0.5f64.ln() - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn prior_boundaries() {
        let hyper = HyperParams::<f64>::weakly_informative(3);
        let mut theta = scenario(1);
        theta.emission.variances[1] = 0.0;
        assert_eq!(log_prior(&theta, &hyper).unwrap(), f64::NEG_INFINITY);
        theta.emission.variances[1] = f64::NAN;
        assert!(log_prior(&theta, &hyper).is_err());
    }

    #[test]
    fn posterior_prefers_truth() {
        let theta = scenario(1);
        let sim = simulate_series(&theta, 1440, 5, 0.0, 19).unwrap();
        let hyper = HyperParams::weakly_informative(3);
        let truth = log_posterior(&sim.observations, &theta, &hyper).unwrap();
        let mut off = theta.clone();
        off.emission.means[0] = 4.0;
        let perturbed = log_posterior(&sim.observations, &off, &hyper).unwrap();
        assert!(truth > perturbed);
    }

    #[test]
    fn posterior_is_likelihood_plus_prior() {
        let theta = scenario(2);
        let obs = ObservationSeries::complete(vec![2.0, 6.0, 11.0, 5.0], 5);
        let hyper = HyperParams::weakly_informative(3);
        let lp = log_posterior(&obs, &theta, &hyper).unwrap();
        let parts = forward_log_likelihood(&obs, &theta).unwrap() + log_prior(&theta, &hyper).unwrap();
        assert_abs_diff_eq!(lp, parts, epsilon = 1e-12);
    }

    fn finite_difference(post: &Posterior<f64>, z: &[f64], dir: &[f64], h: f64) -> f64 {
        let zp: Vec<f64> = z.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let zm: Vec<f64> = z.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        (post.log_density(&zp).unwrap() - post.log_density(&zm).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_coordinatewise_differences() {
        let theta = scenario(3);
        let sim = simulate_series(&theta, 120, 5, 0.0, 5).unwrap();
        let mut obs = sim.observations;
        obs.missing[10] = true;
        obs.missing[11] = true;
        let post = Posterior::new(obs, theta.config.clone(), HyperParams::weakly_informative(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = to_unconstrained(&theta).unwrap();
        z.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        let mut grad = vec![0.0; post.dim()];
        post.log_density_gradient(&z, &mut grad).unwrap();
        for k in 0..post.dim() {
            let mut e = vec![0.0; post.dim()];
            e[k] = 1.0;
            let fd = finite_difference(&post, &z, &e, 1e-5);
            let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-5, "coordinate {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn gradient_of_prior_only_when_unobserved() {
        let config = ModelConfig::default();
        let obs = ObservationSeries {
            values: vec![0.0],
            missing: vec![true],
            epoch_minutes: 5,
            start_hour: 0.0,
        };
        let hyper = HyperParams::weakly_informative(3);
        let post = Posterior::new(obs.clone(), config.clone(), hyper.clone()).unwrap();
        let z: Vec<f64> = (0..unconstrained_dim(&config)).map(|i| (i as f64 * 0.3).cos()).collect();
        let grad = log_posterior_gradient(&obs, &config, &z, &hyper).unwrap();
        // prior + Jacobian alone, differentiated numerically
        let prior_only = |z: &[f64]| {
            let (t, lj) = to_constrained(z, &config).unwrap();
            log_prior(&t, &hyper).unwrap() + lj
        };
        for k in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += 1e-5;
            zm[k] -= 1e-5;
            let fd = (prior_only(&zp) - prior_only(&zm)) / 2e-5;
            assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-6 * fd.abs().max(1.0));
        }
        assert_eq!(post.log_density(&z).unwrap(), prior_only(&z));
    }

    #[test]
    fn mirrored_two_state_gradient() {
        // states are mirror images around 5, so reflecting the data swaps
        // the roles of the two states in the gradient
        let config = ModelConfig::new(2, vec![1.0 / 24.0], 60).unwrap();
        let mut coefficients = CircadianCoefficients::zeros(2, 3);
        coefficients.get_mut(0, 1)[0] = -1.2;
        coefficients.get_mut(1, 0)[0] = -1.2;
        let theta = ThetaParams {
            config: config.clone(),
            emission: EmissionParams {
                means: vec![3.0, 7.0],
                variances: vec![1.3, 1.3],
            },
            coefficients,
            initial: InitialDistribution { delta: vec![0.5, 0.5] },
        };
        let obs = ObservationSeries::complete(vec![2.5, 7.5, 3.2, 6.8, 5.0], 60);
        let mirrored = ObservationSeries::complete(obs.values.iter().map(|y| 10.0 - y).collect(), 60);
        let (_, g) = log_likelihood_gradient(&obs, &theta).unwrap();
        let (_, gm) = log_likelihood_gradient(&mirrored, &theta).unwrap();
        let (g, gm) = (g.unwrap(), gm.unwrap());
        assert_abs_diff_eq!(g.log_variances[0], gm.log_variances[1], epsilon = 1e-12);
        assert_abs_diff_eq!(g.means[0], -gm.means[1], epsilon = 1e-12);
        // intercepts of 0 -> 1 and 1 -> 0 sit at flat offsets 3 and 6
        assert_abs_diff_eq!(g.beta[3], gm.beta[6], epsilon = 1e-12);
        assert_abs_diff_eq!(g.delta[0], gm.delta[1], epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn forward_equals_enumeration(seed in any::<u64>(), m in 2usize..=3, n in 1usize..=7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_theta(&mut rng, m);
            let obs = random_obs(&mut rng, n, &theta);
            let f = forward_log_likelihood(&obs, &theta).unwrap();
            let b = brute_force_log_likelihood(&obs, &theta).unwrap();
            prop_assert!((f - b).abs() < 1e-10, "{f} vs {b}");
        }

        #[test]
        fn label_permutation_symmetry(seed in any::<u64>(), perm_code in 0usize..6) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_theta(&mut rng, 3);
            let obs = random_obs(&mut rng, 30, &theta);
            let permuted = theta.permute_states(&perms[perm_code]);
            let a = forward_log_likelihood(&obs, &theta).unwrap();
            let b = forward_log_likelihood(&obs, &permuted).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_precision_forward() {
        let theta = scenario(1);
        let obs = ObservationSeries::complete(vec![2.1, 5.4, 6.3, 10.2, 1.7], 5);
        let t32: ThetaParams<f32> = serde_roundtrip(&theta);
        let obs32 = ObservationSeries::complete(obs.values.iter().map(|&v| v as f32).collect(), 5);
        let a = forward_log_likelihood(&obs32, &t32).unwrap();
        let b = forward_log_likelihood(&obs, &theta).unwrap();
        assert!((a as f64 - b).abs() < 1e-4);
    }

    fn serde_roundtrip(theta: &ThetaParams<f64>) -> ThetaParams<f32> {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let beta: Vec<f32> = theta.coefficients.off_diagonal().map(|x| x as f32).collect();
        ThetaParams {
            config: theta.config.clone(),
            emission: EmissionParams {
                means: narrow(&theta.emission.means),
                variances: narrow(&theta.emission.variances),
            },
            coefficients: CircadianCoefficients::from_off_diagonal(3, 3, &beta).unwrap(),
            initial: InitialDistribution {
                delta: narrow(&theta.initial.delta),
            },
        }
    }
}
