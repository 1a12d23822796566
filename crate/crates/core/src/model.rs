//! Model types, Gaussian emissions and harmonic transition matrices.
//!
//! States are indexed from 0 in the API; state 0 is the low-activity state
//! once means are ordered. Clock time is measured in hours, with epoch `k`
//! of a series starting at `start_hour + k * epoch_minutes / 60`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const SIMPLEX_TOL: f64 = 1e-12;

/// Structural dimensions of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of hidden states.
    #[serde(rename = "m")]
    pub n_states: usize,
    /// Harmonic frequencies in cycles per hour; their count is the number of
    /// cosine/sine pairs.
    pub omegas: Vec<f64>,
    pub epoch_minutes: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_states: 3,
            omegas: vec![1.0 / 24.0],
            epoch_minutes: 5,
        }
    }
}

impl ModelConfig {
    pub fn new(n_states: usize, omegas: Vec<f64>, epoch_minutes: u32) -> Result<Self> {
        let config = Self {
            n_states,
            omegas,
            epoch_minutes,
        };
        let violations = config.violations();
        if violations.is_empty() {
            Ok(config)
        } else {
            Err(Error::InvalidParams(violations))
        }
    }

    /// Number of cosine/sine pairs.
    pub fn n_harmonics(&self) -> usize {
        self.omegas.len()
    }

    /// Length of each coefficient vector: intercept plus one cos/sin pair per harmonic.
    pub fn n_coefficients(&self) -> usize {
        1 + 2 * self.n_harmonics()
    }

    /// Epochs in one 24-hour cycle.
    pub fn epochs_per_day(&self) -> usize {
        (1440 / self.epoch_minutes.max(1)) as usize
    }

    /// True when every harmonic completes a whole number of cycles per day,
    /// so that transition matrices repeat with a 24-hour period.
    pub fn is_daily_periodic(&self) -> bool {
        self.epoch_minutes > 0
            && 1440 % self.epoch_minutes == 0
            && self.omegas.iter().all(|w| {
                let cycles = w * 24.0;
                (cycles - cycles.round()).abs() < 1e-12
            })
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_states < 2 {
            out.push(Violation::new("m", "state count must be at least 2"));
        }
        if self.omegas.is_empty() {
            out.push(Violation::new("omegas", "at least one harmonic is required"));
        }
        if self.omegas.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            out.push(Violation::new("omegas", "frequencies must be positive"));
        }
        if self.epoch_minutes == 0 || 1440 % self.epoch_minutes != 0 {
            out.push(Violation::new("epoch_minutes", "epoch length must divide 1440"));
        }
        out
    }
}

/// A single failed invariant, as reported by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: &str, message: &str) -> Self {
        Self {
            field: field.to_owned(),
            message: message.to_owned(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams<T> {
    pub means: Vec<T>,
    pub variances: Vec<T>,
}

/// Circadian coefficient tensor `beta[i][j][c]`, stored row-major.
///
/// The diagonal blocks `beta[i][i]` are structurally zero: only off-diagonal
/// entries can be written, so the linear predictor of staying in a state is
/// always 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Vec<Vec<Vec<T>>>",
    into = "Vec<Vec<Vec<T>>>",
    bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct CircadianCoefficients<T> {
    n_states: usize,
    n_coefficients: usize,
    data: Vec<T>,
}

impl<T: Scalar> CircadianCoefficients<T> {
    pub fn zeros(n_states: usize, n_coefficients: usize) -> Self {
        Self {
            n_states,
            n_coefficients,
            data: vec![T::zero(); n_states * n_states * n_coefficients],
        }
    }

    /// Builds the tensor from off-diagonal coefficient vectors listed in
    /// row-major order (`(0,1), (0,2), ..., (1,0), (1,2), ...`).
    pub fn from_off_diagonal(n_states: usize, n_coefficients: usize, values: &[T]) -> Result<Self> {
        let expected = n_states * (n_states - 1) * n_coefficients;
        if values.len() != expected {
            return Err(Error::Dimension {
                what: "off-diagonal coefficients",
                expected,
                actual: values.len(),
            });
        }
        let mut out = Self::zeros(n_states, n_coefficients);
        out.off_diagonal_mut()
            .zip(values.iter())
            .for_each(|(slot, &v)| *slot = v);
        Ok(out)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_coefficients(&self) -> usize {
        self.n_coefficients
    }

    /// Coefficient vector for the transition `from -> to`.
    #[inline]
    pub fn get(&self, from: usize, to: usize) -> &[T] {
        let start = (from * self.n_states + to) * self.n_coefficients;
        &self.data[start..start + self.n_coefficients]
    }

    /// Mutable access to an off-diagonal coefficient vector.
    ///
    /// # Panics
    /// If `from == to`.
    pub fn get_mut(&mut self, from: usize, to: usize) -> &mut [T] {
        assert_ne!(from, to, "diagonal circadian coefficients are pinned to zero");
        let start = (from * self.n_states + to) * self.n_coefficients;
        &mut self.data[start..start + self.n_coefficients]
    }

    /// Off-diagonal entries in row-major order.
    pub fn off_diagonal(&self) -> impl Iterator<Item = T> + '_ {
        let m = self.n_states;
        (0..m)
            .flat_map(move |i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .flat_map(move |(i, j)| self.get(i, j).iter().copied())
    }

    fn off_diagonal_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        let m = self.n_states;
        let nc = self.n_coefficients;
        self.data
            .chunks_mut(nc)
            .enumerate()
            .filter(move |(block, _)| block / m != block % m)
            .flat_map(|(_, chunk)| chunk.iter_mut())
    }

    /// Full tensor, diagonal zeros included.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> From<CircadianCoefficients<T>> for Vec<Vec<Vec<T>>> {
    fn from(c: CircadianCoefficients<T>) -> Self {
        (0..c.n_states)
            .map(|i| (0..c.n_states).map(|j| c.get(i, j).to_vec()).collect())
            .collect()
    }
}

impl<T: Scalar> TryFrom<Vec<Vec<Vec<T>>>> for CircadianCoefficients<T> {
    type Error = Error;

    fn try_from(nested: Vec<Vec<Vec<T>>>) -> Result<Self> {
        let m = nested.len();
        let nc = nested
            .first()
            .and_then(|row| row.first())
            .map(|v| v.len())
            .unwrap_or(0);
        let mut out = Self::zeros(m, nc);
        for (i, row) in nested.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dimension {
                    what: "coefficient row",
                    expected: m,
                    actual: row.len(),
                });
            }
            for (j, coef) in row.iter().enumerate() {
                if coef.len() != nc {
                    return Err(Error::Dimension {
                        what: "coefficient vector",
                        expected: nc,
                        actual: coef.len(),
                    });
                }
                if i == j {
                    if coef.iter().any(|v| *v != T::zero()) {
                        return Err(Error::Domain(format!(
                            "diagonal coefficients beta[{i}][{i}] must be zero"
                        )));
                    }
                } else {
                    out.get_mut(i, j).copy_from_slice(coef);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution<T> {
    pub delta: Vec<T>,
}

impl<T: Scalar> InitialDistribution<T> {
    pub fn uniform(n_states: usize) -> Self {
        Self {
            delta: vec![T::one() / T::lit(n_states as f64); n_states],
        }
    }
}

/// Complete parameter bundle: emissions, circadian coefficients and initial
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ThetaParams<T> {
    pub config: ModelConfig,
    pub emission: EmissionParams<T>,
    pub coefficients: CircadianCoefficients<T>,
    pub initial: InitialDistribution<T>,
}

impl<T: Scalar> ThetaParams<T> {
    pub fn n_states(&self) -> usize {
        self.config.n_states
    }

    /// Returns `Ok(())` when [`validate`] reports no violations.
    pub fn check(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }

    /// Relabels states so that new state `k` is old state `perm[k]`.
    pub fn permute_states(&self, perm: &[usize]) -> Self {
        let m = self.n_states();
        assert_eq!(perm.len(), m);
        let pick = |v: &[T]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        let mut coefficients = CircadianCoefficients::zeros(m, self.coefficients.n_coefficients());
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    coefficients
                        .get_mut(i, j)
                        .copy_from_slice(self.coefficients.get(perm[i], perm[j]));
                }
            }
        }
        Self {
            config: self.config.clone(),
            emission: EmissionParams {
                means: pick(&self.emission.means),
                variances: pick(&self.emission.variances),
            },
            coefficients,
            initial: InitialDistribution {
                delta: pick(&self.initial.delta),
            },
        }
    }

    /// Relabels states by ascending mean.
    pub fn sorted_by_mean(&self) -> Self {
        let mut perm: Vec<usize> = (0..self.n_states()).collect();
        let means = &self.emission.means;
        perm.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap_or(std::cmp::Ordering::Equal));
        self.permute_states(&perm)
    }

    /// Flat parameter vector matching [`parameter_names`]: means, variances,
    /// off-diagonal coefficients, initial probabilities.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.emission.means);
        out.extend_from_slice(&self.emission.variances);
        out.extend(self.coefficients.off_diagonal());
        out.extend_from_slice(&self.initial.delta);
        out
    }
}

/// Names of the entries of [`ThetaParams::to_flat`], with 1-based state labels.
pub fn parameter_names(config: &ModelConfig) -> Vec<String> {
    let m = config.n_states;
    let l = config.n_harmonics();
    let mut out: Vec<String> = (1..=m).map(|i| format!("mu[{i}]")).collect();
    out.extend((1..=m).map(|i| format!("sigma2[{i}]")));
    for i in 1..=m {
        for j in (1..=m).filter(|&j| j != i) {
            out.push(format!("beta0[{i},{j}]"));
            for h in 1..=l {
                let suffix = if l == 1 { String::new() } else { format!(";{h}") };
                out.push(format!("beta1[{i},{j}{suffix}]"));
                out.push(format!("beta2[{i},{j}{suffix}]"));
            }
        }
    }
    out.extend((1..=m).map(|i| format!("delta[{i}]")));
    out
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams<T> {
    /// Gamma shape for state means.
    pub mu0: T,
    /// Gamma rate for state means.
    pub nu0: T,
    /// Scaled inverse-chi-squared degrees of freedom for variances.
    pub kappa0: T,
    /// Scaled inverse-chi-squared scale for variances.
    pub sigma02: T,
    pub mu_beta: T,
    /// Normal prior variance for circadian coefficients.
    pub sigma2_beta: T,
    /// Dirichlet concentration for the initial distribution.
    pub alpha: Vec<T>,
}

impl<T: Scalar> HyperParams<T> {
    /// Gamma(1, 1) means, Inv-chi2(2, 0.5) variances, N(0, 10) coefficients
    /// and a flat Dirichlet.
    pub fn weakly_informative(n_states: usize) -> Self {
        Self {
            mu0: T::one(),
            nu0: T::one(),
            kappa0: T::lit(2.0),
            sigma02: T::lit(0.5),
            mu_beta: T::zero(),
            sigma2_beta: T::lit(10.0),
            alpha: vec![T::one(); n_states],
        }
    }

    pub fn check(&self, n_states: usize) -> Result<()> {
        let positive = [
            ("mu0", self.mu0),
            ("nu0", self.nu0),
            ("kappa0", self.kappa0),
            ("sigma02", self.sigma02),
            ("sigma2_beta", self.sigma2_beta),
        ];
        for (name, v) in positive {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::Argument(format!("hyperparameter {name} must be positive")));
            }
        }
        if !self.mu_beta.is_finite() {
            return Err(Error::Argument("hyperparameter mu_beta must be finite".into()));
        }
        if self.alpha.len() != n_states {
            return Err(Error::Dimension {
                what: "alpha",
                expected: n_states,
                actual: self.alpha.len(),
            });
        }
        if self.alpha.iter().any(|a| !(*a > T::zero())) {
            return Err(Error::Argument("Dirichlet concentrations must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic transition matrix evaluated at a clock time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix<T> {
    pub t_hours: T,
    pub n_states: usize,
    /// Row-major `n_states x n_states` probabilities.
    pub probs: Vec<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    #[inline]
    pub fn get(&self, from: usize, to: usize) -> T {
        self.probs[from * self.n_states + to]
    }

    pub fn row(&self, from: usize) -> &[T] {
        &self.probs[from * self.n_states..(from + 1) * self.n_states]
    }
}

/// Gaussian log-density of `y` under `state`.
pub fn log_emission_density<T: Scalar>(y: T, state: usize, emission: &EmissionParams<T>) -> Result<T> {
    let n_states = emission.means.len();
    if state >= n_states || state >= emission.variances.len() {
        return Err(Error::StateIndex { index: state, n_states });
    }
    Ok(gaussian_log_density(y, emission.means[state], emission.variances[state]))
}

#[inline]
pub(crate) fn gaussian_log_density<T: Scalar>(y: T, mean: T, variance: T) -> T {
    let d = y - mean;
    -T::lit(0.5) * (T::TAU() * variance).ln() - d * d / (variance + variance)
}

/// `[1, cos(2 pi w_1 t), sin(2 pi w_1 t), ..., cos(2 pi w_L t), sin(2 pi w_L t)]`.
pub fn harmonic_covariates<T: Scalar>(t_hours: T, config: &ModelConfig) -> Vec<T> {
    let mut out = Vec::with_capacity(config.n_coefficients());
    out.push(T::one());
    for &w in &config.omegas {
        let angle = T::TAU() * T::lit(w) * t_hours;
        let (s, c) = angle.sin_cos();
        out.push(c);
        out.push(s);
    }
    out
}

/// Softmax rows of the linear predictor `eta[i][j] = beta[i][j] . x` into
/// `out` (row-major, `m x m`). Returns the first non-finite predictor, if any.
#[inline]
pub(crate) fn fill_transition<T: Scalar>(
    coefficients: &CircadianCoefficients<T>,
    covariates: &[T],
    out: &mut [T],
) -> std::result::Result<(), (usize, usize)> {
    let m = coefficients.n_states();
    for i in 0..m {
        let row = &mut out[i * m..(i + 1) * m];
        let mut hi = T::neg_infinity();
        for (j, slot) in row.iter_mut().enumerate() {
            let eta = if i == j {
                T::zero()
            } else {
                coefficients
                    .get(i, j)
                    .iter()
                    .zip(covariates)
                    .fold(T::zero(), |acc, (&b, &x)| acc + b * x)
            };
            if !eta.is_finite() {
                return Err((i, j));
            }
            *slot = eta;
            hi = hi.max(eta);
        }
        let mut total = T::zero();
        for slot in row.iter_mut() {
            *slot = (*slot - hi).exp();
            total += *slot;
        }
        for slot in row.iter_mut() {
            *slot /= total;
        }
    }
    Ok(())
}

/// Transition matrix at clock time `t_hours`.
pub fn transition_matrix_at<T: Scalar>(theta: &ThetaParams<T>, t_hours: T) -> Result<TransitionMatrix<T>> {
    let m = theta.n_states();
    let x = harmonic_covariates(t_hours, &theta.config);
    if theta.coefficients.n_states() != m || theta.coefficients.n_coefficients() != x.len() {
        return Err(Error::Dimension {
            what: "circadian coefficients",
            expected: m * m * x.len(),
            actual: theta.coefficients.as_slice().len(),
        });
    }
    let mut probs = vec![T::zero(); m * m];
    fill_transition(&theta.coefficients, &x, &mut probs).map_err(|(from, to)| Error::NonFinitePredictor {
        from,
        to,
        t_hours: t_hours.as_f64(),
    })?;
    Ok(TransitionMatrix {
        t_hours,
        n_states: m,
        probs,
    })
}

/// Lists every violated invariant of `theta`; empty when valid.
pub fn validate<T: Scalar>(theta: &ThetaParams<T>) -> Vec<Violation> {
    let mut out = theta.config.violations();
    let m = theta.config.n_states;
    let means = &theta.emission.means;
    let vars = &theta.emission.variances;
    if means.len() != m {
        out.push(Violation::new("means", "means length does not match state count"));
    } else {
        if means.iter().any(|&x| !(x > T::zero() && x.is_finite())) {
            out.push(Violation::new("means", "means not positive"));
        }
        if means.windows(2).any(|w| !(w[0] < w[1])) {
            out.push(Violation::new("means", "means not strictly ascending"));
        }
    }
    if vars.len() != m {
        out.push(Violation::new("variances", "variances length does not match state count"));
    } else if vars.iter().any(|&v| !(v > T::zero() && v.is_finite())) {
        out.push(Violation::new("variances", "variances not positive"));
    }
    let coef = &theta.coefficients;
    if coef.n_states() != m || coef.n_coefficients() != theta.config.n_coefficients() {
        out.push(Violation::new(
            "coefficients",
            "coefficient tensor dimensions do not match configuration",
        ));
    } else if !coef.is_finite() {
        out.push(Violation::new("coefficients", "coefficients not finite"));
    }
    let delta = &theta.initial.delta;
    if delta.len() != m {
        out.push(Violation::new("delta", "initial distribution length does not match state count"));
    } else {
        if delta.iter().any(|&d| !(d >= T::zero())) {
            out.push(Violation::new("delta", "initial distribution has negative entries"));
        }
        let total: f64 = delta.iter().map(|d| d.as_f64()).sum();
        if (total - 1.0).abs() > SIMPLEX_TOL.max(m as f64 * T::epsilon().as_f64()) {
            out.push(Violation::new("delta", "initial distribution does not sum to 1"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::builtin_scenario;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scenario1() -> ThetaParams<f64> {
        builtin_scenario::<f64>(1).unwrap().theta_true
    }

    #[test]
    fn standard_normal_at_mode() {
        let e = EmissionParams {
            means: vec![0.0, 1.0, 2.0],
            variances: vec![1.0, 1.0, 1.0],
        };
        assert_abs_diff_eq!(log_emission_density(0.0, 0, &e).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-14);
    }

    #[test]
    fn scenario_one_emission_at_mean() {
        let e = &scenario1().emission;
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 0.5).ln();
        assert_abs_diff_eq!(log_emission_density(2.0, 0, e).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, -0.572_364_942_924_700_1, epsilon = 1e-12);
    }

    #[test]
    fn one_sigma_offset_drops_half() {
        let e = EmissionParams::<f64> {
            means: vec![2.0, 6.0, 11.0],
            variances: vec![0.6, 1.75, 2.2],
        };
        for s in 0..3 {
            let at_mode = log_emission_density(e.means[s], s, &e).unwrap();
            let off = log_emission_density(e.means[s] + e.variances[s].sqrt(), s, &e).unwrap();
            assert_abs_diff_eq!(at_mode - off, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn emission_state_out_of_range() {
        let e = &scenario1().emission;
        assert!(matches!(log_emission_density(1.0, 3, e), Err(Error::StateIndex { index: 3, .. })));
    }

    #[test]
    fn covariates_at_quarter_points() {
        let cfg = ModelConfig::default();
        let at = |t: f64| harmonic_covariates(t, &cfg);
        for (t, want) in [(0.0, [1.0, 1.0, 0.0]), (6.0, [1.0, 0.0, 1.0]), (24.0, [1.0, 1.0, 0.0])] {
            let got = at(t);
            for (g, w) in got.iter().zip(want) {
                assert_abs_diff_eq!(*g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn covariates_in_single_precision() {
        let got = harmonic_covariates(6.0f32, &ModelConfig::default());
        assert!((got[1]).abs() < 1e-6 && (got[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_coefficients_give_uniform_rows() {
        let mut theta = scenario1();
        theta.coefficients = CircadianCoefficients::zeros(3, 3);
        let g = transition_matrix_at(&theta, 13.7).unwrap();
        for p in &g.probs {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn scenario_row_one_at_midnight() {
        let theta = scenario1();
        let g = transition_matrix_at(&theta, 0.0).unwrap();
        // eta = (0, -1.89 + 0.04, -7.27 - 0.08)
        let e2 = (-1.85f64).exp();
        let e3 = (-7.35f64).exp();
        let z = 1.0 + e2 + e3;
        assert_abs_diff_eq!(g.get(0, 0), 1.0 / z, epsilon = 1e-14);
        assert_abs_diff_eq!(g.get(0, 1), e2 / z, epsilon = 1e-14);
        assert_abs_diff_eq!(g.get(0, 2), e3 / z, epsilon = 1e-14);
        assert_abs_diff_eq!(g.get(0, 0), 0.8637, epsilon = 1e-4);
        assert_abs_diff_eq!(g.get(0, 1), 0.1358, epsilon = 1e-4);
        assert_abs_diff_eq!(g.get(0, 2), 0.00056, epsilon = 1e-5);
    }

    #[test]
    fn non_finite_predictor_is_reported() {
        let mut theta = scenario1();
        theta.coefficients.get_mut(1, 2)[0] = f64::INFINITY;
        match transition_matrix_at(&theta, 3.0) {
            Err(Error::NonFinitePredictor { from: 1, to: 2, t_hours }) => assert_eq!(t_hours, 3.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_scenario_values() {
        assert!(validate(&scenario1()).is_empty());
    }

    #[test]
    fn validate_reports_ordering_and_simplex() {
        let mut theta = scenario1();
        theta.emission.means = vec![6.0, 2.0, 11.0];
        let v: Vec<String> = validate(&theta).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["means not strictly ascending"]);

        let mut theta = scenario1();
        theta.initial.delta = vec![0.5, 0.5, 0.5];
        let v: Vec<String> = validate(&theta).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["initial distribution does not sum to 1"]);
    }

    #[test]
    fn coefficient_serde_round_trip() {
        let theta = scenario1();
        let nested: Vec<Vec<Vec<f64>>> = theta.coefficients.clone().into();
        assert_eq!(nested[0][0], vec![0.0; 3]);
        let back = CircadianCoefficients::try_from(nested).unwrap();
        assert_eq!(back, theta.coefficients);
        let mut bad: Vec<Vec<Vec<f64>>> = back.into();
        bad[1][1][0] = 1.0;
        assert!(CircadianCoefficients::try_from(bad).is_err());
    }

    #[test]
    fn permutation_is_consistent() {
        let theta = scenario1();
        let p = theta.permute_states(&[2, 0, 1]);
        assert_eq!(p.emission.means, vec![11.0, 2.0, 6.0]);
        assert_eq!(p.coefficients.get(1, 2), theta.coefficients.get(0, 1));
        assert_eq!(p.sorted_by_mean(), theta);
    }

    #[test]
    fn names_match_flat_length() {
        let theta = scenario1();
        assert_eq!(parameter_names(&theta.config).len(), theta.to_flat().len());
        assert_eq!(parameter_names(&theta.config)[6], "beta0[1,2]");
    }

    fn random_theta() -> impl Strategy<Value = (ThetaParams<f64>, f64)> {
        (prop::collection::vec(-8.0f64..8.0, 18), 0.0f64..48.0).prop_map(|(b, t)| {
            let mut theta = builtin_scenario::<f64>(2).unwrap().theta_true;
            theta.coefficients = CircadianCoefficients::from_off_diagonal(3, 3, &b).unwrap();
            (theta, t)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rows_sum_to_one((theta, t) in random_theta()) {
            let g = transition_matrix_at(&theta, t).unwrap();
            for i in 0..3 {
                let s: f64 = g.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn daily_periodicity((theta, t) in random_theta()) {
            let a = transition_matrix_at(&theta, t).unwrap();
            let b = transition_matrix_at(&theta, t + 24.0).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn intercept_shift_leaves_row_unchanged((theta, t) in random_theta(), shift in -5.0f64..5.0, row in 0usize..3) {
            // adding c to the off-diagonal predictors of a row equals adding c to
            // the whole row with the pinned diagonal moved to -c
            let mut shifted = theta.clone();
            for j in (0..3).filter(|&j| j != row) {
                shifted.coefficients.get_mut(row, j)[0] += shift;
            }
            let a = transition_matrix_at(&theta, t).unwrap();
            let b = transition_matrix_at(&shifted, t).unwrap();
            let x = harmonic_covariates(t, &theta.config);
            let mut eta: Vec<f64> = (0..3).map(|j| if j == row { -shift } else {
                theta.coefficients.get(row, j).iter().zip(&x).map(|(b, x)| b * x).sum()
            }).collect();
            let hi = eta.iter().cloned().fold(f64::MIN, f64::max);
            eta.iter_mut().for_each(|e| *e = (*e - hi).exp());
            let z: f64 = eta.iter().sum();
            for j in 0..3 {
                prop_assert!((b.get(row, j) - eta[j] / z).abs() < 1e-12);
            }
            for i in (0..3).filter(|&i| i != row) {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }

        #[test]
        fn emission_peaks_at_mean(y in -20.0f64..40.0, s in 0usize..3) {
            let e = builtin_scenario::<f64>(3).unwrap().theta_true.emission;
            let at_mode = log_emission_density(e.means[s], s, &e).unwrap();
            prop_assert!(log_emission_density(y, s, &e).unwrap() <= at_mode);
        }

        #[test]
        fn covariates_repeat_each_period(t in 0.0f64..200.0) {
            let cfg = ModelConfig::default();
            let a = harmonic_covariates(t, &cfg);
            let b = harmonic_covariates(t.rem_euclid(24.0), &cfg);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
