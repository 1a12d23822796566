//! Bijection between constrained parameters and an unconstrained real vector.
//!
//! Layout of the unconstrained vector `z`:
//!
//! | block      | length              | map                                           |
//! |------------|---------------------|-----------------------------------------------|
//! | means      | `m`                 | `mu_1 = exp(z_1)`, `mu_i = mu_{i-1} + exp(z_i)` |
//! | variances  | `m`                 | `sigma2_i = exp(z_i)`                          |
//! | beta       | `m (m - 1) (1 + 2L)`| identity over off-diagonal entries, row-major  |
//! | simplex    | `m - 1`             | stick-breaking, below                          |
//!
//! Stick-breaking for the initial distribution uses plain logistic breaks:
//! `x_k = logistic(z_k)`, `delta_k = x_k * (1 - sum_{j<k} delta_j)` for
//! `k < m`, and `delta_m` takes the remaining stick. With `z = 0` and `m = 3`
//! this gives `(1/2, 1/4, 1/4)`.

use crate::error::{Error, Result};
use crate::model::{CircadianCoefficients, EmissionParams, InitialDistribution, ModelConfig, ThetaParams};
use crate::scalar::{logistic, softplus, Scalar};

/// Offsets of each block inside the unconstrained vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_states: usize,
    pub n_coefficients: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_states: config.n_states,
            n_coefficients: config.n_coefficients(),
        }
    }

    pub fn means(&self) -> std::ops::Range<usize> {
        0..self.n_states
    }

    pub fn variances(&self) -> std::ops::Range<usize> {
        self.n_states..2 * self.n_states
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        let start = 2 * self.n_states;
        start..start + self.n_states * (self.n_states - 1) * self.n_coefficients
    }

    pub fn simplex(&self) -> std::ops::Range<usize> {
        let start = self.beta().end;
        start..start + self.n_states - 1
    }

    pub fn dim(&self) -> usize {
        self.simplex().end
    }
}

/// Unconstrained dimension for `config`.
pub fn unconstrained_dim(config: &ModelConfig) -> usize {
    Layout::new(config).dim()
}

/// Stick-breaking map. Returns the simplex point and `log |J|` of the map
/// from `z` to its first `m - 1` coordinates.
pub fn stick_breaking<T: Scalar>(z: &[T]) -> (Vec<T>, T) {
    let mut delta = Vec::with_capacity(z.len() + 1);
    let mut remaining = T::one();
    let mut log_jac = T::zero();
    for &zk in z {
        let x = logistic(zk);
        // log x = -softplus(-z), log(1 - x) = -softplus(z)
        log_jac += remaining.ln() - softplus(-zk) - softplus(zk);
        let piece = remaining * x;
        delta.push(piece);
        remaining *= T::one() - x;
    }
    delta.push(remaining);
    (delta, log_jac)
}

/// Inverse of [`stick_breaking`]. Requires every entry strictly positive.
pub fn inverse_stick_breaking<T: Scalar>(delta: &[T]) -> Result<Vec<T>> {
    if delta.iter().any(|&d| !(d > T::zero())) {
        return Err(Error::Domain("initial distribution lies on the simplex boundary".into()));
    }
    let mut remaining = T::one();
    let mut z = Vec::with_capacity(delta.len() - 1);
    for &d in &delta[..delta.len() - 1] {
        let x = d / remaining;
        z.push(x.ln() - (T::one() - x).ln());
        remaining -= d;
    }
    Ok(z)
}

/// Pulls `grad_delta` (gradient with respect to all `m` simplex entries)
/// back through [`stick_breaking`] into `out` (length `m - 1`), optionally
/// adding the gradient of the log-Jacobian.
pub fn stick_breaking_pullback<T: Scalar>(z: &[T], grad_delta: &[T], with_jacobian: bool, out: &mut [T]) {
    let k = z.len();
    let mut xs = Vec::with_capacity(k);
    let mut rs = Vec::with_capacity(k + 1);
    let mut r = T::one();
    for &zk in z {
        let x = logistic(zk);
        xs.push(x);
        rs.push(r);
        r *= T::one() - x;
    }
    // adjoint of the running remainder, seeded by delta_m = r_m
    let mut adj_r_next = grad_delta[k];
    for idx in (0..k).rev() {
        let x = xs[idx];
        let r = rs[idx];
        let mut adj_r = grad_delta[idx] * x + adj_r_next * (T::one() - x);
        let mut adj_x = grad_delta[idx] * r - adj_r_next * r;
        if with_jacobian {
            adj_r += T::one() / r;
            adj_x += T::one() / x - T::one() / (T::one() - x);
        }
        out[idx] = adj_x * x * (T::one() - x);
        adj_r_next = adj_r;
    }
}

/// Maps `z` to constrained parameters and returns `log |det J|` of the map.
pub fn to_constrained<T: Scalar>(z: &[T], config: &ModelConfig) -> Result<(ThetaParams<T>, T)> {
    let layout = Layout::new(config);
    if z.len() != layout.dim() {
        return Err(Error::Dimension {
            what: "unconstrained vector",
            expected: layout.dim(),
            actual: z.len(),
        });
    }
    let mut log_jac = T::zero();
    let mut means = Vec::with_capacity(layout.n_states);
    let mut acc = T::zero();
    for &zi in &z[layout.means()] {
        acc += zi.exp();
        means.push(acc);
        log_jac += zi;
    }
    let variances: Vec<T> = z[layout.variances()].iter().map(|v| v.exp()).collect();
    log_jac += z[layout.variances()].iter().copied().sum::<T>();
    let coefficients =
        CircadianCoefficients::from_off_diagonal(layout.n_states, layout.n_coefficients, &z[layout.beta()])?;
    let (delta, simplex_jac) = stick_breaking(&z[layout.simplex()]);
    log_jac += simplex_jac;
    let theta = ThetaParams {
        config: config.clone(),
        emission: EmissionParams { means, variances },
        coefficients,
        initial: InitialDistribution { delta },
    };
    Ok((theta, log_jac))
}

/// Exact inverse of [`to_constrained`].
pub fn to_unconstrained<T: Scalar>(theta: &ThetaParams<T>) -> Result<Vec<T>> {
    theta.check().map_err(|e| Error::Domain(e.to_string()))?;
    let layout = Layout::new(&theta.config);
    let mut z = Vec::with_capacity(layout.dim());
    let mut prev = T::zero();
    for &mu in &theta.emission.means {
        z.push((mu - prev).ln());
        prev = mu;
    }
    z.extend(theta.emission.variances.iter().map(|v| v.ln()));
    z.extend(theta.coefficients.off_diagonal());
    z.extend(inverse_stick_breaking(&theta.initial.delta)?);
    Ok(z)
}

/// Gradients of a scalar function with respect to the natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGradient<T> {
    pub means: Vec<T>,
    /// With respect to log-variances.
    pub log_variances: Vec<T>,
    /// Full `m x m x (1 + 2L)` layout; diagonal entries are ignored.
    pub beta: Vec<T>,
    pub delta: Vec<T>,
}

impl<T: Scalar> NaturalGradient<T> {
    pub fn zeros(layout: &Layout) -> Self {
        let m = layout.n_states;
        Self {
            means: vec![T::zero(); m],
            log_variances: vec![T::zero(); m],
            beta: vec![T::zero(); m * m * layout.n_coefficients],
            delta: vec![T::zero(); m],
        }
    }
}

/// Chain rule from natural-parameter gradients to `d/dz` of
/// `f(to_constrained(z)) + log |J|(z)`.
pub(crate) fn pullback_to_unconstrained<T: Scalar>(
    z: &[T],
    layout: &Layout,
    grad: &NaturalGradient<T>,
    out: &mut [T],
) {
    let m = layout.n_states;
    let nc = layout.n_coefficients;
    let zm = &z[layout.means()];
    // mu_i depends on z_k for every k <= i
    let mut suffix = T::zero();
    for k in (0..m).rev() {
        suffix += grad.means[k];
        out[k] = zm[k].exp() * suffix + T::one();
    }
    for k in 0..m {
        out[m + k] = grad.log_variances[k] + T::one();
    }
    let mut idx = layout.beta().start;
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            let start = (i * m + j) * nc;
            out[idx..idx + nc].copy_from_slice(&grad.beta[start..start + nc]);
            idx += nc;
        }
    }
    let simplex = layout.simplex();
    stick_breaking_pullback(&z[simplex.clone()], &grad.delta, true, &mut out[simplex]);
}
