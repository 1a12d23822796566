//! Rest-activity rhythm measures and simulation-study evaluation metrics.
//!
//! A [`StateProbabilityCurve`] holds the marginal state distribution implied
//! by a parameter set over one 24-hour cycle. Row `r` is the distribution
//! after `r + 1` transitions from midnight, `delta * G(t_0) * ... * G(t_r)`,
//! and is attributed to the epoch `[r e, (r + 1) e)` (hours, `e` the epoch
//! length). Integrals over clock time treat the curve as piecewise constant
//! on those epochs.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{FitSummary, MleFit};
use crate::model::{transition_matrix_at, ThetaParams};
use crate::scalar::Scalar;

/// Resultant length below which the gravity center is undefined.
pub const MIN_RESULTANT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateProbabilityCurve {
    pub epoch_minutes: u32,
    /// Epoch start times in hours since midnight.
    pub grid: Vec<f64>,
    /// One row of `m` state probabilities per grid point.
    pub probs: Vec<Vec<f64>>,
}

impl StateProbabilityCurve {
    /// Curve with an explicit state-probability matrix on the epoch grid
    /// starting at midnight.
    pub fn from_probs(epoch_minutes: u32, probs: Vec<Vec<f64>>) -> Result<Self> {
        if epoch_minutes == 0 || probs.is_empty() {
            return Err(Error::Argument("curve needs a positive epoch length and at least one row".into()));
        }
        if probs.len() * epoch_minutes as usize > 1440 {
            return Err(Error::Shape(format!(
                "{} epochs of {epoch_minutes} min exceed 24 hours",
                probs.len()
            )));
        }
        let m = probs[0].len();
        if m == 0 || probs.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("curve rows must share a nonzero width".into()));
        }
        let width = epoch_minutes as f64 / 60.0;
        Ok(Self {
            epoch_minutes,
            grid: (0..probs.len()).map(|r| r as f64 * width).collect(),
            probs,
        })
    }

    /// Curve whose only information is the state-1 probability profile; the
    /// remaining mass goes to a second state.
    pub fn from_rest_profile(epoch_minutes: u32, rest: &[f64]) -> Result<Self> {
        Self::from_probs(epoch_minutes, rest.iter().map(|&p| vec![p, 1.0 - p]).collect())
    }

    pub fn n_states(&self) -> usize {
        self.probs[0].len()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Epoch width in hours.
    pub fn epoch_hours(&self) -> f64 {
        self.epoch_minutes as f64 / 60.0
    }

    /// Probabilities of one state across the grid.
    pub fn state(&self, state: usize) -> Vec<f64> {
        self.probs.iter().map(|r| r[state]).collect()
    }
}

/// Marginal state probabilities over one day, propagating the initial
/// distribution through the epoch transition matrices from midnight.
pub fn state_probability_curve<T: Scalar>(theta: &ThetaParams<T>) -> Result<StateProbabilityCurve> {
    theta.check()?;
    let config = &theta.config;
    let m = theta.n_states();
    let n = config.epochs_per_day();
    let width = config.epoch_minutes as f64 / 60.0;
    let mut p: Vec<f64> = theta.initial.delta.iter().map(|d| d.as_f64()).collect();
    let mut probs = Vec::with_capacity(n);
    let mut next = vec![0.0; m];
    for r in 0..n {
        let g = transition_matrix_at(theta, T::lit(r as f64 * width))?;
        for (j, slot) in next.iter_mut().enumerate() {
            *slot = (0..m).map(|i| p[i] * g.get(i, j).as_f64()).sum();
        }
        let total: f64 = next.iter().sum();
        p.iter_mut().zip(&next).for_each(|(a, b)| *a = b / total);
        probs.push(p.clone());
    }
    StateProbabilityCurve::from_probs(config.epoch_minutes, probs)
}

/// Expected hours per day in state 1: `sum_t P(S_t = 1) * e`.
pub fn rest_amount(curve: &StateProbabilityCurve) -> f64 {
    curve.probs.iter().map(|r| r[0]).sum::<f64>() * curve.epoch_hours()
}

/// Circular mean clock time of state 1, weighting each epoch midpoint by
/// its state-1 probability. Returns hours in `[0, 24)`.
pub fn gravity_center(curve: &StateProbabilityCurve) -> Result<f64> {
    let half = curve.epoch_hours() / 2.0;
    let (mut s, mut c) = (0.0, 0.0);
    for (t, row) in curve.grid.iter().zip(&curve.probs) {
        let angle = TAU * (t + half) / 24.0;
        s += row[0] * angle.sin();
        c += row[0] * angle.cos();
    }
    let total: f64 = curve.probs.iter().map(|r| r[0]).sum();
    if !(total > 0.0) || s.hypot(c) < MIN_RESULTANT * total {
        return Err(Error::UndefinedCenter(format!(
            "resultant {:.3e} of total weight {total:.3e}",
            s.hypot(c)
        )));
    }
    Ok((s.atan2(c) * 24.0 / TAU).rem_euclid(24.0))
}

/// Length of the overlap of `[lo, hi)` with the circular window starting at
/// `start` of length `len` (hours, period 24).
fn circular_overlap(lo: f64, hi: f64, start: f64, len: f64) -> f64 {
    (-1..=1)
        .map(|k| {
            let a = start + 24.0 * k as f64;
            (hi.min(a + len) - lo.max(a)).max(0.0)
        })
        .sum()
}

/// Rhythmic index around the gravity center of the curve.
pub fn rhythmic_index(curve: &StateProbabilityCurve) -> Result<f64> {
    let a = rest_amount(curve);
    check_rest_amount(a)?;
    rhythmic_index_at(curve, gravity_center(curve)?)
}

fn check_rest_amount(a: f64) -> Result<()> {
    if !(a > 1e-12 && a < 24.0 - 1e-9) {
        return Err(Error::DegenerateProfile(a));
    }
    Ok(())
}

/// Rhythmic index `24 / (24 - a) * ((1/a) * int_{I_c} P(S = 1) - a / 24)`
/// for a supplied center `c`, where `a` is the rest amount and `I_c` the
/// window of length `a` centered at `c`. Not clamped below.
pub fn rhythmic_index_at(curve: &StateProbabilityCurve, center: f64) -> Result<f64> {
    let a = rest_amount(curve);
    check_rest_amount(a)?;
    let width = curve.epoch_hours();
    let start = (center - a / 2.0).rem_euclid(24.0);
    let inside: f64 = curve
        .grid
        .iter()
        .zip(&curve.probs)
        .map(|(&t, row)| row[0] * circular_overlap(t, t + width, start, a))
        .sum();
    Ok(24.0 / (24.0 - a) * (inside / a - a / 24.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiCategory {
    #[serde(rename = "<0.2")]
    Below02,
    #[serde(rename = "0.2–0.4")]
    From02To04,
    #[serde(rename = "0.4–0.6")]
    From04To06,
    #[serde(rename = ">0.6")]
    Above06,
}

impl RiCategory {
    pub fn of(ri: f64) -> Self {
        if ri < 0.2 {
            Self::Below02
        } else if ri < 0.4 {
            Self::From02To04
        } else if ri < 0.6 {
            Self::From04To06
        } else {
            Self::Above06
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Below02 => "<0.2",
            Self::From02To04 => "0.2–0.4",
            Self::From04To06 => "0.4–0.6",
            Self::Above06 => ">0.6",
        }
    }
}

impl fmt::Display for RiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaCategory {
    #[serde(rename = "<5 hr")]
    Below5,
    #[serde(rename = "5–7 hr")]
    From5To7,
    #[serde(rename = "7–9 hr")]
    From7To9,
    #[serde(rename = ">9 hr")]
    Above9,
}

impl RaCategory {
    pub fn of(hours: f64) -> Self {
        if hours < 5.0 {
            Self::Below5
        } else if hours < 7.0 {
            Self::From5To7
        } else if hours < 9.0 {
            Self::From7To9
        } else {
            Self::Above9
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Below5 => "<5 hr",
            Self::From5To7 => "5–7 hr",
            Self::From7To9 => "7–9 hr",
            Self::Above9 => ">9 hr",
        }
    }
}

impl fmt::Display for RaCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Bins for the rhythmic index and the rest amount (half-open, lower bound
/// inclusive).
pub fn categorize(ri: f64, ra: f64) -> (RiCategory, RaCategory) {
    (RiCategory::of(ri), RaCategory::of(ra))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarSummary {
    /// Rest amount `a`, hours per day.
    pub rest_amount: f64,
    /// Gravity center `c`, hours since midnight.
    pub gravity_center: f64,
    pub rhythmic_index: f64,
    pub ri_category: RiCategory,
    pub ra_category: RaCategory,
    /// Set when the index is negative (state 1 concentrated away from its
    /// own center window).
    pub negative_ri: bool,
}

pub fn rar_summary(curve: &StateProbabilityCurve) -> Result<RarSummary> {
    let a = rest_amount(curve);
    check_rest_amount(a)?;
    let c = gravity_center(curve)?;
    let ri = rhythmic_index_at(curve, c)?;
    let (ri_category, ra_category) = categorize(ri, a);
    Ok(RarSummary {
        rest_amount: a,
        gravity_center: c,
        rhythmic_index: ri,
        ri_category,
        ra_category,
        negative_ri: ri < 0.0,
    })
}

/// Per-state `sum_t |P_est(S_t = j) - P_true(S_t = j)|` over the grid.
pub fn accumulated_state_prob_bias(est: &StateProbabilityCurve, truth: &StateProbabilityCurve) -> Result<Vec<f64>> {
    if est.epoch_minutes != truth.epoch_minutes || est.len() != truth.len() || est.n_states() != truth.n_states() {
        return Err(Error::Shape(format!(
            "curves {}x{} at {} min vs {}x{} at {} min",
            est.len(),
            est.n_states(),
            est.epoch_minutes,
            truth.len(),
            truth.n_states(),
            truth.epoch_minutes
        )));
    }
    Ok((0..est.n_states())
        .map(|j| est.probs.iter().zip(&truth.probs).map(|(a, b)| (a[j] - b[j]).abs()).sum())
        .collect())
}

/// `KL(N(m_t, v_t) || N(m_e, v_e))`, arguments as `(mean, variance)`.
pub fn gaussian_kl(truth: (f64, f64), est: (f64, f64)) -> Result<f64> {
    let ((mt, vt), (me, ve)) = (truth, est);
    if !(vt > 0.0 && ve > 0.0) {
        return Err(Error::Domain(format!("variances must be positive, got {vt} and {ve}")));
    }
    let d = mt - me;
    Ok((0.5 * ((ve / vt).ln() + (vt + d * d) / ve - 1.0)).max(0.0))
}

/// One replicate's point estimates in the flat parameter order, with
/// posterior SDs and 95% intervals when the method provides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub values: Vec<f64>,
    pub sd: Option<Vec<f64>>,
    pub intervals: Option<Vec<(f64, f64)>>,
    /// Parameters used for the state-probability curve.
    pub theta: ThetaParams<f64>,
}

impl ReplicateEstimate {
    pub fn from_summary(summary: &FitSummary) -> Result<Self> {
        Ok(Self {
            values: summary.parameters.iter().map(|p| p.median).collect(),
            sd: Some(summary.parameters.iter().map(|p| p.sd).collect()),
            intervals: Some(summary.parameters.iter().map(|p| (p.lower, p.upper)).collect()),
            theta: summary.median_theta()?,
        })
    }

    pub fn from_mle(fit: &MleFit<f64>) -> Self {
        Self {
            values: fit.theta.to_flat(),
            sd: None,
            intervals: None,
            theta: fit.theta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterMetrics {
    pub name: String,
    /// Mean absolute bias.
    pub mab: f64,
    /// Mean squared error.
    pub mmse: f64,
    /// Mean posterior SD.
    pub msd: Option<f64>,
    /// Fraction of 95% intervals containing the truth.
    pub mcr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub n_replicates: usize,
    pub parameters: Vec<ParameterMetrics>,
    /// Set when some replicate lacked intervals, so coverage is omitted.
    pub mcr_missing: bool,
    /// Accumulated state-probability bias per state across replicates.
    pub state_bias: Vec<BiasSummary>,
}

impl ReplicateMetrics {
    pub fn get(&self, name: &str) -> Option<&ParameterMetrics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Bias, error, SD and coverage of each parameter over replicates, and the
/// spread of the per-state accumulated curve bias.
pub fn replicate_metrics(estimates: &[ReplicateEstimate], truth: &ThetaParams<f64>) -> Result<ReplicateMetrics> {
    if estimates.is_empty() {
        return Err(Error::Argument("need at least one replicate".into()));
    }
    let names = crate::model::parameter_names(&truth.config);
    let truth_flat = truth.to_flat();
    for e in estimates {
        let lens = [
            Some(e.values.len()),
            e.sd.as_ref().map(Vec::len),
            e.intervals.as_ref().map(Vec::len),
        ];
        if let Some(bad) = lens.into_iter().flatten().find(|&l| l != truth_flat.len()) {
            return Err(Error::Dimension {
                what: "replicate estimate",
                expected: truth_flat.len(),
                actual: bad,
            });
        }
    }
    let r = estimates.len() as f64;
    let has_sd = estimates.iter().all(|e| e.sd.is_some());
    let has_intervals = estimates.iter().all(|e| e.intervals.is_some());
    let parameters = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let t = truth_flat[k];
            let mab = estimates.iter().map(|e| (e.values[k] - t).abs()).sum::<f64>() / r;
            let mmse = estimates.iter().map(|e| (e.values[k] - t).powi(2)).sum::<f64>() / r;
            let msd = has_sd.then(|| estimates.iter().map(|e| e.sd.as_ref().unwrap()[k]).sum::<f64>() / r);
            let mcr = has_intervals.then(|| {
                estimates
                    .iter()
                    .filter(|e| {
                        let (lo, hi) = e.intervals.as_ref().unwrap()[k];
                        lo <= t && t <= hi
                    })
                    .count() as f64
                    / r
            });
            ParameterMetrics {
                name,
                mab,
                mmse,
                msd,
                mcr,
            }
        })
        .collect();

    let true_curve = state_probability_curve(truth)?;
    let mut per_state = vec![Vec::with_capacity(estimates.len()); truth.n_states()];
    for e in estimates {
        let bias = accumulated_state_prob_bias(&state_probability_curve(&e.theta)?, &true_curve)?;
        for (acc, b) in per_state.iter_mut().zip(bias) {
            acc.push(b);
        }
    }
    let state_bias = per_state
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            BiasSummary {
                median: median(&v),
                min: v[0],
                max: v[v.len() - 1],
            }
        })
        .collect();
    Ok(ReplicateMetrics {
        n_replicates: estimates.len(),
        parameters,
        mcr_missing: !has_intervals,
        state_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CircadianCoefficients, ModelConfig};
    use crate::simulate::builtin_scenario;
    use approx::assert_abs_diff_eq;

    fn indicator(lo: f64, hi: f64) -> Vec<f64> {
        // epoch starts on the 5-minute grid; window may wrap midnight
        (0..288)
            .map(|r| {
                let t = r as f64 / 12.0;
                let inside = if lo <= hi { t >= lo && t < hi } else { t >= lo || t < hi };
                if inside { 1.0 } else { 0.0 }
            })
            .collect()
    }

    fn curve(rest: &[f64]) -> StateProbabilityCurve {
        StateProbabilityCurve::from_rest_profile(5, rest).unwrap()
    }

    #[test]
    fn uniform_and_identity_chains() {
        let mut theta = builtin_scenario::<f64>(1).unwrap().theta_true;
        theta.coefficients = CircadianCoefficients::zeros(3, 3);
        theta.initial.delta = vec![0.7, 0.2, 0.1];
        let c = state_probability_curve(&theta).unwrap();
        assert_eq!(c.len(), 288);
        for row in &c.probs {
            for p in row {
                assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }

        let mut sticky = theta.clone();
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                sticky.coefficients.get_mut(i, j)[0] = -60.0;
            }
        }
        let c = state_probability_curve(&sticky).unwrap();
        for row in &c.probs {
            for (p, d) in row.iter().zip(&sticky.initial.delta) {
                assert_abs_diff_eq!(*p, *d, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn curve_rows_sum_to_one() {
        for id in 1..=3 {
            let c = state_probability_curve(&builtin_scenario::<f64>(id).unwrap().theta_true).unwrap();
            assert!(c.grid.windows(2).all(|w| w[0] < w[1]));
            assert!(c.grid[0] >= 0.0 && *c.grid.last().unwrap() < 24.0);
            for row in &c.probs {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rest_amount_examples() {
        assert_abs_diff_eq!(rest_amount(&curve(&[1.0; 288])), 24.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rest_amount(&curve(&[1.0 / 3.0; 288])), 8.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rest_amount(&curve(&indicator(0.0, 8.0))), 8.0, epsilon = 1e-10);
    }

    #[test]
    fn rest_amount_is_linear() {
        let a = indicator(1.0, 9.0);
        let b: Vec<f64> = (0..288).map(|r| 0.5 + 0.4 * (r as f64 / 20.0).sin()).collect();
        let w = 0.3;
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        let lhs = rest_amount(&curve(&mix));
        let rhs = w * rest_amount(&curve(&a)) + (1.0 - w) * rest_amount(&curve(&b));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn gravity_center_examples() {
        assert_abs_diff_eq!(gravity_center(&curve(&indicator(2.0, 6.0))).unwrap(), 4.0, epsilon = 1e-9);
        let wrapped = gravity_center(&curve(&indicator(22.0, 2.0))).unwrap();
        assert!(!(1e-9..=24.0 - 1e-9).contains(&wrapped), "{wrapped}");
        assert!(matches!(
            gravity_center(&curve(&[0.4; 288])),
            Err(Error::UndefinedCenter(_))
        ));
        assert!(gravity_center(&curve(&[0.0; 288])).is_err());
    }

    #[test]
    fn rhythmic_index_concentrated_and_constant() {
        for (lo, hi) in [(22.0, 6.0), (0.0, 8.0), (13.5, 14.25), (3.0, 21.0)] {
            let ri = rhythmic_index(&curve(&indicator(lo, hi))).unwrap();
            assert_abs_diff_eq!(ri, 1.0, epsilon = 1e-9);
        }
        for p in [0.1, 1.0 / 3.0, 0.8] {
            for c in [0.0, 7.3, 23.9] {
                assert_abs_diff_eq!(rhythmic_index_at(&curve(&[p; 288]), c).unwrap(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rhythmic_index_degenerate_profiles() {
        assert!(matches!(rhythmic_index(&curve(&[0.0; 288])), Err(Error::DegenerateProfile(_))));
        assert!(matches!(rhythmic_index_at(&curve(&[1.0; 288]), 3.0), Err(Error::DegenerateProfile(_))));
    }

    /// Integrates the piecewise-constant profile on a one-second grid.
    fn quadrature_ri(rest: &[f64]) -> f64 {
        let n = 86_400;
        let dt = 24.0 / n as f64;
        let p = |s: usize| rest[s / 300];
        let a: f64 = (0..n).map(|s| p(s) * dt).sum();
        let (mut sn, mut cs) = (0.0, 0.0);
        for s in 0..n {
            let angle = TAU * (s as f64 + 0.5) * dt / 24.0;
            sn += p(s) * angle.sin();
            cs += p(s) * angle.cos();
        }
        let c = (sn.atan2(cs) * 24.0 / TAU).rem_euclid(24.0);
        let start = c - a / 2.0;
        let inside: f64 = (0..n)
            .map(|s| {
                let t = s as f64 * dt;
                p(s) * circular_overlap(t, t + dt, start.rem_euclid(24.0), a)
            })
            .sum();
        24.0 / (24.0 - a) * (inside / a - a / 24.0)
    }

    #[test]
    fn rhythmic_index_matches_fine_quadrature() {
        let night: Vec<f64> = indicator(23.0, 7.0).iter().map(|&v| if v > 0.0 { 0.9 } else { 0.1 }).collect();
        let ri = rhythmic_index(&curve(&night)).unwrap();
        assert_abs_diff_eq!(ri, quadrature_ri(&night), epsilon = 1e-4);
        // the window edges fall inside epochs here
        let smooth: Vec<f64> = (0..288).map(|r| 0.5 + 0.45 * (TAU * (r as f64 / 288.0 - 0.1)).cos()).collect();
        assert_abs_diff_eq!(rhythmic_index(&curve(&smooth)).unwrap(), quadrature_ri(&smooth), epsilon = 1e-4);
    }

    #[test]
    fn rhythmic_index_is_rotation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let rest: Vec<f64> = (0..288).map(|_| rng.gen::<f64>()).collect();
            let shift = rng.gen_range(1..288);
            let mut rotated = rest.clone();
            rotated.rotate_right(shift);
            let a = rhythmic_index(&curve(&rest)).unwrap();
            let b = rhythmic_index(&curve(&rotated)).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            assert!(a <= 1.0);
        }
    }

    #[test]
    fn categories() {
        assert_eq!(RiCategory::of(0.24).label(), "0.2–0.4");
        assert_eq!(RiCategory::of(0.88).label(), ">0.6");
        assert_eq!(RiCategory::of(0.2), RiCategory::From02To04);
        assert_eq!(RiCategory::of(-0.3), RiCategory::Below02);
        assert_eq!(RaCategory::of(8.0).label(), "7–9 hr");
        assert_eq!(RaCategory::of(9.0), RaCategory::Above9);
        assert_eq!(RaCategory::of(4.99), RaCategory::Below5);
        assert_eq!(categorize(0.5, 6.0), (RiCategory::From04To06, RaCategory::From5To7));
        assert_eq!(serde_json::to_string(&RaCategory::From7To9).unwrap(), "\"7–9 hr\"");
    }

    #[test]
    fn summary_flags_negative_index() {
        // state 1 mostly outside its own center window
        let mut rest = vec![0.0; 288];
        for r in 0..288 {
            rest[r] = if (96..104).contains(&r) { 1.0 } else { 0.3 };
        }
        let s = rar_summary(&curve(&rest)).unwrap();
        assert!((0.0..24.0).contains(&s.gravity_center));
        assert_eq!(s.negative_ri, s.rhythmic_index < 0.0);
        let s = rar_summary(&curve(&indicator(0.0, 8.0))).unwrap();
        assert_abs_diff_eq!(s.rest_amount, 8.0, epsilon = 1e-10);
        assert_eq!((s.ri_category, s.ra_category), (RiCategory::Above06, RaCategory::From7To9));
        assert!(!s.negative_ri);
    }

    #[test]
    fn accumulated_bias_examples() {
        let base = curve(&indicator(1.0, 5.0).iter().map(|v| 0.2 + 0.5 * v).collect::<Vec<_>>());
        assert_eq!(accumulated_state_prob_bias(&base, &base).unwrap(), vec![0.0, 0.0]);
        let shifted = curve(&base.state(0).iter().map(|p| p + 0.01).collect::<Vec<_>>());
        let b = accumulated_state_prob_bias(&shifted, &base).unwrap();
        assert_abs_diff_eq!(b[0], 2.88, epsilon = 1e-10);
        let short = StateProbabilityCurve::from_rest_profile(5, &[0.5; 100]).unwrap();
        assert!(matches!(accumulated_state_prob_bias(&short, &base), Err(Error::Shape(_))));
    }

    proptest::proptest! {
        #[test]
        fn accumulated_bias_triangle(
            a in proptest::collection::vec(0.0..1.0f64, 288),
            b in proptest::collection::vec(0.0..1.0f64, 288),
            c in proptest::collection::vec(0.0..1.0f64, 288),
        ) {
            let (a, b, c) = (curve(&a), curve(&b), curve(&c));
            let ab = accumulated_state_prob_bias(&a, &b).unwrap();
            let bc = accumulated_state_prob_bias(&b, &c).unwrap();
            let ac = accumulated_state_prob_bias(&a, &c).unwrap();
            for j in 0..2 {
                proptest::prop_assert!(ac[j] <= ab[j] + bc[j] + 1e-12);
            }
        }
    }

    /// Trapezoid rule for `int p log(p / q)` over a wide interval.
    fn kl_quadrature(truth: (f64, f64), est: (f64, f64)) -> f64 {
        let logpdf = |x: f64, (m, v): (f64, f64)| -0.5 * (TAU * v).ln() - (x - m).powi(2) / (2.0 * v);
        let (lo, hi, n) = (truth.0 - 15.0 * truth.1.sqrt(), truth.0 + 15.0 * truth.1.sqrt(), 200_000);
        let h = (hi - lo) / n as f64;
        (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let lp = logpdf(x, truth);
                w * lp.exp() * (lp - logpdf(x, est))
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn kl_examples_and_oracle() {
        assert_eq!(gaussian_kl((2.0, 0.5), (2.0, 0.5)).unwrap(), 0.0);
        let k = gaussian_kl((2.0, 0.5), (6.0, 0.5)).unwrap();
        assert_abs_diff_eq!(k, 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k, kl_quadrature((2.0, 0.5), (6.0, 0.5)), epsilon = 1e-6);
        let k = gaussian_kl((0.0, 1.0), (0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(k, 0.5 * (2f64.ln() - 0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(k, 0.09657, epsilon = 1e-5);
        assert_abs_diff_eq!(k, kl_quadrature((0.0, 1.0), (0.0, 2.0)), epsilon = 1e-6);
        assert!(matches!(gaussian_kl((0.0, 0.0), (0.0, 1.0)), Err(Error::Domain(_))));
        assert!(gaussian_kl((0.0, 1.0), (0.0, -1.0)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn kl_nonnegative(mt in -5.0..5.0f64, vt in 0.05..5.0f64, me in -5.0..5.0f64, ve in 0.05..5.0f64) {
            let k = gaussian_kl((mt, vt), (me, ve)).unwrap();
            proptest::prop_assert!(k >= 0.0);
            proptest::prop_assert!(gaussian_kl((mt, vt), (mt, vt)).unwrap().abs() < 1e-12);
        }
    }

    fn exact(theta: &ThetaParams<f64>, offset: f64) -> ReplicateEstimate {
        let mut values = theta.to_flat();
        values[0] += offset;
        ReplicateEstimate {
            sd: Some(vec![0.1; values.len()]),
            intervals: Some(values.iter().map(|v| (v - 2.0, v + 2.0)).collect()),
            values,
            theta: theta.clone(),
        }
    }

    #[test]
    fn replicate_metric_examples() {
        let truth = builtin_scenario::<f64>(1).unwrap().theta_true;
        let m = replicate_metrics(&[exact(&truth, 0.0), exact(&truth, 0.0)], &truth).unwrap();
        for p in &m.parameters {
            assert_eq!((p.mab, p.mmse, p.mcr), (0.0, 0.0, Some(1.0)));
            assert_abs_diff_eq!(p.msd.unwrap(), 0.1, epsilon = 1e-15);
        }
        assert!(m.state_bias.iter().all(|b| b.max == 0.0));

        let m = replicate_metrics(&[exact(&truth, 1.0), exact(&truth, -1.0)], &truth).unwrap();
        let mu1 = m.get("mu[1]").unwrap();
        assert_abs_diff_eq!(mu1.mab, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu1.mmse, 1.0, epsilon = 1e-12);

        let m = replicate_metrics(&[exact(&truth, 3.0), exact(&truth, 0.0)], &truth).unwrap();
        assert_eq!(m.get("mu[1]").unwrap().mcr, Some(0.5));

        let mut bare = exact(&truth, 0.0);
        bare.intervals = None;
        bare.sd = None;
        let m = replicate_metrics(&[bare], &truth).unwrap();
        assert!(m.mcr_missing);
        assert_eq!(m.parameters[0].mcr, None);
        assert_eq!(m.parameters[0].msd, None);
        assert!(replicate_metrics(&[], &truth).is_err());
    }

    #[test]
    fn replicate_bias_uses_curves() {
        let truth = builtin_scenario::<f64>(1).unwrap().theta_true;
        let mut other = truth.clone();
        other.coefficients = CircadianCoefficients::zeros(3, 3);
        let est = ReplicateEstimate::from_mle(&crate::inference::MleFit {
            theta: other.clone(),
            loglik: 0.0,
            best_start: 0,
            traces: Vec::new(),
        });
        let m = replicate_metrics(&[est], &truth).unwrap();
        let expected = accumulated_state_prob_bias(
            &state_probability_curve(&other).unwrap(),
            &state_probability_curve(&truth).unwrap(),
        )
        .unwrap();
        for (b, e) in m.state_bias.iter().zip(expected) {
            assert_eq!((b.median, b.min, b.max), (e, e, e));
        }
        assert!(m.mcr_missing);
    }

    #[test]
    fn curve_for_other_epoch_lengths() {
        let mut theta = builtin_scenario::<f64>(1).unwrap().theta_true;
        theta.config = ModelConfig::new(3, vec![1.0 / 24.0], 10).unwrap();
        let c = state_probability_curve(&theta).unwrap();
        assert_eq!(c.len(), 144);
        assert_abs_diff_eq!(c.grid[1], 1.0 / 6.0, epsilon = 1e-15);
    }
}
