//! Synthetic series from the circadian HMM and the three reference scenarios.
//!
//! Each subject's generator is seeded from the master seed by
//! [`subject_seed`], a SplitMix64 finalizer applied to the master seed plus
//! the subject index times the golden-ratio increment. Streams therefore do
//! not depend on the order in which subjects are generated.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::ObservationSeries;
use crate::model::{
    fill_transition, harmonic_covariates, CircadianCoefficients, EmissionParams, InitialDistribution, ModelConfig,
    ThetaParams,
};
use crate::scalar::Scalar;

/// Off-diagonal coefficients of the reference scenarios, row-major over
/// `(from, to)` pairs, each as (intercept, cosine, sine).
const REFERENCE_BETA: [[f64; 3]; 6] = [
    [-1.89, 0.04, 0.17],
    [-7.27, -0.08, 3.40],
    [-4.13, 0.11, -2.96],
    [-2.78, 0.25, 0.85],
    [-8.42, -1.07, -2.59],
    [-2.86, 0.04, -0.94],
];

const REFERENCE_MEANS: [f64; 3] = [2.0, 6.0, 11.0];

/// A simulation design: true parameters plus replicate dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ScenarioSpec<T> {
    pub theta_true: ThetaParams<T>,
    pub n_subjects: usize,
    pub days: usize,
    pub epoch_minutes: u32,
    pub seed: u64,
}

impl<T: Scalar> ScenarioSpec<T> {
    pub fn check(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Argument("days must be at least 1".into()));
        }
        if self.n_subjects == 0 {
            return Err(Error::Argument("n_subjects must be at least 1".into()));
        }
        if self.epoch_minutes == 0 || 1440 % self.epoch_minutes != 0 {
            return Err(Error::Argument("epoch_minutes must divide 1440".into()));
        }
        self.theta_true.check()
    }

    /// Epochs per simulated series.
    pub fn series_len(&self) -> usize {
        self.days * (1440 / self.epoch_minutes as usize)
    }
}

/// One simulated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSeries<T> {
    /// Hidden states, 0-based.
    pub states: Vec<usize>,
    pub observations: ObservationSeries<T>,
    pub subject_id: String,
}

/// Reference scenario 1, 2 or 3: shared means (2, 6, 11) and circadian
/// coefficients, with variances (0.5, 0.5, 0.5), (1, 1, 1) and
/// (0.6, 1.75, 2.2) respectively.
pub fn builtin_scenario<T: Scalar>(id: u8) -> Result<ScenarioSpec<T>> {
    let variances: [f64; 3] = match id {
        1 => [0.5, 0.5, 0.5],
        2 => [1.0, 1.0, 1.0],
        3 => [0.6, 1.75, 2.2],
        _ => return Err(Error::Argument(format!("unknown scenario {id}; expected 1, 2 or 3"))),
    };
    let config = ModelConfig::default();
    let flat: Vec<T> = REFERENCE_BETA.iter().flatten().map(|&b| T::lit(b)).collect();
    let theta_true = ThetaParams {
        config,
        emission: EmissionParams {
            means: REFERENCE_MEANS.iter().map(|&v| T::lit(v)).collect(),
            variances: variances.iter().map(|&v| T::lit(v)).collect(),
        },
        coefficients: CircadianCoefficients::from_off_diagonal(3, 3, &flat)?,
        initial: InitialDistribution::uniform(3),
    };
    Ok(ScenarioSpec {
        theta_true,
        n_subjects: 100,
        days: 5,
        epoch_minutes: 5,
        seed: 20240101 + id as u64,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of subject `index` (0-based) under `master`.
pub fn subject_seed(master: u64, index: usize) -> u64 {
    splitmix64(master.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Identifier of subject `index` (0-based): `S001`, `S002`, ...
pub fn subject_id(index: usize) -> String {
    format!("S{:03}", index + 1)
}

fn sample_categorical<T: Scalar>(rng: &mut impl Rng, probs: &[T]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return k;
        }
    }
    // rounding left the cumulative sum just below 1
    probs.iter().rposition(|p| *p > T::zero()).unwrap_or(probs.len() - 1)
}

/// Simulates `n_epochs` epochs starting at `start_hour`.
pub fn simulate_series<T: Scalar>(
    theta: &ThetaParams<T>,
    n_epochs: usize,
    epoch_minutes: u32,
    start_hour: f64,
    seed: u64,
) -> Result<SimulatedSeries<T>> {
    theta.check()?;
    if n_epochs == 0 {
        return Err(Error::Argument("series length must be at least 1".into()));
    }
    if epoch_minutes == 0 {
        return Err(Error::Argument("epoch length must be positive".into()));
    }
    let m = theta.n_states();
    let mut observations = ObservationSeries {
        values: Vec::with_capacity(n_epochs),
        missing: vec![false; n_epochs],
        epoch_minutes,
        start_hour: T::lit(start_hour),
    };
    let periodic = theta.config.is_daily_periodic() && 1440 % epoch_minutes == 0;
    let period = if periodic { (1440 / epoch_minutes) as usize } else { n_epochs };
    let mut cache: Vec<Option<Vec<T>>> = vec![None; period.min(n_epochs)];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = theta.emission.variances.iter().map(|v| v.as_f64().sqrt()).collect();
    let mut states = Vec::with_capacity(n_epochs);
    let mut s = sample_categorical(&mut rng, &theta.initial.delta);
    for k in 0..n_epochs {
        if k > 0 {
            let slot = (k - 1) % cache.len();
            if cache[slot].is_none() {
                let x = harmonic_covariates(observations.t_hours(k - 1), &theta.config);
                let mut g = vec![T::zero(); m * m];
                fill_transition(&theta.coefficients, &x, &mut g).map_err(|(from, to)| Error::NonFinitePredictor {
                    from,
                    to,
                    t_hours: observations.t_hours(k - 1).as_f64(),
                })?;
                cache[slot] = Some(g);
            }
            let g = cache[slot].as_ref().expect("filled above");
            s = sample_categorical(&mut rng, &g[s * m..(s + 1) * m]);
        }
        states.push(s);
        let e: f64 = rng.sample(StandardNormal);
        observations.values.push(T::lit(theta.emission.means[s].as_f64() + sd[s] * e));
    }
    Ok(SimulatedSeries {
        states,
        observations,
        subject_id: String::new(),
    })
}

/// All subjects of a scenario, each starting at midnight.
pub fn simulate_scenario<T: Scalar>(spec: &ScenarioSpec<T>) -> Result<Vec<SimulatedSeries<T>>> {
    spec.check()?;
    (0..spec.n_subjects)
        .map(|i| simulate_subject(spec, i))
        .collect()
}

/// Subject `index` of a scenario; identical to the corresponding entry of
/// [`simulate_scenario`].
pub fn simulate_subject<T: Scalar>(spec: &ScenarioSpec<T>, index: usize) -> Result<SimulatedSeries<T>> {
    let mut series = simulate_series(
        &spec.theta_true,
        spec.series_len(),
        spec.epoch_minutes,
        0.0,
        subject_seed(spec.seed, index),
    )?;
    series.subject_id = subject_id(index);
    Ok(series)
}
