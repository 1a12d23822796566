//! Simulation study: simulate replicates, fit them, and tabulate metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bchmm_core::inference::{fit_mle, posterior_summary, run_hmc, FitSummary, MleFit};
use bchmm_core::metrics::{
    accumulated_state_prob_bias, gaussian_kl, replicate_metrics, state_probability_curve, ReplicateEstimate,
    ReplicateMetrics, StateProbabilityCurve,
};
use bchmm_core::simulate::{simulate_subject, subject_seed};
use bchmm_core::{parameter_names, Theta};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentPlan, Method};
use crate::error::{CliError, Result};

/// Offset separating optimizer streams from sampler streams.
const MLE_SEED_OFFSET: u64 = 0x6d6c_6500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesOutcome {
    pub summary: FitSummary,
    /// Fraction of retained draws with strictly increasing means.
    pub ordered_fraction: f64,
    /// `KL(true || estimated)` of each state's emission density.
    pub kl: Vec<f64>,
    pub state_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleOutcome {
    pub fit: MleFit<f64>,
    pub kl: Vec<f64>,
    pub state_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub subject_id: String,
    pub bayes: Option<Result<BayesOutcome, String>>,
    pub mle: Option<Result<MleOutcome, String>>,
    /// Wall-clock seconds per method, in plan order. Not serialized, so that
    /// outcome documents are reproducible.
    #[serde(skip)]
    pub seconds: Vec<(Method, f64)>,
}

impl ReplicateOutcome {
    fn all_failed(&self) -> bool {
        self.bayes.as_ref().is_none_or(|r| r.is_err()) && self.mle.as_ref().is_none_or(|r| r.is_err())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub plan: ExperimentPlan,
    pub replicates: Vec<ReplicateOutcome>,
    /// Metrics over the successful replicates of each method.
    pub bayes_metrics: Option<ReplicateMetrics>,
    pub mle_metrics: Option<ReplicateMetrics>,
}

impl ExperimentOutcome {
    pub fn bayes(&self) -> impl Iterator<Item = &BayesOutcome> {
        self.replicates.iter().filter_map(|r| r.bayes.as_ref()?.as_ref().ok())
    }

    pub fn mle(&self) -> impl Iterator<Item = &MleOutcome> {
        self.replicates.iter().filter_map(|r| r.mle.as_ref()?.as_ref().ok())
    }
}

fn emission_kl(truth: &Theta, est: &Theta) -> Result<Vec<f64>> {
    let (t, e) = (&truth.emission, &est.emission);
    (0..truth.n_states())
        .map(|j| Ok(gaussian_kl((t.means[j], t.variances[j]), (e.means[j], e.variances[j]))?))
        .collect()
}

fn run_bayes(plan: &ExperimentPlan, index: usize, sim: &bchmm_core::Simulated, truth: &StateProbabilityCurve) -> Result<BayesOutcome> {
    let mut mcmc = plan.mcmc.clone();
    mcmc.seed = subject_seed(plan.mcmc.seed, index);
    let draws = run_hmc(&sim.observations, &plan.spec.theta_true.config, &plan.hyper, &mcmc)?;
    let n = draws.n_draws().max(1);
    let ordered = draws
        .chains
        .iter()
        .flat_map(|c| &c.draws)
        .filter(|d| d.emission.means.windows(2).all(|w| w[0] < w[1]))
        .count();
    let summary = posterior_summary(&draws)?;
    let theta = summary.median_theta()?;
    Ok(BayesOutcome {
        ordered_fraction: ordered as f64 / n as f64,
        kl: emission_kl(&plan.spec.theta_true, &theta)?,
        state_bias: accumulated_state_prob_bias(&state_probability_curve(&theta)?, truth)?,
        summary,
    })
}

fn run_mle(plan: &ExperimentPlan, index: usize, sim: &bchmm_core::Simulated, truth: &StateProbabilityCurve) -> Result<MleOutcome> {
    let seed = subject_seed(plan.mcmc.seed.wrapping_add(MLE_SEED_OFFSET), index);
    let fit = fit_mle(&sim.observations, &plan.spec.theta_true.config, plan.n_starts, seed)?;
    Ok(MleOutcome {
        kl: emission_kl(&plan.spec.theta_true, &fit.theta)?,
        state_bias: accumulated_state_prob_bias(&state_probability_curve(&fit.theta)?, truth)?,
        fit,
    })
}

fn run_replicate(plan: &ExperimentPlan, index: usize, truth: &StateProbabilityCurve) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        index,
        subject_id: bchmm_core::simulate::subject_id(index),
        bayes: None,
        mle: None,
        seconds: Vec::new(),
    };
    let sim = match simulate_subject(&plan.spec, index) {
        Ok(sim) => sim,
        Err(e) => {
            let msg = format!("simulation failed: {e}");
            for &m in &plan.methods {
                match m {
                    Method::Bayes => out.bayes = Some(Err(msg.clone())),
                    Method::Mle => out.mle = Some(Err(msg.clone())),
                }
            }
            return out;
        }
    };
    for &method in &plan.methods {
        let start = Instant::now();
        match method {
            Method::Bayes => out.bayes = Some(run_bayes(plan, index, &sim, truth).map_err(|e| e.to_string())),
            Method::Mle => out.mle = Some(run_mle(plan, index, &sim, truth).map_err(|e| e.to_string())),
        }
        let secs = start.elapsed().as_secs_f64();
        log::info!("replicate {index} {} done in {secs:.1} s", method.label());
        out.seconds.push((method, secs));
    }
    out
}

/// Runs every replicate of the plan on a pool of `threads` workers (all
/// cores when `None`). Results depend only on the plan.
pub fn run_experiment(plan: &ExperimentPlan, threads: Option<usize>) -> Result<ExperimentOutcome> {
    let truth = state_probability_curve(&plan.spec.theta_true)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(e.to_string()))?;
    let replicates: Vec<ReplicateOutcome> = pool.install(|| {
        (0..plan.replicates)
            .into_par_iter()
            .map(|i| run_replicate(plan, i, &truth))
            .collect()
    });
    if replicates.iter().all(ReplicateOutcome::all_failed) {
        for r in &replicates {
            let bayes = r.bayes.as_ref().and_then(|x| x.as_ref().err());
            let mle = r.mle.as_ref().and_then(|x| x.as_ref().err());
            for e in bayes.into_iter().chain(mle) {
                log::error!("replicate {}: {e}", r.index);
            }
        }
        return Err(CliError::AllReplicatesFailed);
    }
    let mut outcome = ExperimentOutcome {
        plan: plan.clone(),
        replicates,
        bayes_metrics: None,
        mle_metrics: None,
    };
    let bayes: Vec<ReplicateEstimate> = outcome
        .bayes()
        .map(|b| ReplicateEstimate::from_summary(&b.summary))
        .collect::<bchmm_core::Result<_>>()?;
    if !bayes.is_empty() {
        outcome.bayes_metrics = Some(replicate_metrics(&bayes, &plan.spec.theta_true)?);
    }
    let mle: Vec<ReplicateEstimate> = outcome.mle().map(|m| ReplicateEstimate::from_mle(&m.fit)).collect();
    if !mle.is_empty() {
        outcome.mle_metrics = Some(replicate_metrics(&mle, &plan.spec.theta_true)?);
    }
    Ok(outcome)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn stats(v: &[f64]) -> [f64; 4] {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    [s.iter().sum::<f64>() / n as f64, median, s[0], s[n - 1]]
}

fn methods(o: &ExperimentOutcome) -> Vec<(Method, &ReplicateMetrics)> {
    [(Method::Bayes, &o.bayes_metrics), (Method::Mle, &o.mle_metrics)]
        .into_iter()
        .filter_map(|(m, r)| Some((m, r.as_ref()?)))
        .collect()
}

/// Per-parameter MAB, MMSE, MSD and coverage for each method.
pub fn parameter_table(o: &ExperimentOutcome) -> String {
    let truth = o.plan.spec.theta_true.to_flat();
    let mut s = String::from("method,parameter,truth,n_replicates,mab,mmse,msd,mcr\n");
    for (method, metrics) in methods(o) {
        for (p, t) in metrics.parameters.iter().zip(&truth) {
            let _ = writeln!(
                s,
                "{},{},{t},{},{},{},{},{}",
                method.label(),
                p.name,
                metrics.n_replicates,
                p.mab,
                p.mmse,
                opt(p.msd),
                opt(p.mcr)
            );
        }
    }
    s
}

/// Median, minimum and maximum accumulated state-probability bias.
pub fn state_bias_table(o: &ExperimentOutcome) -> String {
    let mut s = String::from("method,state,median,min,max\n");
    for (method, metrics) in methods(o) {
        for (j, b) in metrics.state_bias.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", method.label(), j + 1, b.median, b.min, b.max);
        }
    }
    s
}

/// Emission-density KL divergence from the truth per state.
pub fn kl_table(o: &ExperimentOutcome) -> String {
    let mut s = String::from("method,state,mean,median,min,max\n");
    let rows: [(Method, Vec<&Vec<f64>>); 2] = [
        (Method::Bayes, o.bayes().map(|b| &b.kl).collect()),
        (Method::Mle, o.mle().map(|m| &m.kl).collect()),
    ];
    for (method, kls) in rows.iter().filter(|(_, k)| !k.is_empty()) {
        for j in 0..o.plan.spec.theta_true.n_states() {
            let v: Vec<f64> = kls.iter().map(|k| k[j]).collect();
            let [mean, median, min, max] = stats(&v);
            let _ = writeln!(s, "{},{},{mean},{median},{min},{max}", method.label(), j + 1);
        }
    }
    s
}

/// One row per replicate and method with the emission estimates.
pub fn replicate_table(o: &ExperimentOutcome) -> String {
    let m = o.plan.spec.theta_true.n_states();
    let names = parameter_names(&o.plan.spec.theta_true.config);
    let mut s = String::from("replicate,subject_id,method,status");
    for name in &names[..2 * m] {
        s.push(',');
        s.push_str(name);
    }
    s.push_str(",max_rhat,min_ess_ratio,n_divergent,loglik,error\n");
    for r in &o.replicates {
        for (method, result) in [
            (Method::Bayes, r.bayes.as_ref().map(|x| x.as_ref().map(|b| b as &dyn Row))),
            (Method::Mle, r.mle.as_ref().map(|x| x.as_ref().map(|b| b as &dyn Row))),
        ] {
            let Some(result) = result else { continue };
            let _ = write!(s, "{},{},{}", r.index, r.subject_id, method.label());
            match result {
                Ok(row) => {
                    s.push_str(",ok");
                    for v in row.emission(m) {
                        let _ = write!(s, ",{v}");
                    }
                    let [a, b, c, d] = row.extras();
                    let _ = writeln!(s, ",{a},{b},{c},{d},");
                }
                Err(e) => {
                    s.push_str(",failed");
                    s.push_str(&",".repeat(2 * m + 4));
                    let _ = writeln!(s, ",\"{}\"", e.replace('"', "'"));
                }
            }
        }
    }
    s
}

trait Row {
    fn emission(&self, m: usize) -> Vec<f64>;
    fn extras(&self) -> [String; 4];
}

impl Row for BayesOutcome {
    fn emission(&self, m: usize) -> Vec<f64> {
        self.summary.parameters[..2 * m].iter().map(|p| p.median).collect()
    }

    fn extras(&self) -> [String; 4] {
        let rhat = self.summary.parameters.iter().filter_map(|p| p.rhat).fold(f64::NAN, f64::max);
        let ess = self.summary.parameters.iter().filter_map(|p| p.ess_ratio).fold(f64::NAN, f64::min);
        [rhat.to_string(), ess.to_string(), self.summary.n_divergent.to_string(), String::new()]
    }
}

impl Row for MleOutcome {
    fn emission(&self, m: usize) -> Vec<f64> {
        self.fit.theta.to_flat()[..2 * m].to_vec()
    }

    fn extras(&self) -> [String; 4] {
        [String::new(), String::new(), String::new(), self.fit.loglik.to_string()]
    }
}

/// Writes the four tables into `dir` and returns their paths.
pub fn write_tables(o: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let label = o.plan.label();
    let tables = [
        ("parameters", parameter_table(o)),
        ("state_bias", state_bias_table(o)),
        ("kld", kl_table(o)),
        ("replicates", replicate_table(o)),
    ];
    tables
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(format!("{label}_{name}.csv"));
            std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
