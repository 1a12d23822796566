//! TOML run configuration.
//!
//! ```toml
//! [scenario]          # ScenarioSpec fields; `id` selects a built-in design
//! id = 1
//! n_subjects = 100
//!
//! [mcmc]              # McmcConfig fields
//! n_iter = 4000
//! n_warmup = 2000
//!
//! [hyper]             # HyperParams fields
//! sigma2_beta = 10.0
//!
//! [experiment]
//! replicates = 5
//! methods = ["bayes", "mle"]
//! n_starts = 10
//! ```

use std::path::Path;

use bchmm_core::inference::McmcConfig;
use bchmm_core::{builtin_scenario, Hyper, ModelConfig, Scenario, Theta};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bayes,
    Mle,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::Bayes => "bayes",
            Self::Mle => "mle",
        }
    }
}

/// `[scenario]`: a built-in design by `id`, with any `ScenarioSpec` field
/// overriding it. Without `id`, `theta_true` is required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub id: Option<u8>,
    pub theta_true: Option<Theta>,
    pub n_subjects: Option<usize>,
    pub days: Option<usize>,
    pub epoch_minutes: Option<u32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub replicates: usize,
    pub methods: Vec<Method>,
    /// Optimizer starts per maximum-likelihood fit.
    pub n_starts: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            replicates: 5,
            methods: vec![Method::Bayes, Method::Mle],
            n_starts: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<ScenarioSection>,
    /// Model structure for fitting ingested data.
    pub model: Option<ModelConfig>,
    pub mcmc: Option<McmcConfig>,
    pub hyper: Option<Hyper>,
    pub experiment: Option<ExperimentSection>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn mcmc_or_default(&self) -> Result<McmcConfig> {
        let mcmc = self.mcmc.clone().unwrap_or_default();
        mcmc.check().map_err(config_error)?;
        Ok(mcmc)
    }

    pub fn hyper_for(&self, n_states: usize) -> Result<Hyper> {
        let hyper = self
            .hyper
            .clone()
            .unwrap_or_else(|| Hyper::weakly_informative(n_states));
        hyper.check(n_states).map_err(config_error)?;
        Ok(hyper)
    }

    /// Scenario with overrides applied.
    pub fn scenario_spec(&self) -> Result<(Option<u8>, Scenario)> {
        let section = self
            .scenario
            .clone()
            .ok_or_else(|| CliError::Config("missing [scenario] section".into()))?;
        let mut spec = match (section.id, section.theta_true) {
            (Some(id), theta) => {
                let mut spec = builtin_scenario::<f64>(id).map_err(config_error)?;
                if let Some(theta) = theta {
                    spec.theta_true = theta;
                }
                spec
            }
            (None, Some(theta)) => Scenario {
                epoch_minutes: theta.config.epoch_minutes,
                theta_true: theta,
                n_subjects: 100,
                days: 5,
                seed: 1,
            },
            (None, None) => return Err(CliError::Config("[scenario] needs `id` or `theta_true`".into())),
        };
        if let Some(v) = section.n_subjects {
            spec.n_subjects = v;
        }
        if let Some(v) = section.days {
            spec.days = v;
        }
        if let Some(v) = section.epoch_minutes {
            spec.epoch_minutes = v;
        }
        if let Some(v) = section.seed {
            spec.seed = v;
        }
        spec.check().map_err(config_error)?;
        spec.theta_true.check().map_err(config_error)?;
        Ok((section.id, spec))
    }
}

fn config_error(e: bchmm_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub scenario_id: Option<u8>,
    pub spec: Scenario,
    pub mcmc: McmcConfig,
    pub hyper: Hyper,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub n_starts: usize,
}

impl ExperimentPlan {
    /// Validated plan. `seed` replaces both the scenario and sampler seeds.
    pub fn from_config(config: &FileConfig, seed: Option<u64>) -> Result<Self> {
        let (scenario_id, mut spec) = config.scenario_spec()?;
        let mut mcmc = config.mcmc_or_default()?;
        if let Some(seed) = seed {
            spec.seed = seed;
            mcmc.seed = seed;
        }
        let hyper = config.hyper_for(spec.theta_true.n_states())?;
        let section = config.experiment.clone().unwrap_or_default();
        if section.replicates == 0 {
            return Err(CliError::Config("experiment.replicates must be at least 1".into()));
        }
        if section.replicates > spec.n_subjects {
            return Err(CliError::Config(format!(
                "experiment.replicates ({}) exceeds scenario.n_subjects ({})",
                section.replicates, spec.n_subjects
            )));
        }
        let mut methods = section.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.is_empty() {
            return Err(CliError::Config("experiment.methods is empty".into()));
        }
        if methods.contains(&Method::Mle) && section.n_starts == 0 {
            return Err(CliError::Config("experiment.n_starts must be at least 1".into()));
        }
        Ok(Self {
            scenario_id,
            spec,
            mcmc,
            hyper,
            replicates: section.replicates,
            methods,
            n_starts: section.n_starts,
        })
    }

    /// File-name stem for the plan's tables.
    pub fn label(&self) -> String {
        match self.scenario_id {
            Some(id) => format!("scenario{id}"),
            None => "scenario".into(),
        }
    }
}
