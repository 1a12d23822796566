use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use bchmm_cli::config::{ExperimentPlan, FileConfig, Method};
use bchmm_cli::experiment::{run_experiment, write_tables};
use bchmm_cli::ingest::{load_series, write_simulated, SubjectSeries, Transform};
use bchmm_cli::manifest::{digest, RunManifest};
use bchmm_cli::report::{
    curve_table, emit_subject_report, rar_row, read_versioned, write_json, FitDocument, SubjectReport, RAR_HEADER,
    SCHEMA_VERSION,
};
use bchmm_cli::CliError;
use bchmm_core::inference::{fit_mle, posterior_summary, run_hmc};
use bchmm_core::{builtin_scenario, simulate_scenario, ModelConfig};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "bchmm", version, about = "Circadian hidden Markov models for actigraphy")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed; overrides seeds in the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 5)]
    epoch_minutes: u32,
    #[arg(long, global = true, value_enum, default_value_t = Transform::Sqrt)]
    transform: Transform,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate subjects from a built-in or configured scenario.
    Simulate {
        #[arg(long)]
        scenario: Option<u8>,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Posterior sampling for each subject of an input table.
    FitBayes(FitArgs),
    /// Maximum-likelihood fit for each subject of an input table.
    FitMle {
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 10)]
        n_starts: usize,
    },
    /// Rest-activity rhythm measures from fit documents.
    Rar {
        #[arg(long = "fit", required = true)]
        fits: Vec<PathBuf>,
    },
    /// Simulation study described by the configuration file.
    Experiment,
    /// Subject reports (curve, rhythm measures, summaries) from fit documents.
    Report {
        #[arg(long = "fit", required = true)]
        fits: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct FitArgs {
    /// Minute-level (`subject_id,minute_index,mims`) or simulated table.
    #[arg(long)]
    input: PathBuf,
    /// Restrict to these subjects.
    #[arg(long = "subject")]
    subjects: Vec<String>,
}

struct Run<'a> {
    global: &'a Global,
    config: FileConfig,
    config_text: String,
    manifest: RunManifest,
}

impl Run<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.global.out_dir.join(name)
    }

    fn record(&mut self, path: &Path) {
        self.manifest.add_artifact(&self.global.out_dir.clone(), path);
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.global.threads {
            b = b.num_threads(n);
        }
        Ok(b.build()?)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::FitBayes(_) => "fit-bayes",
        Command::FitMle { .. } => "fit-mle",
        Command::Rar { .. } => "rar",
        Command::Experiment => "experiment",
        Command::Report { .. } => "report",
    }
}

fn read_inputs(paths: &[&Path]) -> Result<Vec<Vec<u8>>> {
    paths
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| CliError::io(*p, e).into()))
        .collect()
}

fn select(series: Vec<SubjectSeries>, wanted: &[String]) -> Result<Vec<SubjectSeries>> {
    if wanted.is_empty() {
        return Ok(series);
    }
    let picked: Vec<SubjectSeries> = series.into_iter().filter(|s| wanted.contains(&s.subject_id)).collect();
    if picked.len() != wanted.len() {
        return Err(CliError::Data(format!("some of the requested subjects {wanted:?} are not in the input")).into());
    }
    Ok(picked)
}

fn model_config(run: &Run) -> Result<ModelConfig> {
    let model = run.config.model.clone().unwrap_or_else(|| ModelConfig {
        epoch_minutes: run.global.epoch_minutes,
        ..ModelConfig::default()
    });
    if model.epoch_minutes != run.global.epoch_minutes {
        return Err(CliError::Config(format!(
            "[model] epoch_minutes {} disagrees with --epoch-minutes {}",
            model.epoch_minutes, run.global.epoch_minutes
        ))
        .into());
    }
    ModelConfig::new(model.n_states, model.omegas, model.epoch_minutes)
        .map_err(|e| CliError::Config(e.to_string()).into())
}

fn simulate(run: &mut Run, scenario: Option<u8>, subjects: Option<usize>) -> Result<()> {
    let mut spec = match (scenario, &run.config.scenario) {
        (Some(id), _) => builtin_scenario::<f64>(id).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(_)) => run.config.scenario_spec()?.1,
        (None, None) => builtin_scenario::<f64>(1)?,
    };
    if let Some(n) = subjects {
        spec.n_subjects = n;
    }
    if let Some(seed) = run.global.seed {
        spec.seed = seed;
    }
    run.manifest.master_seed = Some(spec.seed);
    let sims = simulate_scenario(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let path = run.out("simulated.csv");
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_simulated(std::io::BufWriter::new(file), &sims)?;
    run.record(&path);
    let truth = run.out("truth.json");
    write_json(&spec, &truth)?;
    run.record(&truth);
    Ok(())
}

fn fit(run: &mut Run, args: &FitArgs, method: Method, n_starts: usize) -> Result<()> {
    let series = select(
        load_series(&args.input, run.global.epoch_minutes, run.global.transform)?,
        &args.subjects,
    )?;
    let model = model_config(run)?;
    let mut mcmc = run.config.mcmc_or_default()?;
    if let Some(seed) = run.global.seed {
        mcmc.seed = seed;
    }
    let hyper = run.config.hyper_for(model.n_states)?;
    run.manifest.master_seed = Some(mcmc.seed);
    let fits_dir = run.out("fits");
    std::fs::create_dir_all(&fits_dir).map_err(|e| CliError::io(&fits_dir, e))?;

    let pool = run.pool()?;
    let docs: Vec<Result<FitDocument, String>> = pool.install(|| {
        series
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = bchmm_core::simulate::subject_seed(mcmc.seed, i);
                let doc = match method {
                    Method::Bayes => {
                        let mcmc = bchmm_core::inference::McmcConfig { seed, ..mcmc.clone() };
                        run_hmc(&s.series, &model, &hyper, &mcmc)
                            .and_then(|d| posterior_summary(&d))
                            .and_then(|summary| {
                                Ok(FitDocument {
                                    schema_version: SCHEMA_VERSION,
                                    subject_id: s.subject_id.clone(),
                                    method,
                                    theta: summary.median_theta()?,
                                    summary: Some(summary),
                                    loglik: None,
                                    traces: None,
                                })
                            })
                    }
                    Method::Mle => fit_mle(&s.series, &model, n_starts, seed).map(|f| FitDocument {
                        schema_version: SCHEMA_VERSION,
                        subject_id: s.subject_id.clone(),
                        method,
                        theta: f.theta,
                        summary: None,
                        loglik: Some(f.loglik),
                        traces: Some(f.traces),
                    }),
                };
                doc.map_err(|e| format!("subject {}: {e}", s.subject_id))
            })
            .collect()
    });
    let mut ok = 0;
    for doc in docs {
        match doc {
            Ok(doc) => {
                let path = fits_dir.join(format!("{}.{}.json", doc.subject_id, method.label()));
                write_json(&doc, &path)?;
                run.record(&path);
                ok += 1;
            }
            Err(e) => log::error!("{e}"),
        }
    }
    if ok == 0 {
        return Err(CliError::Data("no subject could be fitted".into()).into());
    }
    Ok(())
}

fn reports(fits: &[PathBuf]) -> Result<Vec<SubjectReport>> {
    fits.iter()
        .map(|p| {
            let doc: FitDocument = read_versioned(p)?;
            Ok(SubjectReport::from_fit(&doc)?)
        })
        .collect()
}

fn rar(run: &mut Run, fits: &[PathBuf]) -> Result<()> {
    let mut table = format!("{RAR_HEADER}\n");
    for r in reports(fits)? {
        table.push_str(&rar_row(&r));
        table.push('\n');
    }
    std::fs::create_dir_all(&run.global.out_dir).map_err(|e| CliError::io(&run.global.out_dir, e))?;
    let path = run.out("rar.csv");
    std::fs::write(&path, table).map_err(|e| CliError::io(&path, e))?;
    run.record(&path);
    Ok(())
}

fn report(run: &mut Run, fits: &[PathBuf]) -> Result<()> {
    let dir = run.out("reports");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for r in reports(fits)? {
        let stem = format!("{}.{}", r.subject_id, r.method.label());
        let json = dir.join(format!("{stem}.report.json"));
        emit_subject_report(&r, &json)?;
        run.record(&json);
        let csv = dir.join(format!("{stem}.curve.csv"));
        std::fs::write(&csv, curve_table(&r.curve)).map_err(|e| CliError::io(&csv, e))?;
        run.record(&csv);
    }
    Ok(())
}

fn experiment(run: &mut Run) -> Result<()> {
    if run.global.config.is_none() {
        return Err(CliError::Config("experiment needs --config".into()).into());
    }
    let plan = ExperimentPlan::from_config(&run.config, run.global.seed)?;
    run.manifest.master_seed = Some(plan.spec.seed);
    let plan_json = serde_json::to_vec(&plan)?;
    run.manifest.config_digest = digest([run.config_text.as_bytes(), plan_json.as_slice()]);
    let start = Instant::now();
    let outcome = run_experiment(&plan, run.global.threads)?;
    run.manifest.timings.insert("fit".into(), start.elapsed().as_secs_f64());
    for r in &outcome.replicates {
        for (m, secs) in &r.seconds {
            run.manifest.timings.insert(format!("replicate_{:03}_{}", r.index, m.label()), *secs);
        }
    }
    for path in write_tables(&outcome, &run.global.out_dir)? {
        run.record(&path);
    }
    let fits = run.out(&format!("{}_outcome.json", plan.label()));
    write_json(&outcome, &fits)?;
    run.record(&fits);
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let (config, config_text) = match &cli.global.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (FileConfig::parse(&text)?, text)
        }
        None => (FileConfig::default(), String::new()),
    };
    let name = command_name(&cli.command);
    let inputs: Vec<&Path> = match &cli.command {
        Command::FitBayes(a) | Command::FitMle { fit: a, .. } => vec![a.input.as_path()],
        Command::Rar { fits } | Command::Report { fits } => fits.iter().map(PathBuf::as_path).collect(),
        _ => Vec::new(),
    };
    let input_bytes = read_inputs(&inputs)?;
    let seed_text = format!("{:?}|{}|{:?}", cli.global.seed, cli.global.epoch_minutes, cli.global.transform);
    let config_digest = digest(
        [name.as_bytes(), config_text.as_bytes(), seed_text.as_bytes()]
            .into_iter()
            .chain(input_bytes.iter().map(Vec::as_slice)),
    );
    std::fs::create_dir_all(&cli.global.out_dir).map_err(|e| CliError::io(&cli.global.out_dir, e))?;
    let mut run = Run {
        global: &cli.global,
        config,
        config_text,
        manifest: RunManifest::new(name, config_digest, cli.global.seed),
    };
    let start = Instant::now();
    match &cli.command {
        Command::Simulate { scenario, subjects } => simulate(&mut run, *scenario, *subjects)?,
        Command::FitBayes(args) => fit(&mut run, args, Method::Bayes, 0)?,
        Command::FitMle { fit: args, n_starts } => {
            if *n_starts == 0 {
                return Err(CliError::Config("--n-starts must be at least 1".into()).into());
            }
            fit(&mut run, args, Method::Mle, *n_starts)?
        }
        Command::Rar { fits } => rar(&mut run, fits)?,
        Command::Experiment => experiment(&mut run)?,
        Command::Report { fits } => report(&mut run, fits)?,
    }
    run.manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    run.manifest.write(&cli.global.out_dir).context("writing manifest")?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CliError>() {
        Some(e) => e.exit_code() as u8,
        None if err.downcast_ref::<bchmm_core::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
