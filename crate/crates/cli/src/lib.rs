//! Command-line front end: configuration loading, subcommand dispatch and
//! report files.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
//! or model errors.

mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use cfeval::bundle::{load_bundle, save_bundle};
use cfeval::eventlog::{
    extract_prefix_dataset, fmt_f64, parse_event_log, sample_at, write_event_log, EventLog, ExtractMode, InterventionSpec, LogSchema,
    PrefixSample,
};
use cfeval::experiment::{accuracy_run, delta_tag, evaluate_bundle, realism_run, AccuracyConfig, FitSettings, RealismConfig};
use cfeval::gradcheck::{run_all, TOLERANCE};
use cfeval::heads::HeadKind;
use cfeval::learners::{sample_members, BaseKind, EvaluatorBundle};
use cfeval::rng::Stream;
use cfeval::simulate::{generate_log, log_schema, outcome_head, SimConfig, SimIntervention};
use cfeval::stattests::realism_suite;
use cfeval::train::{fit_evaluator, LearnerChoice};

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "cfeval", version, about = "Train and use generative counterfactual evaluators", arg_required_else_help = true)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set evaluate.n_test=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train and test event logs for each confounding level.
    Simulate(ConfigArgs),
    /// Fit an evaluator on an event log and save it as a bundle.
    TrainEvaluator(ConfigArgs),
    /// Sample outcomes from a bundle for the cases of a log.
    Generate(ConfigArgs),
    /// Run the accuracy pipeline, or score one stored bundle.
    Evaluate(ConfigArgs),
    /// Run the realism test suite on stored or freshly generated pairs.
    Stattest(ConfigArgs),
    /// Compare analytic and numeric gradients.
    Gradcheck(ConfigArgs),
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => Err(CliError::Usage(e.to_string())),
        },
        None => dispatch(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    let load = |a: &ConfigArgs| RunConfig::load(a.config.as_deref(), &a.set);
    match command {
        Command::Simulate(a) => simulate(&load(a)?),
        Command::TrainEvaluator(a) => train_evaluator(&load(a)?),
        Command::Generate(a) => generate(&load(a)?),
        Command::Evaluate(a) => evaluate(&load(a)?),
        Command::Stattest(a) => stattest(&load(a)?),
        Command::Gradcheck(a) => gradcheck(&load(a)?),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn distinct(paths: &[&Path]) -> Result<(), CliError> {
    for (i, a) in paths.iter().enumerate() {
        if paths[i + 1..].contains(a) {
            return Err(CliError::Usage(format!("path {} is used for more than one file", a.display())));
        }
    }
    Ok(())
}

fn required<T>(value: Option<T>, key: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required key {key}")))
}

/// A simulator intervention by name, or a full custom spec.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum InterventionChoice {
    Named(SimIntervention),
    Custom(InterventionSpec),
}

impl Default for InterventionChoice {
    fn default() -> Self {
        Self::Named(SimIntervention::SetRate)
    }
}

impl InterventionChoice {
    fn spec(&self) -> InterventionSpec {
        match self {
            Self::Named(k) => k.spec(),
            Self::Custom(s) => s.clone(),
        }
    }
}

fn read_log(path: &Path, schema: &LogSchema) -> Result<EventLog, CliError> {
    parse_event_log(&read(path)?, schema).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateSection {
    out_dir: PathBuf,
    n_train: usize,
    n_test: usize,
    deltas: Vec<f64>,
    intervention: SimIntervention,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { out_dir: "data".into(), n_train: 4000, n_test: 500, deltas: vec![0.75, 0.999], intervention: SimIntervention::SetRate }
    }
}

fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let s: SimulateSection = cfg.section("simulate")?;
    if s.deltas.is_empty() {
        return Err(CliError::Usage("[simulate].deltas is empty".into()));
    }
    let schema = log_schema();
    for &delta in &s.deltas {
        let tag = delta_tag(delta);
        for (name, n_cases, first_case) in [("train", s.n_train, 0), ("test", s.n_test, s.n_train)] {
            let sim = SimConfig { n_cases, delta, intervention: s.intervention, seed: cfg.seed, first_case };
            let log = generate_log(&sim).map_err(data)?;
            write(&s.out_dir.join(format!("{name}_{tag}.csv")), &write_event_log(&log, &schema))?;
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    log: Option<PathBuf>,
    out: Option<PathBuf>,
    /// Directory for per-network training curves.
    reports_dir: Option<PathBuf>,
    learner: LearnerChoice,
    base: BaseKind,
    intervention: InterventionChoice,
    schema: Option<LogSchema>,
    head: Option<HeadKind>,
    fit: FitSettings,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            log: None,
            out: None,
            reports_dir: None,
            learner: LearnerChoice::Ensemble,
            base: BaseKind::Mlp,
            intervention: InterventionChoice::default(),
            schema: None,
            head: None,
            fit: FitSettings::default(),
        }
    }
}

fn train_evaluator(cfg: &RunConfig) -> Result<(), CliError> {
    let s: TrainSection = cfg.section("train_evaluator")?;
    let log_path = required(s.log, "train_evaluator.log")?;
    let out = required(s.out, "train_evaluator.out")?;
    distinct(&[&log_path, &out])?;
    let log = read_log(&log_path, &s.schema.unwrap_or_else(log_schema))?;
    let spec = s.intervention.spec();
    let samples = extract_prefix_dataset(&log, &spec, ExtractMode::Training).map_err(data)?;
    let mut ecfg = s.fit.evaluator_config(s.learner, s.base, cfg.seed);
    ecfg.head = s.head.unwrap_or_else(|| outcome_head(s.fit.flow_components));
    let fit = fit_evaluator(&samples, &spec, &ecfg).map_err(data)?;
    save_bundle(&fit.bundle, &out).map_err(data)?;
    println!("wrote {}", out.display());
    if let Some(dir) = s.reports_dir {
        for (name, report) in &fit.reports {
            write(&dir.join(format!("{name}_fit.csv")), &report.to_csv())?;
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateSection {
    bundle: Option<PathBuf>,
    log: Option<PathBuf>,
    /// CSV with `case_id,treatment[,step]`; without it treatments are drawn
    /// from the bundle's treatment model.
    actions: Option<PathBuf>,
    out: Option<PathBuf>,
    schema: Option<LogSchema>,
    n_samples: usize,
    alpha: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { bundle: None, log: None, actions: None, out: None, schema: None, n_samples: 1, alpha: 0.0 }
    }
}

#[derive(Debug, Deserialize)]
struct ActionRow {
    case_id: String,
    treatment: u32,
    #[serde(default)]
    step: Option<usize>,
}

fn read_actions(path: &Path) -> Result<Vec<ActionRow>, CliError> {
    let text = read(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<ActionRow>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Decision-point samples and arms for each requested action.
fn action_samples(log: &EventLog, bundle: &EvaluatorBundle, actions: &[ActionRow]) -> Result<Vec<(PrefixSample, usize)>, CliError> {
    let spec = &bundle.intervention;
    let cases: HashMap<&str, _> = log.cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    actions
        .iter()
        .map(|a| {
            let case = cases.get(a.case_id.as_str()).ok_or_else(|| CliError::Data(format!("unknown case {}", a.case_id)))?;
            let arm = spec
                .arm_of(a.treatment)
                .ok_or_else(|| CliError::Data(format!("treatment {} is not an arm of {}", a.treatment, spec.name)))?;
            let points = spec.points(&case.events);
            let point = match a.step {
                Some(p) if points.contains(&p) => p,
                Some(p) => return Err(CliError::Data(format!("{}: {p} is not an intervention point", a.case_id))),
                None => *points.last().ok_or_else(|| CliError::Data(format!("{}: no intervention point", a.case_id)))?,
            };
            Ok((sample_at(case, point, a.treatment, 0.0), arm))
        })
        .collect()
}

fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let s: GenerateSection = cfg.section("generate")?;
    let bundle_path = required(s.bundle, "generate.bundle")?;
    let log_path = required(s.log, "generate.log")?;
    let out = required(s.out, "generate.out")?;
    let mut inputs = vec![bundle_path.as_path(), log_path.as_path(), out.as_path()];
    inputs.extend(s.actions.as_deref());
    distinct(&inputs)?;
    let bundle = load_bundle(&bundle_path).map_err(data)?;
    let log = read_log(&log_path, &s.schema.unwrap_or_else(log_schema))?;
    let stream = Stream::new(cfg.seed).with("generate");
    let arms = bundle.intervention.arms();
    let mut text = String::new();
    match &s.actions {
        Some(path) => {
            let rows = action_samples(&log, &bundle, &read_actions(path)?)?;
            let mut draws: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
            for arm in 0..bundle.n_arms() {
                let which: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].1 == arm).collect();
                if which.is_empty() {
                    continue;
                }
                let samples: Vec<PrefixSample> = which.iter().map(|&r| rows[r].0.clone()).collect();
                let idx: Vec<usize> = (0..which.len()).collect();
                let params = bundle.outcome.params_for_arm(&bundle.inputs(&samples), &idx, arm).map_err(data)?;
                for (&r, p) in which.iter().zip(&params) {
                    let case_stream = stream.with(&rows[r].0.case_id);
                    draws[r] = sample_members(&bundle.head, p, bundle.outcome.mode(), s.n_samples, case_stream).map_err(data)?;
                }
            }
            text.push_str("case_id,treatment,step,sample,outcome\n");
            for ((sample, arm), ys) in rows.iter().zip(&draws) {
                for (i, y) in ys.iter().enumerate() {
                    text.push_str(&format!("{},{},{},{i},{}\n", sample.case_id, arms[*arm], sample.intervention_step, fmt_f64(*y)));
                }
            }
        }
        None => {
            let samples = extract_prefix_dataset(&log, &bundle.intervention, ExtractMode::DecisionOnly).map_err(data)?;
            if samples.is_empty() {
                return Err(CliError::Data("log has no case with an outcome and an intervention point".into()));
            }
            let drawn = bundle.generate(&bundle.inputs(&samples), s.alpha, stream).map_err(data)?;
            text.push_str("case_id,treatment,outcome\n");
            for (sample, (arm, y)) in samples.iter().zip(drawn) {
                text.push_str(&format!("{},{},{}\n", sample.case_id, arms[arm], fmt_f64(y)));
            }
        }
    }
    write(&out, &text)
}

fn own_path(own: &toml::Table, key: &str) -> Result<Option<PathBuf>, CliError> {
    match own.get(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(v) => Err(CliError::Usage(format!("{key} must be a path string, got {v}"))),
    }
}

fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let (own, acc): (_, AccuracyConfig) = cfg.pipeline_section("evaluate", &["out_dir", "bundle"])?;
    let out_dir = own_path(&own, "out_dir")?.unwrap_or_else(|| "reports".into());
    match own_path(&own, "bundle")? {
        Some(path) => {
            let bundle = load_bundle(&path).map_err(data)?;
            let report = evaluate_bundle(&acc, &bundle).map_err(data)?;
            write(&out_dir.join(format!("{}_cases.csv", report.evaluator)), &report.cases_csv())?;
            write(&out_dir.join(format!("{}_summary.json", report.evaluator)), &report.summary_json())?;
        }
        None => {
            let outcome = accuracy_run(&acc).map_err(data)?;
            for name in outcome.write(&out_dir).map_err(data)? {
                println!("wrote {}", out_dir.join(name).display());
            }
        }
    }
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    #[derive(Deserialize)]
    struct Pair {
        t: f64,
        y: f64,
    }
    let text = read(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map(|p: Pair| (p.t, p.y)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn pairs_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("t,y\n");
    for (t, y) in pairs {
        out.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*y)));
    }
    out
}

fn stattest(cfg: &RunConfig) -> Result<(), CliError> {
    let (own, realism): (_, RealismConfig) = cfg.pipeline_section("stattest", &["out_dir", "real", "generated"])?;
    let out_dir = own_path(&own, "out_dir")?.unwrap_or_else(|| "realism".into());
    let report = match (own_path(&own, "real")?, own_path(&own, "generated")?) {
        (Some(real), Some(generated)) => {
            realism_suite(&read_pairs(&real)?, &read_pairs(&generated)?, realism.n_permutations, cfg.seed).map_err(data)?
        }
        (None, None) => {
            let out = realism_run(&realism).map_err(data)?;
            write(&out_dir.join("real_pairs.csv"), &pairs_csv(&out.real))?;
            write(&out_dir.join("generated_pairs.csv"), &pairs_csv(&out.generated))?;
            save_bundle(&out.bundle, &out_dir.join("ensemble_bundle.json")).map_err(data)?;
            out.report
        }
        _ => return Err(CliError::Usage("[stattest] needs both `real` and `generated`, or neither".into())),
    };
    write(&out_dir.join("realism.csv"), &report.to_csv())?;
    println!("{} of {} rows pass", report.passes(), report.rows.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckSection {
    seeds: u64,
    out: Option<PathBuf>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { seeds: 20, out: None }
    }
}

fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let s: GradcheckSection = cfg.section("gradcheck")?;
    let rows = run_all(s.seeds).map_err(data)?;
    if let Some(out) = &s.out {
        let mut text = String::from("target,seed,rel_err\n");
        for r in &rows {
            text.push_str(&format!("{},{},{:e}\n", r.target, r.seed, r.rel_err));
        }
        write(out, &text)?;
    }
    let worst = rows.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).ok_or_else(|| CliError::Usage("no seeds".into()))?;
    println!("{} checks, worst relative error {:e} ({} at seed {})", rows.len(), worst.rel_err, worst.target, worst.seed);
    if worst.rel_err < TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "gradient check failed: {} at seed {} has relative error {:e}",
            worst.target, worst.seed, worst.rel_err
        )))
    }
}
