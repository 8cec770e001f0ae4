//! End-to-end pipelines on the built-in simulator: realism of generated
//! `(T, Y)` pairs, and evaluator accuracy over a grid of confounding levels.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::bundle_to_string;
use crate::encode::EncoderConfig;
use crate::evalpipe::{evaluate_methods, EvalError, EvaluationReport, GroundTruth, Policy, DEFAULT_SAMPLES};
use crate::eventlog::{extract_prefix_dataset, ExtractMode, LogError, PrefixSample};
use crate::learners::{BaseKind, EvaluatorBundle, LearnError, LearnerKind, OutcomeEvaluator};
use crate::rng::Stream;
use crate::simulate::{generate_cases, outcome_head, to_event_log, SimCase, SimConfig, SimError, SimIntervention};
use crate::stattests::{realism_suite, StatError, TestSuiteReport, DEFAULT_PERMUTATIONS};
use crate::train::{fit_evaluator, fit_policy_estimator, EvaluatorConfig, FitReport, LearnerChoice, SearchSpace, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error("no confounding level given")]
    NoDelta,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Network training settings shared by every fit in a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub train: TrainConfig,
    pub search: SearchSpace,
    pub encoder: EncoderConfig,
    pub flow_components: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig { max_epochs: 200, patience: 10, ..TrainConfig::default() },
            search: SearchSpace { learning_rates: vec![1e-2, 3e-3, 1e-3], budget: 3, ..SearchSpace::default() },
            encoder: EncoderConfig::default(),
            flow_components: crate::heads::DEFAULT_FLOW_COMPONENTS,
        }
    }
}

impl FitSettings {
    pub fn evaluator_config(&self, learner: LearnerChoice, base: BaseKind, seed: u64) -> EvaluatorConfig {
        EvaluatorConfig {
            train: self.train.clone(),
            search: self.search.clone(),
            encoder: self.encoder,
            ..EvaluatorConfig::new(learner, base, outcome_head(self.flow_components), seed)
        }
    }
}

pub fn samples_of(cases: &[SimCase], kind: SimIntervention, mode: ExtractMode) -> Result<Vec<PrefixSample>, LogError> {
    extract_prefix_dataset(&to_event_log(cases), &kind.spec(), mode)
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|source| ExperimentError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealismConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub delta: f64,
    pub intervention: SimIntervention,
    pub base: BaseKind,
    /// Deconfounding knob used for generated treatments.
    pub alpha: f64,
    pub n_permutations: usize,
    pub fit: FitSettings,
}

impl Default for RealismConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 4000,
            n_heldout: 1000,
            delta: 0.9,
            intervention: SimIntervention::SetRate,
            base: BaseKind::Mlp,
            alpha: 0.0,
            n_permutations: DEFAULT_PERMUTATIONS,
            fit: FitSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RealismOutcome {
    pub bundle: EvaluatorBundle,
    pub fit_reports: Vec<(String, FitReport)>,
    pub real: Vec<(f64, f64)>,
    pub generated: Vec<(f64, f64)>,
    pub report: TestSuiteReport,
}

/// Generated `(T, Y)` for `samples`, with treatment codes as `T`.
pub fn generate_pairs(
    bundle: &EvaluatorBundle,
    samples: &[PrefixSample],
    alpha: f64,
    stream: Stream,
) -> Result<Vec<(f64, f64)>, LearnError> {
    let arms = bundle.intervention.arms();
    let drawn = bundle.generate(&bundle.inputs(samples), alpha, stream)?;
    Ok(drawn.into_iter().map(|(a, y)| (arms[a] as f64, y)).collect())
}

/// Trains an ensemble evaluator and compares its generated `(T, Y)` on
/// held-out cases with the recorded ones.
pub fn realism_run(cfg: &RealismConfig) -> Result<RealismOutcome, ExperimentError> {
    let sim = |n_cases, first_case| SimConfig { n_cases, delta: cfg.delta, intervention: cfg.intervention, seed: cfg.seed, first_case };
    let train = generate_cases(&sim(cfg.n_train, 0))?;
    let heldout = generate_cases(&sim(cfg.n_heldout, cfg.n_train))?;
    let spec = cfg.intervention.spec();
    let ecfg = cfg.fit.evaluator_config(LearnerChoice::Ensemble, cfg.base, cfg.seed);
    let fit = fit_evaluator(&samples_of(&train, cfg.intervention, ExtractMode::Training)?, &spec, &ecfg)?;
    let bundle = fit.bundle;
    let test = samples_of(&heldout, cfg.intervention, ExtractMode::DecisionOnly)?;
    let real: Vec<(f64, f64)> = test.iter().map(|s| (s.treatment as f64, s.outcome)).collect();
    let generated = generate_pairs(&bundle, &test, cfg.alpha, Stream::new(cfg.seed).with("generate"))?;
    let report = realism_suite(&real, &generated, cfg.n_permutations, cfg.seed)?;
    Ok(RealismOutcome { bundle, fit_reports: fit.reports, real, generated, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccuracyConfig {
    pub seed: u64,
    pub n_train: usize,
    /// Separate cases for the policies' own outcome estimators.
    pub n_estimator_train: usize,
    pub n_test: usize,
    pub n_samples: usize,
    pub deltas: Vec<f64>,
    pub intervention: SimIntervention,
    pub base: BaseKind,
    pub fit: FitSettings,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 4000,
            n_estimator_train: 1000,
            n_test: 500,
            n_samples: DEFAULT_SAMPLES,
            deltas: vec![0.75, 0.999],
            intervention: SimIntervention::SetRate,
            base: BaseKind::Mlp,
            fit: FitSettings::default(),
        }
    }
}

/// Informed policies: argmax over each estimator's expected outcomes.
pub const INFORMED: [(&str, LearnerKind, BaseKind); 4] = [
    ("s-mlp", LearnerKind::S, BaseKind::Mlp),
    ("t-mlp", LearnerKind::T, BaseKind::Mlp),
    ("tarnet-mlp", LearnerKind::TarNet, BaseKind::Mlp),
    ("s-lstm", LearnerKind::S, BaseKind::Lstm),
];

/// All evaluator reports at one confounding level.
#[derive(Debug, Clone)]
pub struct DeltaRun {
    pub delta: f64,
    /// Single learners in member order, then the ensemble.
    pub reports: Vec<EvaluationReport>,
    pub ensemble: EvaluatorBundle,
}

impl DeltaRun {
    /// Mean per-case W1 over every (policy, case) pair.
    pub fn mean_w1(r: &EvaluationReport) -> f64 {
        r.methods.iter().map(|m| m.mean_w1).sum::<f64>() / r.methods.len() as f64
    }

    pub fn ensemble_report(&self) -> &EvaluationReport {
        self.reports.last().expect("ensemble report")
    }

    pub fn worst_single_w1(&self) -> f64 {
        self.reports[..self.reports.len() - 1].iter().map(Self::mean_w1).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean true profit of the informed policies (identical across evaluators).
    pub fn informed_true_profit(&self) -> f64 {
        self.ensemble_report().informed.as_ref().map_or(f64::NAN, |g| g.mean_true_profit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub delta: f64,
    pub mean_w1: BTreeMap<String, f64>,
    pub kendall_tau: BTreeMap<String, Option<f64>>,
    pub informed_true_profit: f64,
    pub random_true_profit: f64,
}

#[derive(Debug, Clone)]
pub struct AccuracyOutcome {
    pub runs: Vec<DeltaRun>,
}

/// File-name tag for a confounding level, e.g. `delta0_75`.
pub fn delta_tag(d: f64) -> String {
    format!("delta{}", crate::eventlog::fmt_f64(d).replace('.', "_"))
}

impl AccuracyOutcome {
    pub fn summaries(&self) -> Vec<DeltaSummary> {
        self.runs
            .iter()
            .map(|run| DeltaSummary {
                delta: run.delta,
                mean_w1: run.reports.iter().map(|r| (r.evaluator.clone(), DeltaRun::mean_w1(r))).collect(),
                kendall_tau: run.reports.iter().map(|r| (r.evaluator.clone(), r.kendall_tau)).collect(),
                informed_true_profit: run.informed_true_profit(),
                random_true_profit: run.ensemble_report().random.as_ref().map_or(f64::NAN, |g| g.mean_true_profit),
            })
            .collect()
    }

    /// Per-case CSV and summary JSON for every (δ, evaluator), plus an
    /// overall summary and the ensemble bundles.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>, ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.display().to_string(), source })?;
        let mut files = Vec::new();
        let mut put = |name: String, text: String| -> Result<(), ExperimentError> {
            write_file(&dir.join(&name), &text)?;
            files.push(name);
            Ok(())
        };
        for run in &self.runs {
            let tag = delta_tag(run.delta);
            for r in &run.reports {
                put(format!("{tag}_{}_cases.csv", r.evaluator), r.cases_csv())?;
                put(format!("{tag}_{}_summary.json", r.evaluator), r.summary_json())?;
            }
            put(format!("{tag}_ensemble_bundle.json"), bundle_to_string(&run.ensemble))?;
        }
        put("accuracy_summary.json".into(), serde_json::to_string_pretty(&self.summaries()).expect("summary serializes") + "\n")?;
        Ok(files)
    }
}

/// Splits an ensemble bundle into one bundle per member.
pub fn single_bundles(ensemble: &EvaluatorBundle) -> Vec<EvaluatorBundle> {
    ensemble
        .outcome
        .members()
        .iter()
        .map(|m| {
            let outcome = OutcomeEvaluator::Single(m.clone());
            let mut b = ensemble.clone();
            b.metadata.label = outcome.label();
            b.outcome = outcome;
            b
        })
        .collect()
}

impl AccuracyConfig {
    fn sim(&self, n_cases: usize, first_case: usize, delta: f64) -> SimConfig {
        SimConfig { n_cases, delta, intervention: self.intervention, seed: self.seed, first_case }
    }

    /// Oracle test cases, placed after every training case id.
    pub fn truth(&self) -> Result<GroundTruth, ExperimentError> {
        let cases = generate_cases(&self.sim(self.n_test, self.n_train + self.n_estimator_train, 0.0))?;
        Ok(GroundTruth { kind: self.intervention, cases })
    }

    /// The random policy plus argmax policies over estimators fitted on the
    /// estimator cases at `delta`.
    pub fn policies(&self, delta: f64) -> Result<Vec<Policy>, ExperimentError> {
        let spec = self.intervention.spec();
        let cases = generate_cases(&self.sim(self.n_estimator_train, self.n_train, delta))?;
        let est_train = samples_of(&cases, self.intervention, ExtractMode::Training)?;
        let estimators = INFORMED
            .par_iter()
            .map(|&(name, learner, base)| {
                let f = &self.fit;
                fit_policy_estimator(name, learner, base, &est_train, &spec, &f.train, &f.search, &f.encoder, self.seed).map(Arc::new)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut policies = vec![Policy::random("random", self.seed)];
        policies.extend(estimators.into_iter().map(|e| Policy::argmax(&e.name.clone(), e, self.seed)));
        Ok(policies)
    }
}

/// Trains evaluators and policy estimators at each δ and evaluates the
/// random and informed policies against the simulator oracle.
pub fn accuracy_run(cfg: &AccuracyConfig) -> Result<AccuracyOutcome, ExperimentError> {
    let kind = cfg.intervention;
    let spec = kind.spec();
    let truth = cfg.truth()?;
    let mut runs = Vec::new();
    for &delta in &cfg.deltas {
        let train = samples_of(&generate_cases(&cfg.sim(cfg.n_train, 0, delta))?, kind, ExtractMode::Training)?;
        let ecfg = cfg.fit.evaluator_config(LearnerChoice::Ensemble, cfg.base, cfg.seed);
        let ensemble = fit_evaluator(&train, &spec, &ecfg)?.bundle;
        let policies = cfg.policies(delta)?;

        let mut bundles = single_bundles(&ensemble);
        bundles.push(ensemble.clone());
        let reports = bundles
            .iter()
            .map(|b| evaluate_methods(&truth, b, &policies, cfg.n_test, cfg.n_samples, cfg.seed))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push(DeltaRun { delta, reports, ensemble });
    }
    Ok(AccuracyOutcome { runs })
}

/// Evaluates one stored bundle with the policies of the first δ.
pub fn evaluate_bundle(cfg: &AccuracyConfig, bundle: &EvaluatorBundle) -> Result<EvaluationReport, ExperimentError> {
    let spec = cfg.intervention.spec();
    if bundle.intervention != spec {
        return Err(EvalError::SpecMismatch { bundle: bundle.intervention.name.clone(), simulator: spec.name }.into());
    }
    let delta = *cfg.deltas.first().ok_or(ExperimentError::NoDelta)?;
    let policies = cfg.policies(delta)?;
    Ok(evaluate_methods(&cfg.truth()?, bundle, &policies, cfg.n_test, cfg.n_samples, cfg.seed)?)
}
