//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use cfeval::eventlog::{ExtractMode, PrefixSample};
use cfeval::experiment::samples_of;
use cfeval::heads::HeadKind;
use cfeval::learners::{BaseKind, EvaluatorBundle};
use cfeval::simulate::{generate_cases, outcome_head, SimCase, SimConfig, SimIntervention};
use cfeval::train::{fit_evaluator, EvaluatorConfig, LearnerChoice, SearchSpace, TrainConfig};

pub fn cases(n: usize, delta: f64, kind: SimIntervention, seed: u64, first_case: usize) -> Vec<SimCase> {
    generate_cases(&SimConfig { n_cases: n, delta, intervention: kind, seed, first_case }).unwrap()
}

pub fn training_samples(n: usize, kind: SimIntervention, seed: u64) -> Vec<PrefixSample> {
    samples_of(&cases(n, 0.5, kind, seed, 0), kind, ExtractMode::Training).unwrap()
}

/// A two-epoch configuration with a single search trial.
pub fn tiny_config(learner: LearnerChoice, base: BaseKind, head: HeadKind, seed: u64) -> EvaluatorConfig {
    EvaluatorConfig {
        train: TrainConfig { max_epochs: 2, patience: 1, hidden_dim: 6, batch_size: 64, ..TrainConfig::default() },
        search: SearchSpace { hidden_dims: vec![6], learning_rates: vec![1e-2], batch_sizes: vec![64], budget: 1 },
        ..EvaluatorConfig::new(learner, base, head, seed)
    }
}

pub fn tiny_bundle(learner: LearnerChoice, base: BaseKind, seed: u64) -> EvaluatorBundle {
    let kind = SimIntervention::SetRate;
    let samples = training_samples(200, kind, seed);
    fit_evaluator(&samples, &kind.spec(), &tiny_config(learner, base, outcome_head(3), seed)).unwrap().bundle
}
