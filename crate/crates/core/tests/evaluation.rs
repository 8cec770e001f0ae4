mod common;

use std::sync::Arc;

use cfeval::encode::EncoderConfig;
use cfeval::evalpipe::{evaluate_methods, EvalError, GroundTruth, Policy};
use cfeval::learners::{BaseKind, LearnerKind};
use cfeval::simulate::SimIntervention;
use cfeval::train::{fit_policy_estimator, LearnerChoice, PolicyEstimator, SearchSpace, TrainConfig};

use common::{cases, tiny_bundle, training_samples};

const KIND: SimIntervention = SimIntervention::SetRate;

fn truth(n: usize) -> GroundTruth {
    GroundTruth { kind: KIND, cases: cases(n, 0.0, KIND, 4, 1000) }
}

fn estimator() -> Arc<PolicyEstimator> {
    let train = TrainConfig { max_epochs: 3, patience: 1, hidden_dim: 6, ..TrainConfig::default() };
    let space = SearchSpace { hidden_dims: vec![6], learning_rates: vec![1e-2], batch_sizes: vec![64], budget: 1 };
    let samples = training_samples(150, KIND, 8);
    Arc::new(
        fit_policy_estimator("est", LearnerKind::S, BaseKind::Mlp, &samples, &KIND.spec(), &train, &space, &EncoderConfig::default(), 8)
            .unwrap(),
    )
}

#[test]
fn one_case_one_sample_gives_the_absolute_difference() {
    let bundle = tiny_bundle(LearnerChoice::S, BaseKind::Mlp, 3);
    let report = evaluate_methods(&truth(5), &bundle, &[Policy::random("random", 1)], 1, 1, 11).unwrap();
    assert_eq!(report.cases.len(), 1);
    let c = &report.cases[0];
    assert_eq!((c.true_samples.len(), c.est_samples.len()), (1, 1));
    assert_eq!(c.w1, (c.true_samples[0] - c.est_samples[0]).abs());
    assert_eq!(report.kendall_tau, None);
}

#[test]
fn identical_actions_give_identical_totals() {
    let bundle = tiny_bundle(LearnerChoice::Ensemble, BaseKind::Mlp, 3);
    let est = estimator();
    let policies = [Policy::argmax("b-argmax", est.clone(), 1), Policy::argmax("a-argmax", est, 2)];
    let report = evaluate_methods(&truth(30), &bundle, &policies, 30, 10, 11).unwrap();
    let (b, a) = (&report.methods[0], &report.methods[1]);
    assert_eq!(a.true_profit.to_bits(), b.true_profit.to_bits());
    assert_eq!(a.est_profit.to_bits(), b.est_profit.to_bits());
    assert_eq!(a.mean_w1.to_bits(), b.mean_w1.to_bits());
    assert_eq!(report.true_ranking, ["a-argmax", "b-argmax"], "ties fall back to the name");
    assert_eq!(report.kendall_tau, Some(1.0));
}

#[test]
fn reports_do_not_depend_on_the_worker_count() {
    let bundle = tiny_bundle(LearnerChoice::Ensemble, BaseKind::Mlp, 3);
    let est = estimator();
    let policies = [Policy::random("random", 1), Policy::argmax("argmax", est, 1)];
    let t = truth(40);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| evaluate_methods(&t, &bundle, &policies, 40, 20, 11).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one, four);
    assert_eq!(one.cases_csv(), four.cases_csv());
    assert_eq!(one.summary_json(), four.summary_json());
}

#[test]
fn a_bundle_for_another_intervention_is_refused() {
    let bundle = tiny_bundle(LearnerChoice::S, BaseKind::Mlp, 3);
    let other = GroundTruth { kind: SimIntervention::ContactHq, cases: cases(3, 0.0, SimIntervention::ContactHq, 4, 0) };
    let err = evaluate_methods(&other, &bundle, &[Policy::random("random", 1)], 3, 5, 0).unwrap_err();
    assert!(matches!(err, EvalError::SpecMismatch { .. }), "{err}");
}
