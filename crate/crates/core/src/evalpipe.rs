//! Policy evaluation against a simulator oracle.
//!
//! Each policy is rolled out on every test case. At its decision the oracle
//! and the evaluator each yield `n_samples` outcomes; their per-case
//! Wasserstein-1 distance measures absolute fidelity, and Kendall's τ between
//! the true and estimated profit rankings measures relative fidelity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::{fmt_f64, sample_at, Case, InterventionKind, InterventionSpec, PrefixSample};
use crate::heads::HeadError;
use crate::learners::{sample_members, EvaluatorBundle, Inputs, LearnError};
use crate::rng::Stream;
use crate::simulate::{true_outcome_samples, Action, SimCase, SimError, SimIntervention};
use crate::train::{PolicyEstimator, TrainError};

pub const DEFAULT_SAMPLES: usize = 50;
pub const THRESHOLD_GRID: usize = 21;
const ESTIMATOR_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("rankings cover different items")]
    Items,
    #[error("policy {0} needs {1}")]
    Policy(String, &'static str),
    #[error("intervention mismatch: evaluator models {bundle}, simulator runs {simulator}")]
    SpecMismatch { bundle: String, simulator: String },
    #[error("case {case_id}: no intervention point")]
    NoPoint { case_id: String },
    #[error("case {case_id}: {source}")]
    Case { case_id: String, source: Box<EvalError> },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Mean absolute difference of the sorted samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    Ok(x.iter().zip(&y).map(|(u, v)| (u - v).abs()).sum::<f64>() / x.len() as f64)
}

/// Kendall's τ-a between two orderings of the same items.
pub fn kendall_tau<T: Ord + Clone>(rank_a: &[T], rank_b: &[T]) -> Result<f64, EvalError> {
    if rank_a.len() != rank_b.len() {
        return Err(EvalError::Length(rank_a.len(), rank_b.len()));
    }
    let set_a: BTreeSet<&T> = rank_a.iter().collect();
    let set_b: BTreeSet<&T> = rank_b.iter().collect();
    if set_a != set_b || set_a.len() != rank_a.len() {
        return Err(EvalError::Items);
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(EvalError::Length(n, 2));
    }
    let pos_b = |item: &T| rank_b.iter().position(|x| x == item).expect("same items");
    let pb: Vec<usize> = rank_a.iter().map(pos_b).collect();
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            score += if pb[i] < pb[j] { 1 } else { -1 };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Argmax,
    Threshold,
}

/// A decision rule queried at every intervention point of a case.
#[derive(Debug, Clone)]
pub struct Policy {
    pub name: String,
    pub kind: PolicyKind,
    pub estimator: Option<Arc<PolicyEstimator>>,
    /// Minimum estimated gain of the best non-baseline arm over the
    /// baseline arm; `+∞` never intervenes.
    pub theta: f64,
    pub seed: u64,
}

/// Estimated outcomes `[point][arm]` of one case.
type PointValues = Vec<Vec<f64>>;

/// Estimator outputs for every intervention point of every case.
fn point_values(est: &PolicyEstimator, cases: &[&Case], spec: &InterventionSpec) -> Result<Vec<PointValues>, EvalError> {
    let mut samples = Vec::new();
    let mut counts = Vec::with_capacity(cases.len());
    for c in cases {
        let points = spec.points(&c.events);
        counts.push(points.len());
        samples.extend(points.iter().map(|&p| sample_at(c, p, 0, 0.0)));
    }
    let mut flat = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ESTIMATOR_CHUNK) {
        flat.extend(est.expected_outcomes(chunk)?);
    }
    let mut it = flat.into_iter();
    Ok(counts.iter().map(|&k| it.by_ref().take(k).collect()).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gain of the best non-baseline arm over arm 0, with that arm.
fn best_gain(values: &[f64]) -> (f64, usize) {
    let b = 1 + argmax(&values[1..]);
    (values[b] - values[0], b)
}

/// The policy's decision on a case: arm index and the point it applies at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Decision {
    arm: usize,
    point: usize,
    treated_now: bool,
}

impl Policy {
    pub fn random(name: &str, seed: u64) -> Self {
        Self { name: name.into(), kind: PolicyKind::Random, estimator: None, theta: f64::NAN, seed }
    }

    pub fn argmax(name: &str, estimator: Arc<PolicyEstimator>, seed: u64) -> Self {
        Self { name: name.into(), kind: PolicyKind::Argmax, estimator: Some(estimator), theta: f64::NAN, seed }
    }

    pub fn threshold(name: &str, estimator: Arc<PolicyEstimator>, theta: f64, seed: u64) -> Self {
        Self { name: name.into(), kind: PolicyKind::Threshold, estimator: Some(estimator), theta, seed }
    }

    pub fn informed(&self) -> bool {
        self.kind != PolicyKind::Random
    }

    /// Arm chosen at the `k`-th point of `case_id` given estimated values.
    fn choose(&self, case_id: &str, k: usize, values: Option<&[f64]>, n_arms: usize) -> usize {
        use rand::Rng;
        match (self.kind, values) {
            (PolicyKind::Random, _) | (_, None) => {
                let s = Stream::new(self.seed).with("policy").with(&self.name).with(case_id).index(k as u64);
                s.rng().gen_range(0..n_arms)
            }
            (PolicyKind::Argmax, Some(v)) => argmax(v),
            (PolicyKind::Threshold, Some(v)) => {
                let (gain, b) = best_gain(v);
                if gain > self.theta {
                    b
                } else {
                    0
                }
            }
        }
    }

    /// Rolls the case forward until the policy acts or the points run out.
    fn rollout(
        &self,
        case_id: &str,
        points: &[usize],
        values: Option<&PointValues>,
        spec: &InterventionSpec,
    ) -> Result<Decision, EvalError> {
        let Some(&last) = points.last() else {
            return Err(EvalError::NoPoint { case_id: case_id.into() });
        };
        let arms = spec.arms();
        for (k, &p) in points.iter().enumerate() {
            let arm = self.choose(case_id, k, values.map(|v| v[k].as_slice()), arms.len());
            if spec.kind == InterventionKind::FixedPoint {
                return Ok(Decision { arm, point: p, treated_now: arms[arm] != 0 });
            }
            if arms[arm] != 0 {
                return Ok(Decision { arm, point: p, treated_now: true });
            }
        }
        let arm = spec.arm_of(0).ok_or_else(|| EvalError::Policy(self.name.clone(), "an untreated arm for timed rollouts"))?;
        Ok(Decision { arm, point: last, treated_now: false })
    }
}

/// Builds a policy; threshold policies tune `θ` on `validation` cases by
/// estimated profit over a linear grid spanning the estimated gains.
pub fn make_policy(
    name: &str,
    kind: PolicyKind,
    estimator: Option<Arc<PolicyEstimator>>,
    validation: Option<&[Case]>,
    spec: &InterventionSpec,
    seed: u64,
) -> Result<Policy, EvalError> {
    match kind {
        PolicyKind::Random => Ok(Policy::random(name, seed)),
        PolicyKind::Argmax => {
            let est = estimator.ok_or_else(|| EvalError::Policy(name.into(), "an estimator"))?;
            Ok(Policy::argmax(name, est, seed))
        }
        PolicyKind::Threshold => {
            let est = estimator.ok_or_else(|| EvalError::Policy(name.into(), "an estimator"))?;
            let val = validation.filter(|v| !v.is_empty()).ok_or_else(|| EvalError::Policy(name.into(), "validation cases"))?;
            let theta = tune_threshold(name, &est, val, spec, seed)?;
            Ok(Policy::threshold(name, est, theta, seed))
        }
    }
}

fn tune_threshold(name: &str, est: &Arc<PolicyEstimator>, val: &[Case], spec: &InterventionSpec, seed: u64) -> Result<f64, EvalError> {
    let cases: Vec<&Case> = val.iter().filter(|c| !spec.points(&c.events).is_empty()).collect();
    let values = point_values(est, &cases, spec)?;
    let gains: Vec<f64> = values.iter().flatten().map(|v| best_gain(v).0).collect();
    if gains.is_empty() {
        return Err(EvalError::Policy(name.into(), "validation cases with intervention points"));
    }
    let lo = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::NEG_INFINITY, lo);
    for g in 0..THRESHOLD_GRID {
        let theta = lo + (hi - lo) * g as f64 / (THRESHOLD_GRID - 1) as f64;
        let policy = Policy::threshold(name, est.clone(), theta, seed);
        let mut profit = 0.0;
        for (c, v) in cases.iter().zip(&values) {
            let points = spec.points(&c.events);
            let d = policy.rollout(&c.case_id, &points, Some(v), spec)?;
            let k = points.iter().position(|&p| p == d.point).expect("decision at a point");
            profit += v[k][d.arm];
        }
        if profit > best.0 {
            best = (profit, theta);
        }
    }
    Ok(best.1)
}

/// Simulated test cases with their outcome oracle.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub kind: SimIntervention,
    pub cases: Vec<SimCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub policy: String,
    pub case_id: String,
    pub treatment: u32,
    pub step: Option<usize>,
    pub true_samples: Vec<f64>,
    pub est_samples: Vec<f64>,
    pub w1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub informed: bool,
    pub mean_w1: f64,
    pub true_profit: f64,
    pub est_profit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n_methods: usize,
    pub mean_w1: f64,
    pub mean_true_profit: f64,
    pub mean_est_profit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub evaluator: String,
    pub n_cases: usize,
    pub n_samples: usize,
    pub methods: Vec<MethodSummary>,
    pub true_ranking: Vec<String>,
    pub est_ranking: Vec<String>,
    /// `None` with fewer than two methods.
    pub kendall_tau: Option<f64>,
    pub informed: Option<GroupSummary>,
    pub random: Option<GroupSummary>,
    #[serde(skip)]
    pub cases: Vec<CaseEvaluation>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Method names by descending score, ties by name.
fn ranking(methods: &[MethodSummary], score: impl Fn(&MethodSummary) -> f64) -> Vec<String> {
    let mut m: Vec<&MethodSummary> = methods.iter().collect();
    m.sort_by(|a, b| score(b).total_cmp(&score(a)).then_with(|| a.name.cmp(&b.name)));
    m.into_iter().map(|s| s.name.clone()).collect()
}

fn group(methods: &[MethodSummary], informed: bool) -> Option<GroupSummary> {
    let g: Vec<&MethodSummary> = methods.iter().filter(|m| m.informed == informed).collect();
    if g.is_empty() {
        return None;
    }
    let avg = |f: fn(&MethodSummary) -> f64| g.iter().map(|m| f(m)).sum::<f64>() / g.len() as f64;
    Some(GroupSummary {
        n_methods: g.len(),
        mean_w1: avg(|m| m.mean_w1),
        mean_true_profit: avg(|m| m.true_profit),
        mean_est_profit: avg(|m| m.est_profit),
    })
}

/// Stream key part for an action, e.g. `t3@5` or `t0@-`.
fn action_key(a: Action) -> String {
    match a.step {
        Some(s) => format!("t{}@{s}", a.treatment),
        None => format!("t{}@-", a.treatment),
    }
}

/// Rolls out every policy on the first `n_cases` test cases and compares
/// oracle and evaluator outcome samples at each decision.
///
/// Streams are keyed by `(seed, source, action, case_id, index)`, so policies
/// that take the same action on a case see the same draws. Results do not
/// depend on the worker count.
pub fn evaluate_methods(
    truth: &GroundTruth,
    bundle: &EvaluatorBundle,
    policies: &[Policy],
    n_cases: usize,
    n_samples: usize,
    seed: u64,
) -> Result<EvaluationReport, EvalError> {
    let sim_spec = truth.kind.spec();
    if bundle.intervention != sim_spec {
        return Err(EvalError::SpecMismatch { bundle: bundle.intervention.name.clone(), simulator: sim_spec.name.clone() });
    }
    if n_samples == 0 || policies.is_empty() {
        return Err(EvalError::Empty);
    }
    let cases: Vec<&SimCase> = truth.cases.iter().take(n_cases).collect();
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    let plain: Vec<&Case> = cases.iter().map(|c| &c.case).collect();
    let points: Vec<Vec<usize>> = plain.iter().map(|c| sim_spec.points(&c.events)).collect();
    let arms = sim_spec.arms();
    let master = Stream::new(seed);

    let mut evaluations = Vec::with_capacity(policies.len() * cases.len());
    let mut methods = Vec::with_capacity(policies.len());
    for policy in policies {
        let values = match &policy.estimator {
            Some(est) => Some(point_values(est, &plain, &sim_spec)?),
            None if policy.informed() => return Err(EvalError::Policy(policy.name.clone(), "an estimator")),
            None => None,
        };
        let decisions = plain
            .iter()
            .enumerate()
            .map(|(i, c)| {
                policy
                    .rollout(&c.case_id, &points[i], values.as_ref().map(|v| &v[i]), &sim_spec)
                    .map_err(|e| EvalError::Case { case_id: c.case_id.clone(), source: Box::new(e) })
            })
            .collect::<Result<Vec<_>, _>>()?;

        // Evaluator parameters, batched per arm.
        let mut params = vec![Vec::new(); cases.len()];
        for (arm, &code) in arms.iter().enumerate() {
            let rows: Vec<usize> = (0..cases.len()).filter(|&i| decisions[i].arm == arm).collect();
            if rows.is_empty() {
                continue;
            }
            let samples: Vec<PrefixSample> = rows.iter().map(|&i| sample_at(plain[i], decisions[i].point, code, 0.0)).collect();
            let inputs: Inputs = bundle.inputs(&samples);
            let idx: Vec<usize> = (0..rows.len()).collect();
            for (r, p) in rows.iter().zip(bundle.outcome.params_for_arm(&inputs, &idx, arm)?) {
                params[*r] = p;
            }
        }

        let rows = cases
            .par_iter()
            .zip(decisions.par_iter())
            .zip(params.par_iter())
            .map(|((case, d), p)| {
                let id = &case.case.case_id;
                let wrap = |e: EvalError| EvalError::Case { case_id: id.clone(), source: Box::new(e) };
                let action = Action { treatment: arms[d.arm], step: d.treated_now.then_some(d.point) };
                let key = action_key(action);
                let truth_s = true_outcome_samples(case, truth.kind, action, n_samples, master.with("true").with(&key))
                    .map_err(|e| wrap(e.into()))?;
                let est_s = sample_members(&bundle.head, p, bundle.outcome.mode(), n_samples, master.with("estimated").with(&key).with(id))
                    .map_err(|e| wrap(e.into()))?;
                let w1 = wasserstein1(&truth_s, &est_s)?;
                Ok(CaseEvaluation {
                    policy: policy.name.clone(),
                    case_id: id.clone(),
                    treatment: action.treatment,
                    step: action.step,
                    true_samples: truth_s,
                    est_samples: est_s,
                    w1,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        methods.push(MethodSummary {
            name: policy.name.clone(),
            informed: policy.informed(),
            mean_w1: mean(&rows.iter().map(|r| r.w1).collect::<Vec<_>>()),
            true_profit: rows.iter().map(|r| mean(&r.true_samples)).sum(),
            est_profit: rows.iter().map(|r| mean(&r.est_samples)).sum(),
        });
        evaluations.extend(rows);
    }
    let true_ranking = ranking(&methods, |m| m.true_profit);
    let est_ranking = ranking(&methods, |m| m.est_profit);
    let kendall = if methods.len() >= 2 { Some(kendall_tau(&true_ranking, &est_ranking)?) } else { None };
    Ok(EvaluationReport {
        evaluator: bundle.metadata.label.clone(),
        n_cases: cases.len(),
        n_samples,
        informed: group(&methods, true),
        random: group(&methods, false),
        methods,
        true_ranking,
        est_ranking,
        kendall_tau: kendall,
        cases: evaluations,
    })
}

impl EvaluationReport {
    /// One row per (policy, case).
    pub fn cases_csv(&self) -> String {
        let mut out = String::from("policy,case_id,treatment,step,w1,true_mean,est_mean\n");
        for c in &self.cases {
            let step = c.step.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.policy,
                c.case_id,
                c.treatment,
                step,
                fmt_f64(c.w1),
                fmt_f64(mean(&c.true_samples)),
                fmt_f64(mean(&c.est_samples))
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
