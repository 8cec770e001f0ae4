//! A small loan-application process with a closed-form outcome law.
//!
//! Each case carries latent amount `A` and risk `R`. The log shows `A`, a
//! sector, and noisy risk scores on the assessment events; `R` itself stays
//! hidden. Two interventions are available: choosing the interest rate once
//! after the assessments (`set_rate`), or contacting headquarters after one of
//! the assessments (`contact_hq`).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::sigmoid;
use crate::eventlog::{Case, Event, EventLog, InterventionKind, InterventionSpec, LogSchema, PointRule};
use crate::heads::HeadKind;
use crate::rng::Stream;

/// Unix time of the first simulated case.
pub const BASE_TIME: i64 = 1_600_000_000;
pub const CASE_SPACING_SECS: i64 = 7200;
pub const MEAN_GAP_SECS: f64 = 86_400.0;
pub const POLICY_EPSILON: f64 = 0.1;
/// Rate of each `set_rate` treatment code (code 0 is unused).
pub const RATES: [f64; 4] = [f64::NAN, 0.01, 0.03, 0.05];
pub const BASE_RATE: f64 = 0.03;
pub const CONTACT_THRESHOLD: f64 = 0.7;
pub const SECTORS: [&str; 3] = ["retail", "tech", "agri"];
const SECTOR_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("confounding level {0} outside [0, 1]")]
    Delta(f64),
    #[error("case {case_id}: inadmissible action (treatment {treatment}, step {step:?})")]
    Inadmissible { case_id: String, treatment: u32, step: Option<usize> },
    #[error("n_cases must be at least 1")]
    NoCases,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimIntervention {
    SetRate,
    ContactHq,
}

impl SimIntervention {
    pub fn spec(self) -> InterventionSpec {
        match self {
            Self::SetRate => InterventionSpec {
                name: "set_rate".into(),
                kind: InterventionKind::FixedPoint,
                arity: 4,
                untreated_admissible: false,
                rule: PointRule::AfterLast("assess".into()),
            },
            Self::ContactHq => InterventionSpec {
                name: "contact_hq".into(),
                kind: InterventionKind::Timed,
                arity: 2,
                untreated_admissible: true,
                rule: PointRule::AfterEach("assess".into()),
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SetRate => "set_rate",
            Self::ContactHq => "contact_hq",
        }
    }
}

/// Column layout of simulated logs.
pub fn log_schema() -> LogSchema {
    LogSchema {
        event_numeric: vec!["score".into()],
        case_numeric: vec!["amount".into()],
        case_categorical: vec!["sector".into()],
        treatment: Some("treatment".into()),
        treatment_step: Some("treatment_step".into()),
        outcome: Some("outcome".into()),
        ..LogSchema::default()
    }
}

/// Outcome head for simulated outcomes: an atom at 0 (rejection) plus a flow.
pub fn outcome_head(components: usize) -> HeadKind {
    HeadKind::MixedFlow { atoms: vec![0.0], components }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_cases: usize,
    pub delta: f64,
    pub intervention: SimIntervention,
    pub seed: u64,
    /// Index of the first case; offsets ids and start times so separately
    /// generated sets do not collide.
    #[serde(default)]
    pub first_case: usize,
}

/// A simulated case with its latent attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCase {
    pub case: Case,
    pub amount: f64,
    pub risk: f64,
}

impl SimCase {
    pub fn n_assess(&self) -> usize {
        self.case.events.iter().filter(|e| e.activity == "assess").count()
    }
}

/// A treatment code and the intervention point it is applied at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub treatment: u32,
    pub step: Option<usize>,
}

pub fn case_id(i: usize) -> String {
    format!("c{i:06}")
}

/// Acceptance probability at rate `t`.
pub fn p_accept(risk: f64, rate: f64) -> f64 {
    sigmoid(3.0 - 4.0 * risk - 50.0 * (rate - 0.03))
}

/// Default probability at rate `t` before any contact multiplier.
pub fn p_default(risk: f64, rate: f64) -> f64 {
    (0.8 * risk + 5.0 * (rate - 0.01)).clamp(0.0, 0.95)
}

/// Default multiplier for a contact after assessment `k` (1-based).
pub fn contact_multiplier(k: usize) -> f64 {
    (0.5 + 0.1 * k as f64).min(1.0)
}

/// Outcome law parameters `(rate, default prob, cost)` for an action.
fn law(case: &SimCase, kind: SimIntervention, action: Action) -> Result<(f64, f64, f64), SimError> {
    let bad = || SimError::Inadmissible { case_id: case.case.case_id.clone(), treatment: action.treatment, step: action.step };
    let points = kind.spec().points(&case.case.events);
    match kind {
        SimIntervention::SetRate => {
            if !(1..=3).contains(&action.treatment) || action.step.is_some_and(|s| !points.contains(&s)) {
                return Err(bad());
            }
            let t = RATES[action.treatment as usize];
            Ok((t, p_default(case.risk, t), 0.0))
        }
        SimIntervention::ContactHq => match action.treatment {
            0 => Ok((BASE_RATE, p_default(case.risk, BASE_RATE), 0.0)),
            1 => {
                let step = action.step.filter(|s| points.contains(s)).ok_or_else(bad)?;
                let k = step - 1;
                let q = (p_default(case.risk, BASE_RATE) * contact_multiplier(k)).clamp(0.0, 1.0);
                Ok((BASE_RATE, q, 0.01 * case.amount))
            }
            _ => Err(bad()),
        },
    }
}

fn draw_outcome<R: Rng>(amount: f64, risk: f64, (rate, q, cost): (f64, f64, f64), rng: &mut R) -> f64 {
    let (u_acc, u_def) = (rng.gen::<f64>(), rng.gen::<f64>());
    if u_acc >= p_accept(risk, rate) {
        0.0
    } else if u_def < q {
        -0.5 * amount - cost
    } else {
        5.0 * amount * rate - cost
    }
}

/// Closed-form `E[Y | A, R, action]`.
pub fn expected_outcome(case: &SimCase, kind: SimIntervention, action: Action) -> Result<f64, SimError> {
    let (rate, q, cost) = law(case, kind, action)?;
    let a = case.amount;
    Ok(p_accept(case.risk, rate) * ((1.0 - q) * 5.0 * a * rate - q * 0.5 * a - cost))
}

/// `n` draws from the true outcome law; draw `i` uses `(stream, case_id, i)`.
pub fn true_outcome_samples(case: &SimCase, kind: SimIntervention, action: Action, n: usize, stream: Stream) -> Result<Vec<f64>, SimError> {
    let l = law(case, kind, action)?;
    let s = stream.with(&case.case.case_id);
    Ok((0..n as u64).map(|i| draw_outcome(case.amount, case.risk, l, &mut s.index(i).rng())).collect())
}

fn build_case(i: usize, seed: u64) -> SimCase {
    let id = case_id(i);
    let mut rng = Stream::new(seed).with("case").with(&id).rng();
    let amount = rng.gen_range(1000.0..50_000.0);
    let risk = rng.gen::<f64>();
    let u = rng.gen::<f64>();
    let sector = if u < SECTOR_WEIGHTS[0] {
        0
    } else if u < SECTOR_WEIGHTS[0] + SECTOR_WEIGHTS[1] {
        1
    } else {
        2
    };
    let k = 1 + Binomial::new(4, risk).expect("valid binomial").sample(&mut rng) as usize;
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let gap = Exp::new(1.0 / MEAN_GAP_SECS).expect("valid exp");
    let mut t = BASE_TIME + i as i64 * CASE_SPACING_SECS + rng.gen_range(0..3600);
    let mut events = Vec::with_capacity(k + 3);
    let mut push = |activity: &str, score: Option<f64>, t: i64| {
        let mut numeric = BTreeMap::new();
        if let Some(s) = score {
            numeric.insert("score".to_string(), s);
        }
        events.push(Event {
            case_id: id.clone(),
            activity: activity.to_string(),
            timestamp: t,
            numeric_attrs: numeric,
            categorical_attrs: BTreeMap::new(),
        });
    };
    push("start", None, t);
    let next = |t: &mut i64, rng: &mut crate::rng::StreamRng| {
        *t += (gap.sample(rng).round() as i64).max(1);
    };
    for _ in 0..k {
        next(&mut t, &mut rng);
        let score = risk + noise.sample(&mut rng);
        push("assess", Some(score), t);
    }
    next(&mut t, &mut rng);
    push("decide", None, t);
    next(&mut t, &mut rng);
    push("end", None, t);
    let case = Case {
        case_id: id,
        events,
        case_numeric_attrs: BTreeMap::from([("amount".to_string(), amount)]),
        case_categorical_attrs: BTreeMap::from([("sector".to_string(), SECTORS[sector].to_string())]),
        observed_treatment: None,
        observed_treatment_step: None,
        outcome: None,
    };
    SimCase { case, amount, risk }
}

/// Historical assignment: confounded with probability `delta`, else randomized.
fn assign(case: &SimCase, kind: SimIntervention, delta: f64, stream: Stream) -> Action {
    let mut rng = stream.with(&case.case.case_id).rng();
    let confounded = rng.gen::<f64>() < delta;
    let points = kind.spec().points(&case.case.events);
    match kind {
        SimIntervention::SetRate => {
            let step = points.first().copied();
            let eps = rng.gen::<f64>() < POLICY_EPSILON;
            let uniform = rng.gen_range(1..=3u32);
            let treatment = if !confounded || eps {
                uniform
            } else if case.risk < 1.0 / 3.0 {
                3
            } else if case.risk < 2.0 / 3.0 {
                2
            } else {
                1
            };
            Action { treatment, step }
        }
        SimIntervention::ContactHq => {
            let scores: Vec<f64> = case.case.events.iter().filter_map(|e| e.numeric_attrs.get("score").copied()).collect();
            let choice = if confounded {
                scores.iter().position(|&s| s > CONTACT_THRESHOLD)
            } else {
                let pick = rng.gen_range(0..=points.len());
                (pick < points.len()).then_some(pick)
            };
            match choice {
                Some(k) => Action { treatment: 1, step: Some(points[k]) },
                None => Action { treatment: 0, step: None },
            }
        }
    }
}

/// Simulated cases with recorded treatments and outcomes.
pub fn generate_cases(cfg: &SimConfig) -> Result<Vec<SimCase>, SimError> {
    if !(0.0..=1.0).contains(&cfg.delta) {
        return Err(SimError::Delta(cfg.delta));
    }
    if cfg.n_cases == 0 {
        return Err(SimError::NoCases);
    }
    let master = Stream::new(cfg.seed);
    (cfg.first_case..cfg.first_case + cfg.n_cases)
        .map(|i| {
            let mut c = build_case(i, cfg.seed);
            let action = assign(&c, cfg.intervention, cfg.delta, master.with("assign"));
            let y = true_outcome_samples(&c, cfg.intervention, action, 1, master.with("observed"))?[0];
            c.case.observed_treatment = Some(action.treatment);
            c.case.observed_treatment_step = action.step;
            c.case.outcome = Some(y);
            Ok(c)
        })
        .collect()
}

pub fn to_event_log(cases: &[SimCase]) -> EventLog {
    EventLog { cases: cases.iter().map(|c| c.case.clone()).collect() }
}

pub fn generate_log(cfg: &SimConfig) -> Result<EventLog, SimError> {
    Ok(to_event_log(&generate_cases(cfg)?))
}
