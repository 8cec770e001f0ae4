//! Event logs: CSV parsing, prefix extraction at intervention points, and
//! temporal train/validation splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{count} malformed row(s); first at line {line}: {message}")]
    Rows { count: usize, line: u64, message: String },
    #[error("data error in case `{case_id}`: {message}")]
    Data { case_id: String, message: String },
    #[error("split error: {0}")]
    Split(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub case_id: String,
    pub activity: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub numeric_attrs: BTreeMap<String, f64>,
    pub categorical_attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub events: Vec<Event>,
    pub case_numeric_attrs: BTreeMap<String, f64>,
    pub case_categorical_attrs: BTreeMap<String, String>,
    /// Treatment code; `0` means untreated.
    pub observed_treatment: Option<u32>,
    /// Event position of the intervention point where the treatment was applied.
    pub observed_treatment_step: Option<usize>,
    pub outcome: Option<f64>,
}

impl Case {
    pub fn start_time(&self) -> i64 {
        self.events.first().map_or(0, |e| e.timestamp)
    }
}

/// Cases ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub cases: Vec<Case>,
}

/// Column roles for [`parse_event_log`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogSchema {
    pub case_id: String,
    pub activity: String,
    pub timestamp: String,
    pub event_numeric: Vec<String>,
    pub event_categorical: Vec<String>,
    pub case_numeric: Vec<String>,
    pub case_categorical: Vec<String>,
    pub treatment: Option<String>,
    pub treatment_step: Option<String>,
    pub outcome: Option<String>,
    pub delimiter: char,
}

impl Default for LogSchema {
    fn default() -> Self {
        Self {
            case_id: "case_id".into(),
            activity: "activity".into(),
            timestamp: "timestamp".into(),
            event_numeric: Vec::new(),
            event_categorical: Vec::new(),
            case_numeric: Vec::new(),
            case_categorical: Vec::new(),
            treatment: None,
            treatment_step: None,
            outcome: None,
            delimiter: ',',
        }
    }
}

/// A prefix of a case ending at a decision point, with its treatment label and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSample {
    pub case_id: String,
    pub prefix: Vec<Event>,
    pub case_numeric_attrs: BTreeMap<String, f64>,
    pub case_categorical_attrs: BTreeMap<String, String>,
    pub treatment: u32,
    pub outcome: f64,
    /// Event position of the decision point (equals `prefix.len()`).
    pub intervention_step: usize,
    pub case_start: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// One decision per case at a fixed point.
    FixedPoint,
    /// Treat at most once, at one of several points.
    Timed,
}

/// Rule placing intervention points into a case. A point `p` sits between
/// events `p - 1` and `p`; its prefix is `events[..p]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRule {
    AtPosition(usize),
    AfterEach(String),
    AfterLast(String),
    BeforeFirst(String),
}

impl PointRule {
    pub fn points(&self, events: &[Event]) -> Vec<usize> {
        let n = events.len();
        match self {
            PointRule::AtPosition(p) => {
                if *p >= 1 && *p <= n {
                    vec![*p]
                } else {
                    vec![]
                }
            }
            PointRule::AfterEach(a) => events.iter().enumerate().filter(|(_, e)| &e.activity == a).map(|(i, _)| i + 1).collect(),
            PointRule::AfterLast(a) => events.iter().rposition(|e| &e.activity == a).map(|i| vec![i + 1]).unwrap_or_default(),
            PointRule::BeforeFirst(a) => {
                events.iter().position(|e| &e.activity == a).filter(|&i| i >= 1).map(|i| vec![i]).unwrap_or_default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub name: String,
    pub kind: InterventionKind,
    /// Number of treatment codes `K + 1`, including the untreated code `0`.
    pub arity: u32,
    /// Whether code `0` is an admissible action (false when every case is
    /// treated at its single point).
    pub untreated_admissible: bool,
    pub rule: PointRule,
}

impl InterventionSpec {
    /// Treatment codes a learner models, in arm order.
    pub fn arms(&self) -> Vec<u32> {
        let start = if self.untreated_admissible { 0 } else { 1 };
        (start..self.arity).collect()
    }

    pub fn arm_of(&self, code: u32) -> Option<usize> {
        self.arms().iter().position(|&c| c == code)
    }

    pub fn points(&self, events: &[Event]) -> Vec<usize> {
        let pts = self.rule.points(events);
        match self.kind {
            InterventionKind::FixedPoint => pts.into_iter().take(1).collect(),
            InterventionKind::Timed => pts,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, LogError> {
    headers.iter().position(|h| h == name).ok_or_else(|| LogError::MissingColumn(name.to_string()))
}

/// Parses a header-led CSV event log.
///
/// Events are grouped per case and stably sorted by timestamp; case-level
/// attributes take the first non-empty value seen for the case.
pub fn parse_event_log(text: &str, schema: &LogSchema) -> Result<EventLog, LogError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(schema.delimiter as u8).has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let ci = column(&headers, &schema.case_id)?;
    let ai = column(&headers, &schema.activity)?;
    let ti = column(&headers, &schema.timestamp)?;
    let cols = |names: &[String]| -> Result<Vec<(String, usize)>, LogError> {
        names.iter().map(|n| Ok((n.clone(), column(&headers, n)?))).collect()
    };
    let ev_num = cols(&schema.event_numeric)?;
    let ev_cat = cols(&schema.event_categorical)?;
    let case_num = cols(&schema.case_numeric)?;
    let case_cat = cols(&schema.case_categorical)?;
    let opt = |n: &Option<String>| -> Result<Option<usize>, LogError> { n.as_ref().map(|n| column(&headers, n)).transpose() };
    let (tri, tsi, oi) = (opt(&schema.treatment)?, opt(&schema.treatment_step)?, opt(&schema.outcome)?);

    let mut cases: BTreeMap<String, Case> = BTreeMap::new();
    let mut bad: Vec<(u64, String)> = Vec::new();
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(row_idx as u64 + 2, |p| p.line());
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let case_id = get(ci).to_string();
        let activity = get(ai).to_string();
        if case_id.is_empty() || activity.is_empty() {
            bad.push((line, "empty case id or activity".into()));
            continue;
        }
        let Some(timestamp) = parse_timestamp(get(ti)) else {
            bad.push((line, format!("unparseable timestamp `{}`", get(ti))));
            continue;
        };
        let mut row_err = None;
        let mut num = |i: usize, what: &str| -> Option<f64> {
            let s = get(i);
            if s.is_empty() {
                return None;
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    row_err.get_or_insert(format!("unparseable {what} `{s}`"));
                    None
                }
            }
        };
        let mut numeric_attrs = BTreeMap::new();
        for (name, i) in &ev_num {
            if let Some(v) = num(*i, name) {
                numeric_attrs.insert(name.clone(), v);
            }
        }
        let mut cnum = BTreeMap::new();
        for (name, i) in &case_num {
            if let Some(v) = num(*i, name) {
                cnum.insert(name.clone(), v);
            }
        }
        let outcome = oi.and_then(|i| num(i, "outcome"));
        let treatment = tri.and_then(|i| num(i, "treatment"));
        let step = tsi.and_then(|i| num(i, "treatment step"));
        if let Some(e) = row_err {
            bad.push((line, e));
            continue;
        }
        let categorical_attrs: BTreeMap<String, String> =
            ev_cat.iter().filter(|(_, i)| !get(*i).is_empty()).map(|(n, i)| (n.clone(), get(*i).to_string())).collect();
        let case = cases.entry(case_id.clone()).or_insert_with(|| Case {
            case_id: case_id.clone(),
            events: Vec::new(),
            case_numeric_attrs: BTreeMap::new(),
            case_categorical_attrs: BTreeMap::new(),
            observed_treatment: None,
            observed_treatment_step: None,
            outcome: None,
        });
        for (k, v) in cnum {
            case.case_numeric_attrs.entry(k).or_insert(v);
        }
        for (n, i) in &case_cat {
            if !get(*i).is_empty() {
                case.case_categorical_attrs.entry(n.clone()).or_insert_with(|| get(*i).to_string());
            }
        }
        if case.outcome.is_none() {
            case.outcome = outcome;
        }
        if case.observed_treatment.is_none() {
            case.observed_treatment = treatment.map(|t| t as u32);
        }
        if case.observed_treatment_step.is_none() {
            case.observed_treatment_step = step.map(|s| s as usize);
        }
        case.events.push(Event { case_id, activity, timestamp, numeric_attrs, categorical_attrs });
    }
    if let Some((line, message)) = bad.first().cloned() {
        return Err(LogError::Rows { count: bad.len(), line, message });
    }
    let mut cases: Vec<Case> = cases.into_values().collect();
    for c in &mut cases {
        // stable: ties keep file order
        c.events.sort_by_key(|e| e.timestamp);
    }
    Ok(EventLog { cases })
}

/// Integer seconds, or an RFC 3339-like `YYYY-MM-DD[T ]HH:MM:SS[.fff][Z]`
/// UTC timestamp (sub-second digits truncated).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return (v >= 0).then_some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return (v.is_finite() && v >= 0.0).then_some(v.trunc() as i64);
    }
    let b = s.as_bytes();
    if b.len() < 19 || b[4] != b'-' || b[7] != b'-' || !(b[10] == b'T' || b[10] == b' ') {
        return None;
    }
    let n = |r: std::ops::Range<usize>| s.get(r)?.parse::<i64>().ok();
    let (y, mo, d, h, mi, se) = (n(0..4)?, n(5..7)?, n(8..10)?, n(11..13)?, n(14..16)?, n(17..19)?);
    if !(1..=12).contains(&mo) || !(1..=31).contains(&d) || h > 23 || mi > 59 || se > 60 {
        return None;
    }
    // days from civil (Howard Hinnant)
    let yy = if mo <= 2 { y - 1 } else { y };
    let era = yy.div_euclid(400);
    let yoe = yy - era * 400;
    let mp = (mo + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe - 719_468;
    let t = days * 86_400 + h * 3600 + mi * 60 + se;
    (t >= 0).then_some(t)
}

/// Writes a log back to CSV using `schema`'s column names.
pub fn write_event_log(log: &EventLog, schema: &LogSchema) -> String {
    let mut header = vec![schema.case_id.clone(), schema.activity.clone(), schema.timestamp.clone()];
    header.extend(schema.event_numeric.iter().cloned());
    header.extend(schema.event_categorical.iter().cloned());
    header.extend(schema.case_numeric.iter().cloned());
    header.extend(schema.case_categorical.iter().cloned());
    header.extend(schema.treatment.iter().cloned());
    header.extend(schema.treatment_step.iter().cloned());
    header.extend(schema.outcome.iter().cloned());
    let mut w = csv::WriterBuilder::new().delimiter(schema.delimiter as u8).from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for case in &log.cases {
        for e in &case.events {
            let mut row = vec![e.case_id.clone(), e.activity.clone(), e.timestamp.to_string()];
            for n in &schema.event_numeric {
                row.push(e.numeric_attrs.get(n).map(|v| fmt_f64(*v)).unwrap_or_default());
            }
            for n in &schema.event_categorical {
                row.push(e.categorical_attrs.get(n).cloned().unwrap_or_default());
            }
            for n in &schema.case_numeric {
                row.push(case.case_numeric_attrs.get(n).map(|v| fmt_f64(*v)).unwrap_or_default());
            }
            for n in &schema.case_categorical {
                row.push(case.case_categorical_attrs.get(n).cloned().unwrap_or_default());
            }
            if schema.treatment.is_some() {
                row.push(case.observed_treatment.map(|t| t.to_string()).unwrap_or_default());
            }
            if schema.treatment_step.is_some() {
                row.push(case.observed_treatment_step.map(|t| t.to_string()).unwrap_or_default());
            }
            if schema.outcome.is_some() {
                row.push(case.outcome.map(fmt_f64).unwrap_or_default());
            }
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:?}").expect("string write");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractMode {
    /// Training data: timed interventions also yield untreated samples at the
    /// points before the treated one.
    Training,
    /// One sample per case at its observed decision point.
    DecisionOnly,
}

/// The prefix `events[..point]` of `case` as a sample.
pub fn sample_at(case: &Case, point: usize, treatment: u32, outcome: f64) -> PrefixSample {
    PrefixSample {
        case_id: case.case_id.clone(),
        prefix: case.events[..point].to_vec(),
        case_numeric_attrs: case.case_numeric_attrs.clone(),
        case_categorical_attrs: case.case_categorical_attrs.clone(),
        treatment,
        outcome,
        intervention_step: point,
        case_start: case.start_time(),
    }
}

/// Truncates every case at its intervention points.
///
/// Treated cases yield the prefix ending just before the treated point;
/// untreated cases the prefix at their latest point, labelled `0`. Cases
/// without an outcome or without any intervention point are skipped.
pub fn extract_prefix_dataset(log: &EventLog, spec: &InterventionSpec, mode: ExtractMode) -> Result<Vec<PrefixSample>, LogError> {
    let mut out = Vec::new();
    for case in &log.cases {
        let Some(outcome) = case.outcome else { continue };
        let points = spec.points(&case.events);
        let treatment = case.observed_treatment.unwrap_or(0);
        if treatment >= spec.arity {
            return Err(LogError::Data {
                case_id: case.case_id.clone(),
                message: format!("treatment {treatment} outside arity {}", spec.arity),
            });
        }
        if treatment == 0 {
            if !spec.untreated_admissible {
                return Err(LogError::Data {
                    case_id: case.case_id.clone(),
                    message: "untreated case under an intervention that treats every case".into(),
                });
            }
            if let Some(&last) = points.last() {
                out.push(sample_at(case, last, 0, outcome));
            }
            continue;
        }
        let step = match (case.observed_treatment_step, spec.kind) {
            (Some(s), _) => s,
            (None, InterventionKind::FixedPoint) => match points.first() {
                Some(&p) => p,
                None => {
                    return Err(LogError::Data { case_id: case.case_id.clone(), message: "treated case has no intervention point".into() })
                }
            },
            (None, InterventionKind::Timed) => {
                return Err(LogError::Data { case_id: case.case_id.clone(), message: "timed treatment without a recorded step".into() })
            }
        };
        let Some(ordinal) = points.iter().position(|&p| p == step) else {
            return Err(LogError::Data {
                case_id: case.case_id.clone(),
                message: format!("treatment step {step} is not an intervention point (points: {points:?})"),
            });
        };
        if spec.kind == InterventionKind::Timed && mode == ExtractMode::Training {
            for &p in &points[..ordinal] {
                out.push(sample_at(case, p, 0, outcome));
            }
        }
        out.push(sample_at(case, step, treatment, outcome));
    }
    Ok(out)
}

/// Splits by case start time: the latest `floor(n * val_fraction)` cases (at
/// least one) form the validation set. Ties order by case id.
pub fn temporal_split(samples: &[PrefixSample], val_fraction: f64) -> Result<(Vec<PrefixSample>, Vec<PrefixSample>), LogError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(LogError::Split(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let mut starts: BTreeMap<&str, i64> = BTreeMap::new();
    for s in samples {
        let e = starts.entry(&s.case_id).or_insert(s.case_start);
        *e = (*e).min(s.case_start);
    }
    if starts.len() < 2 {
        return Err(LogError::Split(format!("need at least 2 cases, found {}", starts.len())));
    }
    let mut order: Vec<(i64, &str)> = starts.iter().map(|(c, t)| (*t, *c)).collect();
    order.sort();
    let n = order.len();
    let n_val = ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1);
    let val_ids: BTreeSet<&str> = order[n - n_val..].iter().map(|(_, c)| *c).collect();
    let (val, train): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| val_ids.contains(s.case_id.as_str()));
    Ok((train, val))
}
