//! Prefix encodings: an aggregated flat vector for MLP bases and a per-event
//! sequence plus case-level features for LSTM bases.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::{Event, PrefixSample};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("cannot fit an encoder on an empty training set")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Most frequent levels kept per categorical attribute; the rest share an
    /// "other" slot. Activities are never capped.
    pub categorical_cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { categorical_cap: 6 }
    }
}

/// Mean and standard deviation used to standardize one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population statistics; zero variance maps to `std = 1`.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self { mean, std: if std > 0.0 && std.is_finite() { std } else { 1.0 } }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// A categorical attribute with its retained levels (plus an implicit "other").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CappedVocab {
    pub attr: String,
    pub levels: Vec<String>,
}

impl CappedVocab {
    fn fit<'a>(attr: &str, values: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for v in values {
            *freq.entry(v).or_default() += 1;
        }
        let mut by_freq: Vec<(&str, usize)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self { attr: attr.to_string(), levels: by_freq.into_iter().take(cap).map(|(s, _)| s.to_string()).collect() }
    }

    /// Slots: one per level plus "other".
    pub fn width(&self) -> usize {
        self.levels.len() + 1
    }

    fn write_one_hot(&self, value: Option<&String>, out: &mut Vec<f64>) {
        let start = out.len();
        out.resize(start + self.width(), 0.0);
        if let Some(v) = value {
            let slot = self.levels.iter().position(|l| l == v).unwrap_or(self.levels.len());
            out[start + slot] = 1.0;
        }
    }
}

/// Feature names of the two views, in coordinate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub flat: Vec<String>,
    pub step: Vec<String>,
    pub case: Vec<String>,
}

/// Fitted vocabularies and standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub activity_vocab: Vec<String>,
    pub event_numeric: Vec<String>,
    pub event_categorical: Vec<CappedVocab>,
    pub case_numeric: Vec<String>,
    pub case_categorical: Vec<CappedVocab>,
    /// `(mean, max, last)` per event numeric attribute, then the two time features.
    pub flat_stats: Vec<Standardizer>,
    /// One per event numeric attribute, then the two time features.
    pub step_stats: Vec<Standardizer>,
    pub case_stats: Vec<Standardizer>,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTensor {
    pub steps: Vec<Vec<f64>>,
    pub case_features: Vec<f64>,
}

/// Either view of a prefix, matching a base model kind.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedPrefix {
    Flat(FlatVector),
    Seq(SequenceTensor),
}

fn time_features(events: &[Event], i: usize) -> [f64; 2] {
    let since_start = (events[i].timestamp - events[0].timestamp) as f64;
    let since_prev = if i == 0 { 0.0 } else { (events[i].timestamp - events[i - 1].timestamp) as f64 };
    [since_start, since_prev]
}

/// `(mean, max, last)` over the events carrying `attr`; zeros when none do.
fn aggregate(events: &[Event], attr: &str) -> [f64; 3] {
    let vals: Vec<f64> = events.iter().filter_map(|e| e.numeric_attrs.get(attr).copied()).collect();
    match vals.last() {
        None => [0.0; 3],
        Some(&last) => {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [mean, max, last]
        }
    }
}

impl EncoderState {
    /// Fits on training prefixes only.
    pub fn fit(samples: &[PrefixSample], config: &EncoderConfig) -> Result<Self, EncodeError> {
        if samples.is_empty() {
            return Err(EncodeError::Empty);
        }
        let mut acts = BTreeSet::new();
        let mut ev_num = BTreeSet::new();
        let mut ev_cat = BTreeSet::new();
        let mut case_num = BTreeSet::new();
        let mut case_cat = BTreeSet::new();
        for s in samples {
            for e in &s.prefix {
                acts.insert(e.activity.clone());
                ev_num.extend(e.numeric_attrs.keys().cloned());
                ev_cat.extend(e.categorical_attrs.keys().cloned());
            }
            case_num.extend(s.case_numeric_attrs.keys().cloned());
            case_cat.extend(s.case_categorical_attrs.keys().cloned());
        }
        let activity_vocab: Vec<String> = acts.into_iter().collect();
        let event_numeric: Vec<String> = ev_num.into_iter().collect();
        let case_numeric: Vec<String> = case_num.into_iter().collect();
        let event_categorical: Vec<CappedVocab> = ev_cat
            .iter()
            .map(|a| {
                let vals = samples.iter().flat_map(|s| s.prefix.iter().filter_map(|e| e.categorical_attrs.get(a).map(String::as_str)));
                CappedVocab::fit(a, vals, config.categorical_cap)
            })
            .collect();
        let case_categorical: Vec<CappedVocab> = case_cat
            .iter()
            .map(|a| {
                let vals = samples.iter().filter_map(|s| s.case_categorical_attrs.get(a).map(String::as_str));
                CappedVocab::fit(a, vals, config.categorical_cap)
            })
            .collect();

        let mut flat_stats = Vec::new();
        for a in &event_numeric {
            let aggs: Vec<[f64; 3]> = samples.iter().map(|s| aggregate(&s.prefix, a)).collect();
            for k in 0..3 {
                flat_stats.push(Standardizer::fit(aggs.iter().map(|x| x[k])));
            }
        }
        for k in 0..2 {
            flat_stats.push(Standardizer::fit(samples.iter().map(|s| time_features(&s.prefix, s.prefix.len() - 1)[k])));
        }
        let mut step_stats = Vec::new();
        for a in &event_numeric {
            step_stats.push(Standardizer::fit(
                samples.iter().flat_map(|s| s.prefix.iter().map(|e| e.numeric_attrs.get(a).copied().unwrap_or(0.0))),
            ));
        }
        for k in 0..2 {
            step_stats
                .push(Standardizer::fit(samples.iter().flat_map(|s| (0..s.prefix.len()).map(move |i| time_features(&s.prefix, i)[k]))));
        }
        let case_stats = case_numeric
            .iter()
            .map(|a| Standardizer::fit(samples.iter().map(|s| s.case_numeric_attrs.get(a).copied().unwrap_or(0.0))))
            .collect();

        let mut state = Self {
            activity_vocab,
            event_numeric,
            event_categorical,
            case_numeric,
            case_categorical,
            flat_stats,
            step_stats,
            case_stats,
            layout: Layout { flat: vec![], step: vec![], case: vec![] },
        };
        state.layout = state.build_layout();
        Ok(state)
    }

    fn build_layout(&self) -> Layout {
        let acts: Vec<String> =
            self.activity_vocab.iter().map(|a| format!("activity={a}")).chain(std::iter::once("activity=<unknown>".to_string())).collect();
        let cats = |vs: &[CappedVocab], prefix: &str| -> Vec<String> {
            vs.iter()
                .flat_map(|v| {
                    v.levels
                        .iter()
                        .map(move |l| format!("{prefix}{}={l}", v.attr))
                        .chain(std::iter::once(format!("{prefix}{}=<other>", v.attr)))
                })
                .collect()
        };
        let case: Vec<String> =
            self.case_numeric.iter().map(|a| format!("case.{a}")).chain(cats(&self.case_categorical, "case.")).collect();
        let times = ["time.since_start".to_string(), "time.since_prev".to_string()];
        let mut flat: Vec<String> = acts.iter().map(|a| format!("count.{a}")).collect();
        for a in &self.event_numeric {
            flat.extend(["mean", "max", "last"].iter().map(|k| format!("{a}.{k}")));
        }
        flat.extend(cats(&self.event_categorical, "last."));
        flat.extend(case.iter().cloned());
        flat.extend(times.iter().cloned());
        let mut step = acts;
        step.extend(self.event_numeric.iter().cloned());
        step.extend(cats(&self.event_categorical, ""));
        step.extend(times.iter().cloned());
        Layout { flat, step, case }
    }

    pub fn flat_dim(&self) -> usize {
        self.layout.flat.len()
    }

    pub fn step_dim(&self) -> usize {
        self.layout.step.len()
    }

    pub fn case_dim(&self) -> usize {
        self.layout.case.len()
    }

    fn activity_slot(&self, activity: &str) -> usize {
        self.activity_vocab.binary_search_by(|a| a.as_str().cmp(activity)).unwrap_or(self.activity_vocab.len())
    }

    fn case_features(&self, sample: &PrefixSample) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .case_numeric
            .iter()
            .zip(&self.case_stats)
            .map(|(a, st)| st.apply(sample.case_numeric_attrs.get(a).copied().unwrap_or(0.0)))
            .collect();
        for v in &self.case_categorical {
            v.write_one_hot(sample.case_categorical_attrs.get(&v.attr), &mut out);
        }
        out
    }

    /// Aggregation encoding with last-event time features.
    pub fn encode_flat(&self, sample: &PrefixSample) -> FlatVector {
        let events = &sample.prefix;
        let mut out = vec![0.0; self.activity_vocab.len() + 1];
        for e in events {
            out[self.activity_slot(&e.activity)] += 1.0;
        }
        let mut stats = self.flat_stats.iter();
        for a in &self.event_numeric {
            for v in aggregate(events, a) {
                out.push(stats.next().expect("layout").apply(v));
            }
        }
        let last = events.last();
        for v in &self.event_categorical {
            v.write_one_hot(last.and_then(|e| e.categorical_attrs.get(&v.attr)), &mut out);
        }
        out.extend(self.case_features(sample));
        if !events.is_empty() {
            for v in time_features(events, events.len() - 1) {
                out.push(stats.next().expect("layout").apply(v));
            }
        } else {
            out.extend([0.0, 0.0]);
        }
        FlatVector(out)
    }

    /// Tensor encoding: one vector per event plus case-level features.
    pub fn encode_sequence(&self, sample: &PrefixSample) -> SequenceTensor {
        let events = &sample.prefix;
        let steps = (0..events.len())
            .map(|i| {
                let e = &events[i];
                let mut v = vec![0.0; self.activity_vocab.len() + 1];
                v[self.activity_slot(&e.activity)] = 1.0;
                let mut stats = self.step_stats.iter();
                for a in &self.event_numeric {
                    v.push(stats.next().expect("layout").apply(e.numeric_attrs.get(a).copied().unwrap_or(0.0)));
                }
                for c in &self.event_categorical {
                    c.write_one_hot(e.categorical_attrs.get(&c.attr), &mut v);
                }
                for t in time_features(events, i) {
                    v.push(stats.next().expect("layout").apply(t));
                }
                v
            })
            .collect();
        SequenceTensor { steps, case_features: self.case_features(sample) }
    }

    pub fn encode(&self, sample: &PrefixSample, sequential: bool) -> EncodedPrefix {
        if sequential {
            EncodedPrefix::Seq(self.encode_sequence(sample))
        } else {
            EncodedPrefix::Flat(self.encode_flat(sample))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::Event;

    fn ev(act: &str, t: i64, score: Option<f64>, res: Option<&str>) -> Event {
        Event {
            case_id: "c".into(),
            activity: act.into(),
            timestamp: t,
            numeric_attrs: score.map(|s| BTreeMap::from([("score".to_string(), s)])).unwrap_or_default(),
            categorical_attrs: res.map(|r| BTreeMap::from([("res".to_string(), r.to_string())])).unwrap_or_default(),
        }
    }

    fn sample(id: &str, prefix: Vec<Event>, amount: f64, sector: &str) -> PrefixSample {
        PrefixSample {
            case_id: id.into(),
            prefix,
            case_numeric_attrs: BTreeMap::from([("amount".to_string(), amount)]),
            case_categorical_attrs: BTreeMap::from([("sector".to_string(), sector.to_string())]),
            treatment: 0,
            outcome: 0.0,
            intervention_step: 1,
            case_start: 0,
        }
    }

    fn training() -> Vec<PrefixSample> {
        let levels = ["a", "b", "c", "d", "e", "f", "g", "h"];
        (0..16)
            .map(|i| {
                let lvl = levels[i % 8];
                sample(
                    &format!("c{i}"),
                    vec![ev("start", 0, None, Some(lvl)), ev("assess", 100 + i as i64, Some(i as f64), Some(lvl))],
                    5.0,
                    if i < 10 { "retail" } else { "tech" },
                )
            })
            .collect()
    }

    #[test]
    fn capping_and_guards() {
        let st = EncoderState::fit(&training(), &EncoderConfig::default()).unwrap();
        assert_eq!(st.event_categorical[0].width(), 7);
        assert_eq!(st.case_stats[0], Standardizer { mean: 5.0, std: 1.0 });
        assert_eq!(st.activity_vocab.len(), 2);
        assert!(st.layout.flat.contains(&"count.activity=<unknown>".to_string()));
        assert!(matches!(EncoderState::fit(&[], &EncoderConfig::default()), Err(EncodeError::Empty)));
    }

    #[test]
    fn three_activities_four_slots() {
        let s = vec![sample("x", vec![ev("a", 0, None, None), ev("b", 1, None, None), ev("c", 2, None, None)], 1.0, "r")];
        let st = EncoderState::fit(&s, &EncoderConfig::default()).unwrap();
        assert_eq!(st.layout.step.iter().filter(|n| n.starts_with("activity=")).count(), 4);
    }

    #[test]
    fn flat_single_event_and_aggregates() {
        let st = EncoderState::fit(&training(), &EncoderConfig::default()).unwrap();
        let one = sample("z", vec![ev("assess", 50, Some(2.0), None)], 5.0, "retail");
        let f = st.encode_flat(&one).0;
        let slot = st.activity_slot("assess");
        assert_eq!(f[slot], 1.0);
        assert_eq!(f.iter().take(3).sum::<f64>(), 1.0);
        let since_prev = *f.last().unwrap();
        assert_eq!(since_prev, st.flat_stats.last().unwrap().apply(0.0));
        assert_eq!(aggregate(&[ev("a", 0, Some(2.0), None), ev("a", 1, Some(4.0), None)], "score"), [3.0, 4.0, 4.0]);
    }

    #[test]
    fn unseen_level_goes_to_other() {
        let st = EncoderState::fit(&training(), &EncoderConfig::default()).unwrap();
        let s = sample("z", vec![ev("assess", 0, Some(1.0), Some("zzz"))], 5.0, "unknown-sector");
        let f = st.encode_flat(&s).0;
        let other = st.layout.flat.iter().position(|n| n == "last.res=<other>").unwrap();
        assert_eq!(f[other], 1.0);
        let case_other = st.layout.flat.iter().position(|n| n == "case.sector=<other>").unwrap();
        assert_eq!(f[case_other], 1.0);
    }

    #[test]
    fn sequence_shape_determinism_and_identity() {
        let st = EncoderState::fit(&training(), &EncoderConfig::default()).unwrap();
        let s =
            sample("z", vec![ev("start", 0, None, None), ev("assess", 5, Some(7.5), None), ev("assess", 9, Some(1.0), None)], 5.0, "tech");
        let a = st.encode_sequence(&s);
        assert_eq!(a.steps.len(), 3);
        assert!(a.steps.iter().all(|v| v.len() == st.step_dim()));
        assert_eq!(a, st.encode_sequence(&s));
        let mean = st.step_stats[0].mean;
        let t = sample("z", vec![ev("assess", 0, Some(mean), None)], 5.0, "tech");
        let idx = st.layout.step.iter().position(|n| n == "score").unwrap();
        assert_eq!(st.encode_sequence(&t).steps[0][idx], 0.0);
        // views agree on case-level values
        let flat = st.encode_flat(&s).0;
        let off = st.layout.flat.iter().position(|n| n == "case.amount").unwrap();
        assert_eq!(&flat[off..off + st.case_dim()], &a.case_features[..]);
    }

    #[test]
    fn training_coordinates_are_standardized() {
        let data = training();
        let st = EncoderState::fit(&data, &EncoderConfig::default()).unwrap();
        let flats: Vec<Vec<f64>> = data.iter().map(|s| st.encode_flat(s).0).collect();
        for (k, name) in st.layout.flat.iter().enumerate() {
            if !(name.starts_with("score.") || name.starts_with("time.")) {
                continue;
            }
            let col: Vec<f64> = flats.iter().map(|f| f[k]).collect();
            let s = Standardizer::fit(col.iter().copied());
            assert!(s.mean.abs() < 1e-9, "{name}");
            assert!((s.std - 1.0).abs() < 1e-6 || s.std == 1.0, "{name}: {}", s.std);
        }
    }
}
