//! Maximum-likelihood training: mini-batch Adam, early stopping on a
//! temporal validation split, seeded random hyperparameter search, and the
//! end-to-end [`fit_evaluator`] entry point.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::{Graph, Tensor};
use crate::encode::{EncodeError, EncoderConfig, EncoderState};
use crate::eventlog::{temporal_split, InterventionSpec, LogError, PrefixSample};
use crate::heads::{HeadError, HeadKind, HeadSpec};
use crate::learners::{
    BaseKind, BundleMeta, Dataset, EnsembleMode, EvaluatorBundle, InputDims, Inputs, LearnError, LearnerKind, Network, Objective,
    OutcomeEvaluator, TreatmentModel,
};
use crate::rng::Stream;

pub const BUNDLE_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}{}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    NonFinite { epoch: usize, batch: Option<usize> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("treatment level {level} has {count} samples, {required} required")]
    Coverage { level: u32, count: usize, required: usize },
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-6,
            seed: 0,
            hidden_dim: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, hidden_dim, max_epochs and patience must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be below max_epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam constants out of range");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Patience counter over epochs `1..`; an epoch improves when its loss is
/// below the best seen by at least `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, stale: 0 }
    }

    /// Records an epoch's validation loss; returns true when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        match self.best {
            Some(b) if loss > b - self.min_delta => self.stale += 1,
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub init_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// `0` when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

impl FitReport {
    /// `epoch,train_loss,val_loss`; epoch 0 is the initialization.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        let _ = writeln!(out, "0,,{:?}", self.init_val_loss);
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:?},{:?}", r.epoch, r.train_loss, r.val_loss);
        }
        out
    }
}

const EVAL_CHUNK: usize = 512;

/// Mean loss over the whole set, evaluated in fixed chunks.
pub fn dataset_loss(net: &Network, data: &Dataset, objective: Objective) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let p = net.store.bind_const(&mut g);
        let l = net.loss(&mut g, &p, data, chunk, objective)?;
        total += g.value(l).item().expect("scalar") * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains `net` in place and restores the best-validation snapshot.
pub fn mle_fit(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    let init_val_loss = dataset_loss(net, val, objective)?;
    if !init_val_loss.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, batch: None });
    }
    let mut adam = Adam::new(&net.store.tensors, cfg);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let (mut best_val, mut best_epoch, mut snapshot) = (init_val_loss, 0, net.store.tensors.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let shuffle = Stream::new(cfg.seed).with("shuffle");
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle.index(epoch as u64).rng());
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let p = net.store.bind(&mut g);
            let loss = net.loss(&mut g, &p, train, chunk, objective)?;
            let value = g.value(loss).item().expect("scalar");
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: Some(b) });
            }
            let grads = g.backward(loss).map_err(LearnError::from)?;
            let grads: Vec<Tensor> = p.iter().zip(&net.store.tensors).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();
            adam.update(&mut net.store.tensors, &grads);
            sum += value * chunk.len() as f64;
        }
        let val_loss = dataset_loss(net, val, objective)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: None });
        }
        epochs.push(EpochRecord { epoch, train_loss: sum / train.len() as f64, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            snapshot.clone_from(&net.store.tensors);
        }
        if stopper.update(val_loss) {
            stop = StopReason::Patience;
            break;
        }
    }
    net.store.tensors = snapshot;
    Ok(FitReport { init_val_loss, epochs, best_epoch, best_val_loss: best_val, stop })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub hidden_dims: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub budget: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { hidden_dims: vec![32, 64, 128], learning_rates: vec![1e-2, 1e-3, 1e-4], batch_sizes: vec![64, 128, 256], budget: 20 }
    }
}

impl SearchSpace {
    /// Grid points in fixed (hidden, lr, batch) order.
    pub fn grid(&self) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::new();
        for &h in &self.hidden_dims {
            for &lr in &self.learning_rates {
                for &b in &self.batch_sizes {
                    out.push((h, lr, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub config: TrainConfig,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult<T> {
    pub best: TrainConfig,
    pub best_val_loss: f64,
    pub best_output: T,
    pub trials: Vec<Trial>,
}

/// Seeded random search over `space`. `fit` returns the validation loss of a
/// configuration and whatever it produced; the winner's output is kept.
pub fn hyper_search<T, E, F>(space: &SearchSpace, base: &TrainConfig, seed: Stream, mut fit: F) -> Result<SearchResult<T>, E>
where
    E: From<TrainError>,
    F: FnMut(&TrainConfig) -> Result<(f64, T), E>,
{
    let grid = space.grid();
    if grid.is_empty() || space.budget == 0 {
        return Err(TrainError::Config("empty search grid or zero budget".into()).into());
    }
    let mut rng = seed.with("search").rng();
    let picks: Vec<usize> = if space.budget <= grid.len() {
        sample(&mut rng, grid.len(), space.budget).into_vec()
    } else {
        (0..space.budget).map(|_| rng.gen_range(0..grid.len())).collect()
    };
    let mut trials = Vec::new();
    let mut best: Option<(TrainConfig, f64, T)> = None;
    for (i, &k) in picks.iter().enumerate() {
        let (hidden_dim, learning_rate, batch_size) = grid[k];
        let cfg = TrainConfig { hidden_dim, learning_rate, batch_size, seed: seed.with("trial").index(i as u64).seed(), ..base.clone() };
        let (val, out) = fit(&cfg)?;
        trials.push(Trial { config: cfg.clone(), val_loss: val });
        let better = match &best {
            None => true,
            Some((b, bv, _)) => {
                let key = |c: &TrainConfig, v: f64| (v, c.hidden_dim, c.learning_rate, c.batch_size);
                let (a, z) = (key(&cfg, val), key(b, *bv));
                a.partial_cmp(&z).is_some_and(|o| o.is_lt()) || (z.0.is_nan() && !a.0.is_nan())
            }
        };
        if better {
            best = Some((cfg, val, out));
        }
    }
    let (best, best_val_loss, best_output) = best.expect("budget >= 1");
    Ok(SearchResult { best, best_val_loss, best_output, trials })
}

/// Outcome learner choice, including the three-member ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerChoice {
    S,
    T,
    #[serde(rename = "tarnet")]
    TarNet,
    Ensemble,
}

impl LearnerChoice {
    pub fn members(self) -> Vec<LearnerKind> {
        match self {
            Self::S => vec![LearnerKind::S],
            Self::T => vec![LearnerKind::T],
            Self::TarNet => vec![LearnerKind::TarNet],
            Self::Ensemble => vec![LearnerKind::S, LearnerKind::T, LearnerKind::TarNet],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub learner: LearnerChoice,
    pub base: BaseKind,
    pub head: HeadKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchSpace,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub ensemble_mode: EnsembleMode,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl EvaluatorConfig {
    pub fn new(learner: LearnerChoice, base: BaseKind, head: HeadKind, seed: u64) -> Self {
        Self {
            learner,
            base,
            head,
            train: TrainConfig::default(),
            search: SearchSpace::default(),
            encoder: EncoderConfig::default(),
            ensemble_mode: EnsembleMode::default(),
            val_fraction: default_val_fraction(),
            seed,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Minimum samples per treatment level for a T-learner.
pub const T_LEARNER_MIN_PER_ARM: usize = 10;

fn check_coverage(samples: &[PrefixSample], spec: &InterventionSpec, learner: LearnerChoice) -> Result<(), TrainError> {
    let mut counts: BTreeMap<u32, usize> = spec.arms().into_iter().map(|a| (a, 0)).collect();
    for s in samples {
        match counts.get_mut(&s.treatment) {
            Some(c) => *c += 1,
            None => return Err(LearnError::Treatment(s.treatment).into()),
        }
    }
    let required = if learner.members().contains(&LearnerKind::T) { T_LEARNER_MIN_PER_ARM } else { 1 };
    match counts.into_iter().find(|&(_, c)| c < required) {
        Some((level, count)) => Err(TrainError::Coverage { level, count, required }),
        None => Ok(()),
    }
}

/// Standardization of the continuous part, from non-atom training outcomes.
pub fn head_with_stats(kind: &HeadKind, outcomes: &[f64]) -> Result<HeadSpec, TrainError> {
    let head = HeadSpec::new(kind.clone())?;
    let cont: Vec<f64> = match kind {
        HeadKind::Gaussian => outcomes.to_vec(),
        HeadKind::MixedFlow { .. } => outcomes.iter().copied().filter(|&y| head.atom_index(y).is_none()).collect(),
        _ => return Ok(head),
    };
    if cont.len() < 2 {
        return Ok(head);
    }
    let mean = cont.iter().sum::<f64>() / cont.len() as f64;
    let std = (cont.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / cont.len() as f64).sqrt();
    Ok(head.with_standardization(mean, if std > 0.0 { std } else { 1.0 })?)
}

/// A fitted network with its own training report.
#[derive(Debug, Clone)]
pub struct FittedNet {
    pub net: Network,
    pub config: TrainConfig,
    pub report: FitReport,
}

/// Random search plus training for one network shape.
#[allow(clippy::too_many_arguments)]
pub fn search_and_fit(
    learner: LearnerKind,
    base: BaseKind,
    head: &HeadSpec,
    n_arms: usize,
    dims: InputDims,
    train: &Dataset,
    val: &Dataset,
    base_cfg: &TrainConfig,
    space: &SearchSpace,
    objective: Objective,
    seed: Stream,
) -> Result<FittedNet, TrainError> {
    let res = hyper_search::<_, TrainError, _>(space, base_cfg, seed, |cfg| {
        let mut net = Network::new(learner, base, head.clone(), n_arms, dims, cfg.hidden_dim, Stream::new(cfg.seed))?;
        let report = mle_fit(&mut net, train, val, cfg, objective)?;
        Ok((report.best_val_loss, (net, report)))
    })?;
    let (net, report) = res.best_output;
    Ok(FittedNet { net, config: res.best, report })
}

/// Fitted evaluator with the reports of every network trained for it.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub bundle: EvaluatorBundle,
    /// Outcome members in bundle order, then the treatment model.
    pub reports: Vec<(String, FitReport)>,
}

/// Splits, encodes, searches and trains every network of an evaluator.
pub fn fit_evaluator(samples: &[PrefixSample], spec: &InterventionSpec, cfg: &EvaluatorConfig) -> Result<FitOutcome, TrainError> {
    cfg.train.validate()?;
    check_coverage(samples, spec, cfg.learner)?;
    let (train_s, val_s) = temporal_split(samples, cfg.val_fraction)?;
    let encoder = EncoderState::fit(&train_s, &cfg.encoder)?;
    let outcomes: Vec<f64> = train_s.iter().map(|s| s.outcome).collect();
    let head = head_with_stats(&cfg.head, &outcomes)?;
    let train = Dataset::from_samples(&encoder, &train_s, spec, cfg.base)?;
    let val = Dataset::from_samples(&encoder, &val_s, spec, cfg.base)?;
    let dims = InputDims::of(&encoder);
    let n_arms = spec.arms().len();
    let master = Stream::new(cfg.seed);

    let mut jobs: Vec<Option<LearnerKind>> = cfg.learner.members().into_iter().map(Some).collect();
    jobs.push(None);
    let (t_train, t_val) = (train.arm_labels(), val.arm_labels());
    let t_head = TreatmentModel::head_for(n_arms)?;
    let fitted = jobs
        .par_iter()
        .map(|job| match job {
            Some(kind) => search_and_fit(
                *kind,
                cfg.base,
                &head,
                n_arms,
                dims,
                &train,
                &val,
                &cfg.train,
                &cfg.search,
                Objective::Nll,
                master.with("outcome").with(kind.name()),
            ),
            None => search_and_fit(
                LearnerKind::S,
                cfg.base,
                &t_head,
                0,
                dims,
                &t_train,
                &t_val,
                &cfg.train,
                &cfg.search,
                Objective::Nll,
                master.with("treatment"),
            ),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut fitted = fitted.into_iter();
    let mut members = Vec::new();
    let mut reports = Vec::new();
    for kind in cfg.learner.members() {
        let f = fitted.next().expect("one fit per job");
        reports.push((format!("{}-{}", kind.name(), cfg.base.name()), f.report));
        members.push(f.net);
    }
    let t = fitted.next().expect("treatment fit");
    reports.push(("treatment".to_string(), t.report));
    let outcome = if cfg.learner == LearnerChoice::Ensemble {
        OutcomeEvaluator::Ensemble { members, mode: cfg.ensemble_mode }
    } else {
        OutcomeEvaluator::Single(members.pop().expect("one member"))
    };
    let label = outcome.label();
    let bundle = EvaluatorBundle {
        version: BUNDLE_VERSION.to_string(),
        intervention: spec.clone(),
        encoder,
        base: cfg.base,
        head,
        outcome,
        treatment: TreatmentModel { net: t.net, marginal: TreatmentModel::marginal_of(&train.arms, n_arms) },
        metadata: BundleMeta { seed: cfg.seed, config_hash: cfg.hash(), label },
    };
    Ok(FitOutcome { bundle, reports })
}

/// A plain outcome regressor used by informed policies: Gaussian head mean
/// trained on squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEstimator {
    pub name: String,
    pub encoder: EncoderState,
    pub net: Network,
    pub arms: Vec<u32>,
}

impl PolicyEstimator {
    /// Expected outcome of each arm for each sample, `out[row][arm]`.
    pub fn expected_outcomes(&self, samples: &[PrefixSample]) -> Result<Vec<Vec<f64>>, TrainError> {
        if samples.is_empty() {
            return Ok(vec![]);
        }
        let inputs = Inputs::encode(&self.encoder, samples, self.net.base);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut out = vec![Vec::with_capacity(self.arms.len()); samples.len()];
        for arm in 0..self.arms.len() {
            for (row, p) in self.net.predict_params(&inputs, &idx, arm)?.iter().enumerate() {
                out[row].push(self.net.head.mean(p)?);
            }
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fit_policy_estimator(
    name: &str,
    learner: LearnerKind,
    base: BaseKind,
    samples: &[PrefixSample],
    spec: &InterventionSpec,
    train_cfg: &TrainConfig,
    space: &SearchSpace,
    encoder_cfg: &EncoderConfig,
    seed: u64,
) -> Result<PolicyEstimator, TrainError> {
    let lc = match learner {
        LearnerKind::S => LearnerChoice::S,
        LearnerKind::T => LearnerChoice::T,
        LearnerKind::TarNet => LearnerChoice::TarNet,
    };
    check_coverage(samples, spec, lc)?;
    let (train_s, val_s) = temporal_split(samples, 0.2)?;
    let encoder = EncoderState::fit(&train_s, encoder_cfg)?;
    let outcomes: Vec<f64> = train_s.iter().map(|s| s.outcome).collect();
    let head = head_with_stats(&HeadKind::Gaussian, &outcomes)?;
    let train = Dataset::from_samples(&encoder, &train_s, spec, base)?;
    let val = Dataset::from_samples(&encoder, &val_s, spec, base)?;
    let fitted = search_and_fit(
        learner,
        base,
        &head,
        spec.arms().len(),
        InputDims::of(&encoder),
        &train,
        &val,
        train_cfg,
        space,
        Objective::SquaredError,
        Stream::new(seed).with("estimator").with(name),
    )?;
    Ok(PolicyEstimator { name: name.to_string(), encoder, net: fitted.net, arms: spec.arms() })
}
