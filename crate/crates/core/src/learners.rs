//! Causal learners for `P(Y | T, X)`: S-learner, T-learner, TARNet and their
//! sample-averaging ensemble, plus the treatment model for `P(T | X)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Graph, ShapeError, Tensor, Var};
use crate::encode::{EncoderState, SequenceTensor};
use crate::eventlog::{InterventionSpec, PrefixSample};
use crate::heads::{DistParams, HeadError, HeadKind, HeadSpec};
use crate::nn::{Linear, Lstm, Mlp, NnError, ParamStore, SeqBatch};
use crate::rng::Stream;

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("arm {arm} out of range for {n_arms} arms")]
    Arm { arm: usize, n_arms: usize },
    #[error("treatment code {0} is not an arm of the intervention")]
    Treatment(u32),
    #[error("input kind does not match the {0:?} base")]
    BaseMismatch(BaseKind),
    #[error("empty input")]
    Empty,
    #[error("knob {0} outside [0, 1]")]
    Knob(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    S,
    T,
    #[serde(rename = "tarnet")]
    TarNet,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::S => "s",
            Self::T => "t",
            Self::TarNet => "tarnet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Mlp,
    Lstm,
}

impl BaseKind {
    pub fn sequential(self) -> bool {
        self == Self::Lstm
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Lstm => "lstm",
        }
    }
}

/// Training objective: likelihood, or squared error on the first raw output
/// (the mean of a Gaussian head) for plain outcome regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nll,
    SquaredError,
}

/// Encoded prefixes in the view a base model consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Flat(Vec<Vec<f64>>),
    Seq(Vec<SequenceTensor>),
}

/// A mini-batch ready for a base model.
#[derive(Debug, Clone)]
pub enum BatchInput {
    Flat(Tensor),
    Seq(SeqBatch),
}

fn onehot_row(arm: usize, width: usize) -> impl Iterator<Item = f64> {
    (0..width).map(move |k| if k == arm { 1.0 } else { 0.0 })
}

impl Inputs {
    pub fn encode(encoder: &EncoderState, samples: &[PrefixSample], base: BaseKind) -> Self {
        match base {
            BaseKind::Mlp => Self::Flat(samples.iter().map(|s| encoder.encode_flat(s).0).collect()),
            BaseKind::Lstm => Self::Seq(samples.iter().map(|s| encoder.encode_sequence(s)).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Flat(v) => v.len(),
            Self::Seq(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn base(&self) -> BaseKind {
        match self {
            Self::Flat(_) => BaseKind::Mlp,
            Self::Seq(_) => BaseKind::Lstm,
        }
    }

    /// Rows `idx`, optionally with `onehot(arm)` of the given width appended
    /// to the flat vector or to the case features.
    pub fn batch(&self, idx: &[usize], onehot: Option<(&[usize], usize)>) -> Result<BatchInput, LearnError> {
        if idx.is_empty() {
            return Err(LearnError::Empty);
        }
        let extra = |pos: usize| -> Vec<f64> {
            match onehot {
                Some((arms, w)) => onehot_row(arms[pos], w).collect(),
                None => vec![],
            }
        };
        match self {
            Self::Flat(rows) => {
                let data: Vec<Vec<f64>> =
                    idx.iter().enumerate().map(|(pos, &i)| rows[i].iter().copied().chain(extra(pos)).collect()).collect();
                Ok(BatchInput::Flat(Tensor::from_rows(&data)?))
            }
            Self::Seq(seqs) => {
                let chosen: Vec<&SequenceTensor> = idx.iter().map(|&i| &seqs[i]).collect();
                let mut batch = SeqBatch::new(&chosen, None)?;
                if onehot.is_some() {
                    let rows: Vec<Vec<f64>> =
                        idx.iter().enumerate().map(|(pos, &i)| seqs[i].case_features.iter().copied().chain(extra(pos)).collect()).collect();
                    batch.case = Tensor::from_rows(&rows)?;
                }
                Ok(BatchInput::Seq(batch))
            }
        }
    }
}

/// Encoded samples with arm indices and outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub arms: Vec<usize>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn from_samples(
        encoder: &EncoderState,
        samples: &[PrefixSample],
        spec: &InterventionSpec,
        base: BaseKind,
    ) -> Result<Self, LearnError> {
        let arms = samples.iter().map(|s| spec.arm_of(s.treatment).ok_or(LearnError::Treatment(s.treatment))).collect::<Result<_, _>>()?;
        Ok(Self { inputs: Inputs::encode(encoder, samples, base), arms, y: samples.iter().map(|s| s.outcome).collect() })
    }

    /// Treatment-model view: the label is the arm index.
    pub fn arm_labels(&self) -> Self {
        Self { inputs: self.inputs.clone(), arms: vec![0; self.arms.len()], y: self.arms.iter().map(|&a| a as f64).collect() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Input widths a base model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub flat: usize,
    pub step: usize,
    pub case: usize,
}

impl InputDims {
    pub fn of(encoder: &EncoderState) -> Self {
        Self { flat: encoder.flat_dim(), step: encoder.step_dim(), case: encoder.case_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseNet {
    Mlp(Mlp),
    Lstm(Lstm),
}

impl BaseNet {
    /// `extra` columns join the flat input (MLP) or the case features (LSTM).
    fn init(
        store: &mut ParamStore,
        name: &str,
        kind: BaseKind,
        dims: InputDims,
        extra: usize,
        hidden: usize,
        seed: Stream,
    ) -> Result<Self, NnError> {
        Ok(match kind {
            BaseKind::Mlp => Self::Mlp(Mlp::init(store, name, &[dims.flat + extra, hidden, hidden], seed)?),
            BaseKind::Lstm => Self::Lstm(Lstm::init(store, name, dims.step, hidden, dims.case + extra, hidden, seed)?),
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], input: &BatchInput) -> Result<Var, LearnError> {
        match (self, input) {
            (Self::Mlp(m), BatchInput::Flat(x)) => {
                let x = g.constant(x.clone());
                Ok(m.forward(g, p, x)?)
            }
            (Self::Lstm(l), BatchInput::Seq(b)) => Ok(l.forward(g, p, b)?),
            (Self::Mlp(_), _) => Err(LearnError::BaseMismatch(BaseKind::Mlp)),
            (Self::Lstm(_), _) => Err(LearnError::BaseMismatch(BaseKind::Lstm)),
        }
    }
}

/// A learner network with its own parameters.
///
/// `n_arms` is the number of treatment arms the network conditions on; the
/// treatment model uses an S-shaped network with `n_arms = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub learner: LearnerKind,
    pub base: BaseKind,
    pub hidden: usize,
    pub n_arms: usize,
    pub head: HeadSpec,
    pub store: ParamStore,
    pub bases: Vec<BaseNet>,
    pub towers: Vec<Mlp>,
    pub projections: Vec<Linear>,
}

impl Network {
    pub fn new(
        learner: LearnerKind,
        base: BaseKind,
        head: HeadSpec,
        n_arms: usize,
        dims: InputDims,
        hidden: usize,
        seed: Stream,
    ) -> Result<Self, LearnError> {
        head.validate()?;
        if learner != LearnerKind::S && n_arms == 0 {
            return Err(NnError::Dim(format!("{} learner needs at least one arm", learner.name())).into());
        }
        let mut store = ParamStore::new();
        let (mut bases, mut towers, mut projections) = (Vec::new(), Vec::new(), Vec::new());
        match learner {
            LearnerKind::S => {
                bases.push(BaseNet::init(&mut store, "s.base", base, dims, n_arms, hidden, seed)?);
                projections.push(head.init_projection(&mut store, "s.head", hidden, seed)?);
            }
            LearnerKind::T => {
                for k in 0..n_arms {
                    bases.push(BaseNet::init(&mut store, &format!("t{k}.base"), base, dims, 0, hidden, seed)?);
                    projections.push(head.init_projection(&mut store, &format!("t{k}.head"), hidden, seed)?);
                }
            }
            LearnerKind::TarNet => {
                bases.push(BaseNet::init(&mut store, "tarnet.shared", base, dims, 0, hidden, seed)?);
                for k in 0..n_arms {
                    towers.push(Mlp::init(&mut store, &format!("tarnet.tower{k}"), &[hidden, hidden], seed)?);
                    projections.push(head.init_projection(&mut store, &format!("tarnet.head{k}"), hidden, seed)?);
                }
            }
        }
        Ok(Self { learner, base, hidden, n_arms, head, store, bases, towers, projections })
    }

    fn features(&self, g: &mut Graph, p: &[Var], k: usize, input: &BatchInput) -> Result<Var, LearnError> {
        let h = self.bases[k].forward(g, p, input)?;
        Ok(g.tanh(h))
    }

    /// Raw head parameters grouped by branch; each group carries the
    /// positions (into `idx`) of its rows.
    fn raw_groups(
        &self,
        g: &mut Graph,
        p: &[Var],
        inputs: &Inputs,
        idx: &[usize],
        arms: &[usize],
    ) -> Result<Vec<(Var, Vec<usize>)>, LearnError> {
        if let Some(&arm) = arms.iter().find(|&&a| a >= self.n_arms.max(1)) {
            return Err(LearnError::Arm { arm, n_arms: self.n_arms });
        }
        let by_arm = |k: usize| -> Vec<usize> { (0..idx.len()).filter(|&i| arms[i] == k).collect() };
        match self.learner {
            LearnerKind::S => {
                let onehot = (self.n_arms > 0).then_some((arms, self.n_arms));
                let input = inputs.batch(idx, onehot)?;
                let h = self.features(g, p, 0, &input)?;
                Ok(vec![(self.projections[0].forward(g, p, h)?, (0..idx.len()).collect())])
            }
            LearnerKind::T => {
                let mut out = Vec::new();
                for k in 0..self.n_arms {
                    let pos = by_arm(k);
                    if pos.is_empty() {
                        continue;
                    }
                    let sub: Vec<usize> = pos.iter().map(|&i| idx[i]).collect();
                    let input = inputs.batch(&sub, None)?;
                    let h = self.features(g, p, k, &input)?;
                    out.push((self.projections[k].forward(g, p, h)?, pos));
                }
                Ok(out)
            }
            LearnerKind::TarNet => {
                let input = inputs.batch(idx, None)?;
                let shared = self.features(g, p, 0, &input)?;
                let mut out = Vec::new();
                for k in 0..self.n_arms {
                    let pos = by_arm(k);
                    if pos.is_empty() {
                        continue;
                    }
                    let hk = g.gather_rows(shared, &pos)?;
                    let t = self.towers[k].forward(g, p, hk)?;
                    let t = g.tanh(t);
                    out.push((self.projections[k].forward(g, p, t)?, pos));
                }
                Ok(out)
            }
        }
    }

    /// Mean loss over rows `idx` of `data` as a `1 x 1` node.
    pub fn loss(&self, g: &mut Graph, p: &[Var], data: &Dataset, idx: &[usize], objective: Objective) -> Result<Var, LearnError> {
        let arms: Vec<usize> = idx.iter().map(|&i| data.arms[i]).collect();
        let groups = self.raw_groups(g, p, &data.inputs, idx, &arms)?;
        let mut total = g.constant(Tensor::scalar(0.0));
        for (raw, pos) in groups {
            let y: Vec<f64> = pos.iter().map(|&i| data.y[idx[i]]).collect();
            let part = match objective {
                Objective::Nll => self.head.log_prob_graph(g, raw, &y)?,
                Objective::SquaredError => {
                    let mean = g.slice(raw, crate::diffcore::Axis::Cols, 0, 1)?;
                    let target = y.iter().map(|v| (v - self.head.y_mean) / self.head.y_std).collect();
                    let target = g.constant(Tensor::column(target));
                    let d = g.sub(mean, target)?;
                    let d = g.square(d);
                    let s = g.sum_all(d);
                    g.neg(s)
                }
            };
            total = g.add(total, part)?;
        }
        Ok(g.scale(total, -1.0 / idx.len() as f64))
    }

    /// Raw head parameters of rows `idx` when every row receives `arm`.
    pub fn raw_for_arm(&self, inputs: &Inputs, idx: &[usize], arm: usize) -> Result<Tensor, LearnError> {
        let mut g = Graph::new();
        let p = self.store.bind_const(&mut g);
        let arms = vec![arm; idx.len()];
        let groups = self.raw_groups(&mut g, &p, inputs, idx, &arms)?;
        let (raw, _) = groups.into_iter().next().ok_or(LearnError::Empty)?;
        Ok(g.value(raw).clone())
    }

    pub fn predict_params(&self, inputs: &Inputs, idx: &[usize], arm: usize) -> Result<Vec<DistParams>, LearnError> {
        Ok(self.head.project(&self.raw_for_arm(inputs, idx, arm)?)?)
    }
}

/// How ensemble members' samples combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Sample `i` is the mean of one draw from each member.
    #[default]
    Mean,
    /// Sample `i` comes from one uniformly chosen member.
    Pool,
}

/// Draws `n` outcomes given one parameter set per member (a single model
/// passes one). Every member's draw `i` uses substream `i`, so averaging
/// pairs up draws at common quantiles.
pub fn sample_members(head: &HeadSpec, params: &[DistParams], mode: EnsembleMode, n: usize, stream: Stream) -> Result<Vec<f64>, HeadError> {
    use rand::Rng;
    let k = params.len();
    (0..n as u64)
        .map(|i| {
            let s = stream.index(i);
            if k == 1 {
                return head.sample(&params[0], &mut s.rng());
            }
            match mode {
                EnsembleMode::Mean => {
                    let mut acc = 0.0;
                    for p in params {
                        acc += head.sample(p, &mut s.rng())?;
                    }
                    Ok(acc / k as f64)
                }
                EnsembleMode::Pool => {
                    let m = s.with("member").rng().gen_range(0..k);
                    head.sample(&params[m], &mut s.rng())
                }
            }
        })
        .collect()
}

/// Difference of sample means under two arms using the same substreams.
pub fn estimate_cate(
    head: &HeadSpec,
    params_t: &[DistParams],
    params_u: &[DistParams],
    mode: EnsembleMode,
    n: usize,
    stream: Stream,
) -> Result<f64, HeadError> {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let a = mean(sample_members(head, params_t, mode, n, stream)?);
    let b = mean(sample_members(head, params_u, mode, n, stream)?);
    Ok(a - b)
}

/// A single learner or the three-member ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeEvaluator {
    Single(Network),
    Ensemble { members: Vec<Network>, mode: EnsembleMode },
}

impl OutcomeEvaluator {
    pub fn members(&self) -> &[Network] {
        match self {
            Self::Single(n) => std::slice::from_ref(n),
            Self::Ensemble { members, .. } => members,
        }
    }

    pub fn members_mut(&mut self) -> &mut [Network] {
        match self {
            Self::Single(n) => std::slice::from_mut(n),
            Self::Ensemble { members, .. } => members,
        }
    }

    pub fn mode(&self) -> EnsembleMode {
        match self {
            Self::Single(_) => EnsembleMode::Mean,
            Self::Ensemble { mode, .. } => *mode,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Single(n) => format!("{}-{}", n.learner.name(), n.base.name()),
            Self::Ensemble { members, .. } => format!("ensemble-{}", members[0].base.name()),
        }
    }

    /// `out[row][member]` parameters for every row under `arm`.
    pub fn params_for_arm(&self, inputs: &Inputs, idx: &[usize], arm: usize) -> Result<Vec<Vec<DistParams>>, LearnError> {
        let per_member = self.members().iter().map(|m| m.predict_params(inputs, idx, arm)).collect::<Result<Vec<_>, _>>()?;
        Ok((0..idx.len()).map(|r| per_member.iter().map(|ps| ps[r].clone()).collect()).collect())
    }
}

/// `α · marginal + (1 − α) · conditional`, renormalized.
pub fn knob_mix(marginal: &[f64], conditional: &[f64], alpha: f64) -> Result<Vec<f64>, LearnError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LearnError::Knob(alpha));
    }
    if marginal.len() != conditional.len() {
        return Err(ShapeError::new("knob", [1, marginal.len()], [1, conditional.len()]).into());
    }
    let mixed: Vec<f64> = marginal.iter().zip(conditional).map(|(m, c)| alpha * m + (1.0 - alpha) * c).collect();
    let z: f64 = mixed.iter().sum();
    Ok(mixed.iter().map(|v| v / z).collect())
}

/// `P(T | X)` with a deconfounding knob toward the empirical marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModel {
    pub net: Network,
    pub marginal: Vec<f64>,
}

impl TreatmentModel {
    /// Bernoulli head for two arms, categorical otherwise.
    pub fn head_for(n_arms: usize) -> Result<HeadSpec, HeadError> {
        if n_arms == 2 {
            HeadSpec::new(HeadKind::Bernoulli)
        } else {
            HeadSpec::new(HeadKind::Categorical { classes: n_arms })
        }
    }

    pub fn marginal_of(arms: &[usize], n_arms: usize) -> Vec<f64> {
        let mut counts = vec![0.0; n_arms];
        for &a in arms {
            counts[a] += 1.0;
        }
        let n = arms.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }

    pub fn conditional_probs(&self, inputs: &Inputs, idx: &[usize]) -> Result<Vec<Vec<f64>>, LearnError> {
        let params = self.net.predict_params(inputs, idx, 0)?;
        Ok(params.iter().map(|p| p.probs().expect("discrete head")).collect())
    }

    /// Arm distribution per row after applying the knob.
    pub fn predict_params(&self, inputs: &Inputs, idx: &[usize], alpha: f64) -> Result<Vec<DistParams>, LearnError> {
        self.conditional_probs(inputs, idx)?
            .iter()
            .map(|c| {
                let q = knob_mix(&self.marginal, c, alpha)?;
                Ok(match self.net.head.kind {
                    HeadKind::Bernoulli => DistParams::Bernoulli { logit: q[1].ln() - q[0].ln() },
                    _ => DistParams::Categorical { logits: q.iter().map(|v| v.ln()).collect() },
                })
            })
            .collect()
    }
}

/// Everything needed to generate outcomes for new prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorBundle {
    pub version: String,
    pub intervention: InterventionSpec,
    pub encoder: EncoderState,
    pub base: BaseKind,
    pub head: HeadSpec,
    pub outcome: OutcomeEvaluator,
    pub treatment: TreatmentModel,
    pub metadata: BundleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub seed: u64,
    pub config_hash: String,
    pub label: String,
}

impl EvaluatorBundle {
    pub fn inputs(&self, samples: &[PrefixSample]) -> Inputs {
        Inputs::encode(&self.encoder, samples, self.base)
    }

    pub fn n_arms(&self) -> usize {
        self.intervention.arms().len()
    }

    /// `n` outcome samples for each row under `arm`; row `r` uses
    /// `stream.index(r)`.
    pub fn sample_outcomes(&self, inputs: &Inputs, arm: usize, n: usize, stream: Stream) -> Result<Vec<Vec<f64>>, LearnError> {
        let idx: Vec<usize> = (0..inputs.len()).collect();
        let params = self.outcome.params_for_arm(inputs, &idx, arm)?;
        params.iter().enumerate().map(|(r, p)| Ok(sample_members(&self.head, p, self.outcome.mode(), n, stream.index(r as u64))?)).collect()
    }

    /// Ancestral draw of `(arm, outcome)` per row: the arm from the treatment
    /// model under knob `alpha`, then one outcome under that arm.
    pub fn generate(&self, inputs: &Inputs, alpha: f64, stream: Stream) -> Result<Vec<(usize, f64)>, LearnError> {
        let idx: Vec<usize> = (0..inputs.len()).collect();
        let t_params = self.treatment.predict_params(inputs, &idx, alpha)?;
        let arms = t_params
            .iter()
            .enumerate()
            .map(|(r, p)| Ok(self.treatment.net.head.sample(p, &mut stream.with("treatment").index(r as u64).rng())? as usize))
            .collect::<Result<Vec<_>, LearnError>>()?;
        let mut out = vec![(0, 0.0); idx.len()];
        for arm in 0..self.n_arms() {
            let rows: Vec<usize> = idx.iter().copied().filter(|&r| arms[r] == arm).collect();
            if rows.is_empty() {
                continue;
            }
            let params = self.outcome.params_for_arm(inputs, &rows, arm)?;
            for (&r, p) in rows.iter().zip(&params) {
                let y = sample_members(&self.head, p, self.outcome.mode(), 1, stream.with("outcome").index(r as u64))?[0];
                out[r] = (arm, y);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> InputDims {
        InputDims { flat: 3, step: 2, case: 1 }
    }

    fn flat_inputs() -> Inputs {
        Inputs::Flat(vec![vec![0.1, -0.5, 1.0], vec![2.0, 0.3, -1.0], vec![0.0, 0.0, 0.7]])
    }

    fn seq_inputs() -> Inputs {
        Inputs::Seq(vec![
            SequenceTensor { steps: vec![vec![1.0, 0.0]], case_features: vec![0.5] },
            SequenceTensor { steps: vec![vec![0.2, 1.0], vec![-0.3, 0.4]], case_features: vec![-1.0] },
        ])
    }

    fn gaussian() -> HeadSpec {
        HeadSpec::new(HeadKind::Gaussian).unwrap()
    }

    #[test]
    fn s_learner_ignores_zeroed_treatment_inputs() {
        let mut net = Network::new(LearnerKind::S, BaseKind::Mlp, gaussian(), 3, dims(), 4, Stream::new(0)).unwrap();
        let BaseNet::Mlp(m) = &net.bases[0] else { panic!() };
        let w = m.layers[0].weight;
        for r in 3..6 {
            for c in 0..4 {
                net.store.tensors[w].data_mut()[r * 4 + c] = 0.0;
            }
        }
        let x = flat_inputs();
        let a = net.raw_for_arm(&x, &[0, 1, 2], 0).unwrap();
        for arm in 1..3 {
            assert_eq!(net.raw_for_arm(&x, &[0, 1, 2], arm).unwrap(), a);
        }
        assert!(matches!(net.raw_for_arm(&x, &[0], 3), Err(LearnError::Arm { .. })));
    }

    #[test]
    fn t_learner_branches_differ_and_tarnet_symmetry() {
        let x = flat_inputs();
        let net = Network::new(LearnerKind::T, BaseKind::Mlp, gaussian(), 2, dims(), 4, Stream::new(1)).unwrap();
        assert_ne!(net.raw_for_arm(&x, &[0, 1], 0).unwrap(), net.raw_for_arm(&x, &[0, 1], 1).unwrap());
        assert_eq!(net.bases.len(), 2);

        for base in [BaseKind::Mlp, BaseKind::Lstm] {
            let x = if base == BaseKind::Mlp { flat_inputs() } else { seq_inputs() };
            let mut net = Network::new(LearnerKind::TarNet, base, gaussian(), 3, dims(), 4, Stream::new(2)).unwrap();
            let src: Vec<Tensor> = [&net.towers[0].layers[0], &net.projections[0]]
                .iter()
                .flat_map(|l| [net.store.tensors[l.weight].clone(), net.store.tensors[l.bias].clone()])
                .collect();
            for k in 1..3 {
                let dst = [net.towers[k].layers[0].clone(), net.projections[k].clone()];
                for (j, l) in dst.iter().enumerate() {
                    net.store.tensors[l.weight] = src[2 * j].clone();
                    net.store.tensors[l.bias] = src[2 * j + 1].clone();
                }
            }
            let a = net.raw_for_arm(&x, &[0, 1], 0).unwrap();
            assert_eq!(net.raw_for_arm(&x, &[0, 1], 2).unwrap(), a);
        }
    }

    #[test]
    fn batch_rejects_wrong_base() {
        let net = Network::new(LearnerKind::S, BaseKind::Lstm, gaussian(), 2, dims(), 4, Stream::new(0)).unwrap();
        assert!(matches!(net.raw_for_arm(&flat_inputs(), &[0], 0), Err(LearnError::BaseMismatch(BaseKind::Lstm))));
        assert!(net.raw_for_arm(&seq_inputs(), &[0, 1], 1).is_ok());
    }

    #[test]
    fn loss_routes_agree_with_scalar_log_probs() {
        let head = HeadSpec::new(HeadKind::MixedFlow { atoms: vec![0.0], components: 2 }).unwrap();
        for learner in [LearnerKind::S, LearnerKind::T, LearnerKind::TarNet] {
            let net = Network::new(learner, BaseKind::Mlp, head.clone(), 2, dims(), 4, Stream::new(3)).unwrap();
            let data = Dataset { inputs: flat_inputs(), arms: vec![1, 0, 1], y: vec![0.0, 1.3, -0.4] };
            let mut g = Graph::new();
            let p = net.store.bind_const(&mut g);
            let l = net.loss(&mut g, &p, &data, &[0, 1, 2], Objective::Nll).unwrap();
            let mut expect = 0.0;
            for i in 0..3 {
                let dp = net.predict_params(&data.inputs, &[i], data.arms[i]).unwrap();
                expect -= head.log_prob(&dp[0], data.y[i]).unwrap();
            }
            assert!((g.value(l).item().unwrap() - expect / 3.0).abs() < 1e-12, "{learner:?}");
        }
    }

    fn point_mass(v: f64) -> (HeadSpec, DistParams) {
        let head = HeadSpec::new(HeadKind::MixedFlow { atoms: vec![0.0, 3.0, 6.0], components: 1 }).unwrap();
        let slot = [0.0, 3.0, 6.0].iter().position(|&a| a == v).unwrap();
        let mut mix = vec![f64::NEG_INFINITY; 4];
        mix[slot] = 0.0;
        (head, DistParams::MixedFlow { mix_logits: mix, w_logits: vec![0.0], a_raw: vec![0.0], b: vec![0.0] })
    }

    #[test]
    fn ensemble_sampling_rules() {
        let (head, p0) = point_mass(0.0);
        let (_, p3) = point_mass(3.0);
        let (_, p6) = point_mass(6.0);
        let members = [p0.clone(), p3.clone(), p6.clone()];
        let s = sample_members(&head, &members, EnsembleMode::Mean, 20, Stream::new(4)).unwrap();
        assert!(s.iter().all(|&v| v == 3.0));
        let pooled = sample_members(&head, &members, EnsembleMode::Pool, 300, Stream::new(4)).unwrap();
        for v in [0.0, 3.0, 6.0] {
            let c = pooled.iter().filter(|&&x| x == v).count();
            assert!((70..130).contains(&c), "{v}: {c}");
        }

        let g = gaussian();
        let p = DistParams::Gaussian { mean: 0.4, log_var: -0.3 };
        let avg = sample_members(&g, &[p.clone(), p.clone(), p.clone()], EnsembleMode::Mean, 50, Stream::new(5)).unwrap();
        // identical members draw at common quantiles, so averaging is a no-op
        let single = sample_members(&g, std::slice::from_ref(&p), EnsembleMode::Mean, 50, Stream::new(5)).unwrap();
        for (i, (v, w)) in avg.iter().zip(&single).enumerate() {
            let by_hand = g.sample(&p, &mut Stream::new(5).index(i as u64).rng()).unwrap();
            assert!((v - by_hand).abs() < 1e-12 && (w - by_hand).abs() < 1e-12);
        }
        assert_eq!(avg, sample_members(&g, &[p.clone(), p.clone(), p], EnsembleMode::Mean, 50, Stream::new(5)).unwrap());
    }

    #[test]
    fn cate_rules() {
        let (head, p3) = point_mass(3.0);
        let (_, p6) = point_mass(6.0);
        assert_eq!(
            estimate_cate(&head, std::slice::from_ref(&p3), std::slice::from_ref(&p3), EnsembleMode::Mean, 10, Stream::new(0)).unwrap(),
            0.0
        );
        assert_eq!(
            estimate_cate(&head, std::slice::from_ref(&p6), std::slice::from_ref(&p3), EnsembleMode::Mean, 10, Stream::new(0)).unwrap(),
            3.0
        );
        let g = gaussian();
        let a = [DistParams::Gaussian { mean: 1.0, log_var: 0.2 }];
        let b = [DistParams::Gaussian { mean: -0.5, log_var: 0.0 }];
        let fwd = estimate_cate(&g, &a, &b, EnsembleMode::Mean, 40, Stream::new(8)).unwrap();
        let rev = estimate_cate(&g, &b, &a, EnsembleMode::Mean, 40, Stream::new(8)).unwrap();
        assert_eq!(fwd, -rev);
    }

    #[test]
    fn knob_endpoints_and_midpoint() {
        assert_eq!(knob_mix(&[0.5, 0.5], &[1.0, 0.0], 0.5).unwrap(), vec![0.75, 0.25]);
        assert_eq!(knob_mix(&[0.2, 0.3, 0.5], &[0.9, 0.05, 0.05], 1.0).unwrap(), vec![0.2, 0.3, 0.5]);
        assert!(knob_mix(&[0.5, 0.5], &[0.5, 0.5], 1.5).is_err());

        let head = TreatmentModel::head_for(3).unwrap();
        let net = Network::new(LearnerKind::S, BaseKind::Mlp, head, 0, dims(), 4, Stream::new(6)).unwrap();
        let tm = TreatmentModel { net, marginal: vec![0.2, 0.3, 0.5] };
        let x = flat_inputs();
        for p in tm.predict_params(&x, &[0, 1, 2], 1.0).unwrap() {
            let q = p.probs().unwrap();
            let tv: f64 = q.iter().zip(&tm.marginal).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(tv < 1e-15);
        }
        let cond = tm.conditional_probs(&x, &[0, 1, 2]).unwrap();
        for (p, c) in tm.predict_params(&x, &[0, 1, 2], 0.0).unwrap().iter().zip(&cond) {
            assert!(p.probs().unwrap().iter().zip(c).all(|(a, b)| (a - b).abs() < 1e-15));
        }

        let head = TreatmentModel::head_for(2).unwrap();
        let net = Network::new(LearnerKind::S, BaseKind::Lstm, head, 0, dims(), 4, Stream::new(6)).unwrap();
        let tm = TreatmentModel { net, marginal: vec![0.4, 0.6] };
        let p = tm.predict_params(&seq_inputs(), &[0, 1], 1.0).unwrap();
        assert!((p[0].bernoulli_p().unwrap() - 0.6).abs() < 1e-15);
    }
}
