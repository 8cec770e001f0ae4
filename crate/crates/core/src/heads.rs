//! Distribution heads: exact log-probabilities and samplers for Bernoulli,
//! categorical, Gaussian and mixed (atoms plus sigmoidal flow) outcomes.
//!
//! Every head has two routes to the log-likelihood: scalar evaluation on
//! [`DistParams`] and a batched graph route used for training. Tests hold the
//! two in agreement.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{lse, sigmoid, softplus, Axis, Graph, ShapeError, Tensor, Var};
use crate::nn::{Linear, NnError, ParamStore};
use crate::rng::Stream;

/// Atom membership tolerance on the original outcome scale.
pub const ATOM_TOL: f64 = 1e-9;
/// Flow inversion tolerance on `|F(y') - u|`.
pub const FLOW_TOL: f64 = 1e-8;
pub const FLOW_MAX_ITER: usize = 200;
pub const DEFAULT_FLOW_COMPONENTS: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("invalid head spec: {0}")]
    Spec(String),
    #[error("class index {index} out of range for {classes} classes")]
    Index { index: f64, classes: usize },
    #[error("outcome {0} outside head support")]
    Support(f64),
    #[error("flow inversion did not converge for u = {u} (residual {residual})")]
    NonConvergence { u: f64, residual: f64 },
    #[error("raw parameter vector has length {got}, expected {expected}")]
    RawLen { got: usize, expected: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    Bernoulli,
    Categorical { classes: usize },
    Gaussian,
    MixedFlow { atoms: Vec<f64>, components: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Standardization of the continuous part (Gaussian and flow heads).
    pub y_mean: f64,
    pub y_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistParams {
    Bernoulli {
        logit: f64,
    },
    Categorical {
        logits: Vec<f64>,
    },
    /// Mean and log-variance on the standardized scale.
    Gaussian {
        mean: f64,
        log_var: f64,
    },
    /// `mix_logits` has one entry per atom followed by the continuous slot.
    MixedFlow {
        mix_logits: Vec<f64>,
        w_logits: Vec<f64>,
        a_raw: Vec<f64>,
        b: Vec<f64>,
    },
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = lse(logits);
    logits.iter().map(|&l| (l - z).exp()).collect()
}

/// Index of the first slot whose cumulative mass exceeds `u`.
fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Uniform draw on the open interval (0, 1).
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.gen::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl DistParams {
    pub fn bernoulli_p(&self) -> Option<f64> {
        match self {
            Self::Bernoulli { logit } => Some(sigmoid(*logit)),
            _ => None,
        }
    }

    /// Class probabilities (categorical) or slot probabilities (mixed).
    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            Self::Categorical { logits } => Some(softmax(logits)),
            Self::MixedFlow { mix_logits, .. } => Some(softmax(mix_logits)),
            Self::Bernoulli { logit } => {
                let p = sigmoid(*logit);
                Some(vec![1.0 - p, p])
            }
            Self::Gaussian { .. } => None,
        }
    }

    pub fn variance(&self) -> Option<f64> {
        match self {
            Self::Gaussian { log_var, .. } => Some(log_var.exp()),
            _ => None,
        }
    }

    /// Flow weights `w` (on the simplex) and slopes `a = softplus(a_raw)`.
    pub fn flow_components(&self) -> Option<(Vec<f64>, Vec<f64>, &[f64])> {
        match self {
            Self::MixedFlow { w_logits, a_raw, b, .. } => Some((softmax(w_logits), a_raw.iter().map(|&a| softplus(a)).collect(), b)),
            _ => None,
        }
    }

    /// Flow CDF `F(y') = Σ w σ(a y' + b)`.
    pub fn flow_cdf(&self, y: f64) -> Option<f64> {
        let (w, a, b) = self.flow_components()?;
        Some(w.iter().zip(&a).zip(b).map(|((w, a), b)| w * sigmoid(a * y + b)).sum())
    }

    /// `log f(y')` for the flow density.
    pub fn flow_log_density(&self, y: f64) -> Option<f64> {
        let Self::MixedFlow { w_logits, a_raw, b, .. } = self else { return None };
        let lw = lse(w_logits);
        let terms: Vec<f64> = (0..w_logits.len())
            .map(|m| {
                let a = softplus(a_raw[m]);
                let z = a * y + b[m];
                w_logits[m] - lw + a.ln() - softplus(z) - softplus(-z)
            })
            .collect();
        Some(lse(&terms))
    }

    /// Solves `F(y') = u` by bisection after doubling the bracket.
    pub fn flow_inverse(&self, u: f64) -> Result<f64, HeadError> {
        let f = |y: f64| self.flow_cdf(y).expect("flow params");
        let (mut lo, mut hi) = (-10.0f64, 10.0f64);
        let mut grow = 0;
        while f(lo) > u && grow < 64 {
            lo *= 2.0;
            grow += 1;
        }
        while f(hi) < u && grow < 128 {
            hi *= 2.0;
            grow += 1;
        }
        let mut best = (f64::INFINITY, 0.0);
        for _ in 0..FLOW_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            let r = (fm - u).abs();
            if r < best.0 {
                best = (r, mid);
            }
            if r <= FLOW_TOL * 1e-2 || mid <= lo || mid >= hi {
                break;
            }
            if fm < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if best.0 <= FLOW_TOL {
            Ok(best.1)
        } else {
            Err(HeadError::NonConvergence { u, residual: best.0 })
        }
    }
}

impl HeadSpec {
    pub fn new(kind: HeadKind) -> Result<Self, HeadError> {
        let spec = Self { kind, y_mean: 0.0, y_std: 1.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_standardization(mut self, mean: f64, std: f64) -> Result<Self, HeadError> {
        self.y_mean = mean;
        self.y_std = std;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.y_std > 0.0 && self.y_std.is_finite() && self.y_mean.is_finite()) {
            return Err(HeadError::Spec(format!("bad standardization ({}, {})", self.y_mean, self.y_std)));
        }
        match &self.kind {
            HeadKind::Categorical { classes } if *classes < 2 => {
                Err(HeadError::Spec(format!("categorical head needs at least 2 classes, got {classes}")))
            }
            HeadKind::MixedFlow { atoms, components } => {
                if *components == 0 {
                    return Err(HeadError::Spec("flow needs at least one component".into()));
                }
                if atoms.iter().any(|a| !a.is_finite()) || atoms.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(HeadError::Spec(format!("atoms must be finite and strictly increasing: {atoms:?}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Width of the raw parameter vector produced by the projection.
    pub fn n_raw(&self) -> usize {
        match &self.kind {
            HeadKind::Bernoulli => 1,
            HeadKind::Categorical { classes } => *classes,
            HeadKind::Gaussian => 2,
            HeadKind::MixedFlow { atoms, components } => atoms.len() + 1 + 3 * components,
        }
    }

    /// Affine projection from features to raw parameters. Flow offsets start
    /// spread over `[-3, 3]` so components begin at distinct locations.
    pub fn init_projection(&self, store: &mut ParamStore, name: &str, in_dim: usize, seed: Stream) -> Result<Linear, HeadError> {
        let lin = Linear::init(store, name, in_dim, self.n_raw(), seed)?;
        if let HeadKind::MixedFlow { atoms, components } = &self.kind {
            let m = *components;
            let off = atoms.len() + 1 + 2 * m;
            let bias = store.tensors[lin.bias].data_mut();
            for k in 0..m {
                bias[off + k] = if m == 1 { 0.0 } else { -3.0 + 6.0 * k as f64 / (m - 1) as f64 };
            }
        }
        Ok(lin)
    }

    pub fn params_from_raw(&self, raw: &[f64]) -> Result<DistParams, HeadError> {
        if raw.len() != self.n_raw() {
            return Err(HeadError::RawLen { got: raw.len(), expected: self.n_raw() });
        }
        Ok(match &self.kind {
            HeadKind::Bernoulli => DistParams::Bernoulli { logit: raw[0] },
            HeadKind::Categorical { .. } => DistParams::Categorical { logits: raw.to_vec() },
            HeadKind::Gaussian => DistParams::Gaussian { mean: raw[0], log_var: raw[1] },
            HeadKind::MixedFlow { atoms, components } => {
                let (s, m) = (atoms.len() + 1, *components);
                DistParams::MixedFlow {
                    mix_logits: raw[..s].to_vec(),
                    w_logits: raw[s..s + m].to_vec(),
                    a_raw: raw[s + m..s + 2 * m].to_vec(),
                    b: raw[s + 2 * m..s + 3 * m].to_vec(),
                }
            }
        })
    }

    /// One [`DistParams`] per row of a raw-parameter batch.
    pub fn project(&self, raw: &Tensor) -> Result<Vec<DistParams>, HeadError> {
        (0..raw.rows()).map(|r| self.params_from_raw(raw.row_slice(r))).collect()
    }

    pub fn atom_index(&self, y: f64) -> Option<usize> {
        match &self.kind {
            HeadKind::MixedFlow { atoms, .. } => atoms.iter().position(|a| (y - a).abs() <= ATOM_TOL),
            _ => None,
        }
    }

    fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    fn class_index(&self, y: f64, classes: usize) -> Result<usize, HeadError> {
        if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
            Ok(y as usize)
        } else {
            Err(HeadError::Index { index: y, classes })
        }
    }

    fn check_params(&self, p: &DistParams) -> Result<(), HeadError> {
        let ok = match (&self.kind, p) {
            (HeadKind::Bernoulli, DistParams::Bernoulli { .. }) | (HeadKind::Gaussian, DistParams::Gaussian { .. }) => true,
            (HeadKind::Categorical { classes }, DistParams::Categorical { logits }) => logits.len() == *classes,
            (HeadKind::MixedFlow { atoms, components }, DistParams::MixedFlow { mix_logits, w_logits, a_raw, b }) => {
                mix_logits.len() == atoms.len() + 1 && [w_logits.len(), a_raw.len(), b.len()].iter().all(|&l| l == *components)
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(HeadError::Spec(format!("parameters do not match head {:?}", self.kind)))
        }
    }

    /// Exact log mass or density of `y` on the original scale.
    pub fn log_prob(&self, p: &DistParams, y: f64) -> Result<f64, HeadError> {
        self.check_params(p)?;
        match (&self.kind, p) {
            (HeadKind::Bernoulli, DistParams::Bernoulli { logit }) => match self.class_index(y, 2)? {
                1 => Ok(-softplus(-logit)),
                _ => Ok(-softplus(*logit)),
            },
            (HeadKind::Categorical { classes }, DistParams::Categorical { logits }) => {
                let k = self.class_index(y, *classes)?;
                Ok(logits[k] - lse(logits))
            }
            (HeadKind::Gaussian, DistParams::Gaussian { mean, log_var }) => {
                let z = self.standardize(y) - mean;
                Ok(-0.5 * (LN_2PI + log_var + z * z * (-log_var).exp()) - self.y_std.ln())
            }
            (HeadKind::MixedFlow { atoms, .. }, DistParams::MixedFlow { mix_logits, .. }) => {
                let log_norm = lse(mix_logits);
                if let Some(i) = self.atom_index(y) {
                    return Ok(mix_logits[i] - log_norm);
                }
                if !y.is_finite() {
                    return Err(HeadError::Support(y));
                }
                let log_cont = mix_logits[atoms.len()] - log_norm;
                Ok(log_cont + p.flow_log_density(self.standardize(y)).expect("flow") - self.y_std.ln())
            }
            _ => unreachable!("checked above"),
        }
    }

    /// Draws one outcome; consumes a fixed pattern of draws from `rng`.
    /// Quantile function of the mixed law: atoms sit inside the continuous
    /// CDF at their positions, so one uniform determines the draw.
    pub fn mixed_quantile(&self, p: &DistParams, u: f64) -> Result<f64, HeadError> {
        self.check_params(p)?;
        let (HeadKind::MixedFlow { atoms, .. }, DistParams::MixedFlow { mix_logits, .. }) = (&self.kind, p) else {
            return Err(HeadError::Spec("quantile needs a mixed head".into()));
        };
        let probs = softmax(mix_logits);
        let wc = probs[atoms.len()];
        let cont = |v: f64| -> Result<f64, HeadError> {
            let v = (v / wc).clamp(f64::EPSILON, 1.0 - f64::EPSILON);
            Ok(self.y_mean + self.y_std * p.flow_inverse(v)?)
        };
        let mut below = 0.0;
        for (k, &atom) in atoms.iter().enumerate() {
            let z = (atom - self.y_mean) / self.y_std;
            let start = below + wc * p.flow_cdf(z).expect("flow params");
            if u < start {
                return cont(u - below);
            }
            if u < start + probs[k] {
                return Ok(atom);
            }
            below += probs[k];
        }
        cont(u - below)
    }

    pub fn sample<R: Rng + ?Sized>(&self, p: &DistParams, rng: &mut R) -> Result<f64, HeadError> {
        self.check_params(p)?;
        match (&self.kind, p) {
            (HeadKind::Bernoulli, DistParams::Bernoulli { logit }) => {
                let u = rng.gen::<f64>();
                Ok(if u < sigmoid(*logit) { 1.0 } else { 0.0 })
            }
            (HeadKind::Categorical { .. }, DistParams::Categorical { logits }) => {
                Ok(inverse_cdf(&softmax(logits), rng.gen::<f64>()) as f64)
            }
            (HeadKind::Gaussian, DistParams::Gaussian { mean, log_var }) => {
                let (u1, u2) = (open_unit(rng), rng.gen::<f64>());
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
                Ok(self.y_mean + self.y_std * (mean + (0.5 * log_var).exp() * z))
            }
            (HeadKind::MixedFlow { .. }, DistParams::MixedFlow { .. }) => self.mixed_quantile(p, open_unit(rng)),
            _ => unreachable!("checked above"),
        }
    }

    /// Expected outcome on the original scale. The flow mean is exact: each
    /// component is a logistic with location `-b/a`.
    pub fn mean(&self, p: &DistParams) -> Result<f64, HeadError> {
        self.check_params(p)?;
        Ok(match (&self.kind, p) {
            (HeadKind::Bernoulli, DistParams::Bernoulli { logit }) => sigmoid(*logit),
            (HeadKind::Categorical { .. }, DistParams::Categorical { logits }) => {
                softmax(logits).iter().enumerate().map(|(k, q)| k as f64 * q).sum()
            }
            (HeadKind::Gaussian, DistParams::Gaussian { mean, .. }) => self.y_mean + self.y_std * mean,
            (HeadKind::MixedFlow { atoms, .. }, DistParams::MixedFlow { mix_logits, .. }) => {
                let pi = softmax(mix_logits);
                let (w, a, b) = p.flow_components().expect("flow");
                let loc: f64 = (0..w.len()).map(|m| -w[m] * b[m] / a[m]).sum();
                let atom_part: f64 = atoms.iter().zip(&pi).map(|(x, q)| x * q).sum();
                atom_part + pi[atoms.len()] * (self.y_mean + self.y_std * loc)
            }
            _ => unreachable!("checked above"),
        })
    }

    /// Sum over rows of `log p(y_i)` for a `batch x n_raw` raw-parameter node.
    pub fn log_prob_graph(&self, g: &mut Graph, raw: Var, y: &[f64]) -> Result<Var, HeadError> {
        let [rows, cols] = g.shape(raw);
        if cols != self.n_raw() || rows != y.len() {
            return Err(ShapeError::new("head log_prob", [rows, cols], [y.len(), self.n_raw()]).into());
        }
        match &self.kind {
            HeadKind::Bernoulli => {
                let yy = y.iter().map(|&v| self.class_index(v, 2).map(|k| k as f64)).collect::<Result<Vec<_>, _>>()?;
                let yv = g.constant(Tensor::column(yy));
                let yz = g.mul(yv, raw)?;
                let sp = g.softplus(raw);
                let ll = g.sub(yz, sp)?;
                Ok(g.sum_all(ll))
            }
            HeadKind::Categorical { classes } => {
                let onehot = self.onehot(y, *classes)?;
                let oh = g.constant(onehot);
                let picked = g.mul(oh, raw)?;
                let picked = g.sum_all(picked);
                let norm = g.log_sum_exp(raw, Axis::Cols);
                let norm = g.sum_all(norm);
                Ok(g.sub(picked, norm)?)
            }
            HeadKind::Gaussian => {
                let mean = g.slice(raw, Axis::Cols, 0, 1)?;
                let lv = g.slice(raw, Axis::Cols, 1, 2)?;
                let yv = g.constant(Tensor::column(y.iter().map(|&v| self.standardize(v)).collect()));
                let d = g.sub(yv, mean)?;
                let d2 = g.square(d);
                let nlv = g.neg(lv);
                let prec = g.exp(nlv);
                let q = g.mul(d2, prec)?;
                let s = g.add(q, lv)?;
                let s = g.sum_all(s);
                let s = g.scale(s, -0.5);
                let c = -(0.5 * LN_2PI + self.y_std.ln()) * rows as f64;
                Ok(g.add_scalar(s, c))
            }
            HeadKind::MixedFlow { atoms, components } => self.mixed_graph(g, raw, y, atoms.len(), *components),
        }
    }

    fn onehot(&self, y: &[f64], classes: usize) -> Result<Tensor, HeadError> {
        let mut t = Tensor::zeros(y.len(), classes);
        for (i, &v) in y.iter().enumerate() {
            let k = self.class_index(v, classes)?;
            t.data_mut()[i * classes + k] = 1.0;
        }
        Ok(t)
    }

    fn mixed_graph(&self, g: &mut Graph, raw: Var, y: &[f64], n_atoms: usize, m: usize) -> Result<Var, HeadError> {
        let s = n_atoms + 1;
        let mix = g.slice(raw, Axis::Cols, 0, s)?;
        let norm = g.log_sum_exp(mix, Axis::Cols);
        let log_pi = g.sub(mix, norm)?;
        let mut atom_rows = Vec::new();
        let mut atom_slot = Vec::new();
        let mut cont_rows = Vec::new();
        let mut cont_y = Vec::new();
        for (i, &v) in y.iter().enumerate() {
            match self.atom_index(v) {
                Some(k) => {
                    atom_rows.push(i);
                    atom_slot.push(k as f64);
                }
                None if v.is_finite() => {
                    cont_rows.push(i);
                    cont_y.push(self.standardize(v));
                }
                None => return Err(HeadError::Support(v)),
            }
        }
        let mut total = g.constant(Tensor::scalar(0.0));
        if !atom_rows.is_empty() {
            let lp = g.gather_rows(log_pi, &atom_rows)?;
            let oh = g.constant(self.onehot(&atom_slot, s)?);
            let picked = g.mul(oh, lp)?;
            let picked = g.sum_all(picked);
            total = g.add(total, picked)?;
        }
        if !cont_rows.is_empty() {
            let r = g.gather_rows(raw, &cont_rows)?;
            let lp = g.gather_rows(log_pi, &cont_rows)?;
            let lp_cont = g.slice(lp, Axis::Cols, n_atoms, s)?;
            let wl = g.slice(r, Axis::Cols, s, s + m)?;
            let wn = g.log_sum_exp(wl, Axis::Cols);
            let log_w = g.sub(wl, wn)?;
            let ar = g.slice(r, Axis::Cols, s + m, s + 2 * m)?;
            let a = g.softplus(ar);
            let log_a = g.log(a);
            let b = g.slice(r, Axis::Cols, s + 2 * m, s + 3 * m)?;
            let yv = g.constant(Tensor::column(cont_y));
            let ay = g.mul(a, yv)?;
            let z = g.add(ay, b)?;
            let sp_pos = g.softplus(z);
            let nz = g.neg(z);
            let sp_neg = g.softplus(nz);
            let t = g.add(log_w, log_a)?;
            let t = g.sub(t, sp_pos)?;
            let t = g.sub(t, sp_neg)?;
            let log_f = g.log_sum_exp(t, Axis::Cols);
            let ll = g.add(lp_cont, log_f)?;
            let ll = g.sum_all(ll);
            let ll = g.add_scalar(ll, -self.y_std.ln() * cont_rows.len() as f64);
            total = g.add(total, ll)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn flow_spec(atoms: Vec<f64>, m: usize) -> HeadSpec {
        HeadSpec::new(HeadKind::MixedFlow { atoms, components: m }).unwrap()
    }

    fn all_heads() -> Vec<HeadSpec> {
        vec![
            HeadSpec::new(HeadKind::Bernoulli).unwrap(),
            HeadSpec::new(HeadKind::Categorical { classes: 3 }).unwrap(),
            HeadSpec::new(HeadKind::Gaussian).unwrap().with_standardization(1.5, 2.0).unwrap(),
            flow_spec(vec![0.0, 2.0], 3).with_standardization(-0.5, 3.0).unwrap(),
        ]
    }

    fn outcomes(spec: &HeadSpec) -> Vec<f64> {
        match spec.kind {
            HeadKind::Bernoulli => vec![1.0, 0.0, 1.0, 1.0],
            HeadKind::Categorical { .. } => vec![2.0, 0.0, 1.0, 2.0],
            HeadKind::Gaussian => vec![0.3, -2.0, 4.0, 1.5],
            HeadKind::MixedFlow { .. } => vec![0.0, 3.7, 2.0, -4.2],
        }
    }

    fn random_raw(spec: &HeadSpec, rows: usize, seed: u64) -> Tensor {
        let mut rng = Stream::new(seed).rng();
        let data = (0..rows * spec.n_raw()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(rows, spec.n_raw(), data).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(HeadSpec::new(HeadKind::Categorical { classes: 1 }).is_err());
        assert!(HeadSpec::new(HeadKind::MixedFlow { atoms: vec![1.0, 0.0], components: 2 }).is_err());
        assert!(HeadSpec::new(HeadKind::MixedFlow { atoms: vec![0.0], components: 0 }).is_err());
        assert!(HeadSpec::new(HeadKind::Gaussian).unwrap().with_standardization(0.0, 0.0).is_err());
        assert_eq!(flow_spec(vec![0.0], 8).n_raw(), 2 + 24);
    }

    #[test]
    fn zero_raw_params() {
        let p = HeadSpec::new(HeadKind::Bernoulli).unwrap().params_from_raw(&[0.0]).unwrap();
        assert_eq!(p.bernoulli_p(), Some(0.5));
        let p = HeadSpec::new(HeadKind::Categorical { classes: 3 }).unwrap().params_from_raw(&[0.0; 3]).unwrap();
        assert!(p.probs().unwrap().iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        let p = HeadSpec::new(HeadKind::Gaussian).unwrap().params_from_raw(&[0.0; 2]).unwrap();
        assert_eq!(p.variance(), Some(1.0));
        assert!(HeadSpec::new(HeadKind::Gaussian).unwrap().params_from_raw(&[0.0]).is_err());
    }

    #[test]
    fn log_prob_reference_values() {
        let h = HeadSpec::new(HeadKind::Bernoulli).unwrap();
        let lp = h.log_prob(&DistParams::Bernoulli { logit: 0.0 }, 1.0).unwrap();
        assert!((lp + std::f64::consts::LN_2).abs() < 1e-12);
        assert!(h.log_prob(&DistParams::Bernoulli { logit: 0.0 }, 2.0).is_err());

        let h = HeadSpec::new(HeadKind::Gaussian).unwrap();
        let lp = h.log_prob(&DistParams::Gaussian { mean: 0.0, log_var: 0.0 }, 0.0).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);

        let h = HeadSpec::new(HeadKind::Categorical { classes: 3 }).unwrap();
        let p = DistParams::Categorical { logits: vec![0.0; 3] };
        assert!(matches!(h.log_prob(&p, 3.0), Err(HeadError::Index { .. })));

        let h = flow_spec(vec![0.0], 1);
        let p = DistParams::MixedFlow { mix_logits: vec![0.0, f64::NEG_INFINITY], w_logits: vec![0.0], a_raw: vec![0.0], b: vec![0.0] };
        assert_eq!(h.log_prob(&p, 0.0).unwrap(), 0.0);
        assert_eq!(h.log_prob(&p, 1e-10).unwrap(), 0.0);

        // a = softplus(a_raw) = 1 needs a_raw = ln(e - 1)
        let one = (std::f64::consts::E - 1.0).ln();
        let p = DistParams::MixedFlow { mix_logits: vec![f64::NEG_INFINITY, 0.0], w_logits: vec![0.0], a_raw: vec![one], b: vec![0.0] };
        assert!((p.flow_log_density(0.0).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        assert!((h.log_prob(&p, 0.5).unwrap() - p.flow_log_density(0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sampling_reference_values() {
        let h = HeadSpec::new(HeadKind::Bernoulli).unwrap();
        let mut rng = Stream::new(1).rng();
        assert!((0..100).all(|_| h.sample(&DistParams::Bernoulli { logit: f64::INFINITY }, &mut rng).unwrap() == 1.0));

        let one = (std::f64::consts::E - 1.0).ln();
        let p = DistParams::MixedFlow { mix_logits: vec![f64::NEG_INFINITY, 0.0], w_logits: vec![0.0], a_raw: vec![one], b: vec![0.0] };
        assert!(p.flow_inverse(0.5).unwrap().abs() < 1e-8);

        let h = HeadSpec::new(HeadKind::Gaussian).unwrap();
        let p = DistParams::Gaussian { mean: 2.0, log_var: 0.0 };
        let mut rng = Stream::new(2024).rng();
        let n = 100_000;
        let mean = (0..n).map(|_| h.sample(&p, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn mixed_quantile_inverts_the_mixed_cdf() {
        let h = flow_spec(vec![0.0, 2.0], 3).with_standardization(-0.5, 3.0).unwrap();
        for seed in 0..10 {
            let p = h.params_from_raw(random_raw(&h, 1, seed).data()).unwrap();
            let pi = p.probs().unwrap();
            let cdf = |y: f64| {
                let atoms: f64 = [0.0, 2.0].iter().zip(&pi).filter(|(a, _)| **a <= y).map(|(_, w)| w).sum();
                atoms + pi[2] * p.flow_cdf((y + 0.5) / 3.0).unwrap()
            };
            let mut prev = f64::NEG_INFINITY;
            for k in 1..1000 {
                let u = k as f64 / 1000.0;
                let y = h.mixed_quantile(&p, u).unwrap();
                assert!(y >= prev);
                prev = y;
                match [0.0, 2.0].iter().position(|&a| a == y) {
                    Some(j) => assert!(cdf(y) - pi[j] <= u + 1e-9 && u <= cdf(y) + 1e-9),
                    None => assert!((cdf(y) - u).abs() < 1e-7, "{u} {}", cdf(y)),
                }
            }
            let mut rng = Stream::new(seed).rng();
            let n = 20_000;
            let draws: Vec<f64> = (0..n).map(|_| h.sample(&p, &mut rng).unwrap()).collect();
            for (j, a) in [0.0, 2.0].iter().enumerate() {
                let f = draws.iter().filter(|&&d| d == *a).count() as f64 / n as f64;
                assert!((f - pi[j]).abs() < 0.015, "{f} vs {}", pi[j]);
            }
        }
        assert!(HeadSpec::new(HeadKind::Gaussian).unwrap().mixed_quantile(&DistParams::Gaussian { mean: 0.0, log_var: 0.0 }, 0.5).is_err());
    }

    #[test]
    fn sampling_is_pure_in_the_stream() {
        for h in all_heads() {
            let raw = random_raw(&h, 1, 3);
            let p = h.params_from_raw(raw.data()).unwrap();
            let draw = || {
                let mut rng = Stream::new(9).rng();
                (0..20).map(|_| h.sample(&p, &mut rng).unwrap()).collect::<Vec<_>>()
            };
            assert_eq!(draw(), draw());
        }
    }

    #[test]
    fn flow_mean_matches_quadrature() {
        let h = flow_spec(vec![0.0], 4).with_standardization(1.0, 2.0).unwrap();
        let raw = random_raw(&h, 1, 11);
        let p = h.params_from_raw(raw.data()).unwrap();
        let pi = p.probs().unwrap();
        let (lo, hi, n) = (-60.0, 60.0, 200_000);
        let dx = (hi - lo) / n as f64;
        let e: f64 = (0..n)
            .map(|i| {
                let y = lo + (i as f64 + 0.5) * dx;
                y * p.flow_log_density(y).unwrap().exp() * dx
            })
            .sum();
        let expect = pi[1] * (1.0 + 2.0 * e);
        assert!((h.mean(&p).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn graph_route_matches_scalar_route() {
        for h in all_heads() {
            for seed in 0..5 {
                let y = outcomes(&h);
                let raw = random_raw(&h, y.len(), seed);
                let scalar: f64 = h.project(&raw).unwrap().iter().zip(&y).map(|(p, &v)| h.log_prob(p, v).unwrap()).sum();
                let mut g = Graph::new();
                let r = g.constant(raw);
                let out = h.log_prob_graph(&mut g, r, &y).unwrap();
                let graph = g.value(out).item().unwrap();
                assert!((scalar - graph).abs() < 1e-10 * (1.0 + scalar.abs()), "{:?}: {scalar} vs {graph}", h.kind);
            }
        }
    }

    #[test]
    fn head_log_probs_pass_grad_check() {
        for h in all_heads() {
            for seed in 0..5 {
                let y = outcomes(&h);
                let raw = random_raw(&h, y.len(), 100 + seed);
                let err = grad_check::<HeadError, _>(|g, p| h.log_prob_graph(g, p[0], &y), &[raw], 1e-6).unwrap();
                assert!(err < 1e-4, "{:?}: {err}", h.kind);
            }
        }
    }

    #[test]
    fn projection_init_spreads_offsets() {
        let h = flow_spec(vec![0.0], 4);
        let mut s = ParamStore::new();
        let lin = h.init_projection(&mut s, "head", 3, Stream::new(0)).unwrap();
        assert_eq!(&s.tensors[lin.bias].data()[2 + 8..], &[-3.0, -1.0, 1.0, 3.0]);
        assert!(s.tensors[lin.bias].data()[..10].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn flow_is_a_valid_distribution(seed in 0u64..10_000) {
            let h = flow_spec(vec![0.0], 8);
            let raw = random_raw(&h, 1, seed);
            let p = h.params_from_raw(raw.data()).unwrap();
            let n = 6000;
            let dx = 60.0 / n as f64;
            let integral: f64 = (0..n).map(|i| p.flow_log_density(-30.0 + (i as f64 + 0.5) * dx).unwrap().exp() * dx).sum();
            prop_assert!((integral - 1.0).abs() <= 0.01);
            let grid: Vec<f64> = (0..1000).map(|i| p.flow_cdf(-30.0 + 60.0 * i as f64 / 999.0).unwrap()).collect();
            prop_assert!(grid.windows(2).all(|w| w[1] > w[0] || (w[0] > 1.0 - 1e-15)));
            let mut rng = Stream::new(seed).with("u").rng();
            for _ in 0..10 {
                let u = open_unit(&mut rng);
                let y = p.flow_inverse(u).unwrap();
                prop_assert!((p.flow_cdf(y).unwrap() - u).abs() <= FLOW_TOL);
            }
        }
    }
}
