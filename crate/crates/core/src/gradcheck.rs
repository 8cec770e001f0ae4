//! Finite-difference verification of every differentiable building block:
//! tape primitives, both base models and the four head log-likelihoods.

use rand::Rng;
use serde::Serialize;

use crate::diffcore::{grad_check, Axis, Graph, ShapeError, Tensor, Var};
use crate::encode::SequenceTensor;
use crate::heads::{HeadError, HeadKind, HeadSpec};
use crate::nn::{Lstm, Mlp, NnError, ParamStore, SeqBatch};
use crate::rng::Stream;

pub const EPSILON: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub type LossFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, ShapeError>>;

pub fn random_tensor(rows: usize, cols: usize, stream: Stream) -> Tensor {
    let mut rng = stream.rng();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("shape")
}

/// Reduces `y` to a scalar through fixed random weights so every entry of
/// its gradient differs.
fn weigh(g: &mut Graph, y: Var) -> Result<Var, ShapeError> {
    let [r, c] = g.shape(y);
    let w = g.constant(random_tensor(r, c, Stream::new(99).with("weights")));
    let m = g.mul(y, w)?;
    Ok(g.sum_all(m))
}

/// One scalar loss per primitive over parameters `a: 2x3`, `b: 3x2`.
pub fn primitive_losses() -> Vec<(&'static str, LossFn)> {
    vec![
        (
            "matmul",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.matmul(p[0], p[1])?;
                weigh(g, y)
            }),
        ),
        (
            "add_broadcast",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let b = g.slice(p[0], Axis::Rows, 1, 2)?;
                let y = g.add(p[0], b)?;
                weigh(g, y)
            }),
        ),
        (
            "mul",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.mul(p[0], p[0])?;
                weigh(g, y)
            }),
        ),
        (
            "sub_col",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let c = g.slice(p[0], Axis::Cols, 0, 1)?;
                let y = g.sub(p[0], c)?;
                weigh(g, y)
            }),
        ),
        (
            "sigmoid",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.sigmoid(p[0]);
                weigh(g, y)
            }),
        ),
        (
            "tanh",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.tanh(p[0]);
                weigh(g, y)
            }),
        ),
        (
            "exp",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.exp(p[0]);
                weigh(g, y)
            }),
        ),
        (
            "log",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let s = g.square(p[0]);
                let s = g.add_scalar(s, 0.5);
                let y = g.log(s);
                weigh(g, y)
            }),
        ),
        (
            "softplus",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.softplus(p[0]);
                weigh(g, y)
            }),
        ),
        (
            "abs",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let s = g.add_scalar(p[0], 2.0);
                let y = g.abs(s);
                weigh(g, y)
            }),
        ),
        (
            "negate",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.neg(p[0]);
                weigh(g, y)
            }),
        ),
        (
            "concat_cols",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let t = g.slice(p[1], Axis::Rows, 0, 2)?;
                let y = g.concat(&[p[0], t], Axis::Cols)?;
                weigh(g, y)
            }),
        ),
        (
            "concat_rows",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.concat(&[p[0], p[0]], Axis::Rows)?;
                weigh(g, y)
            }),
        ),
        (
            "slice",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.slice(p[0], Axis::Cols, 1, 3)?;
                weigh(g, y)
            }),
        ),
        (
            "sum_axis",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.sum(p[0], Axis::Rows);
                let z = g.sum(p[0], Axis::Cols);
                let a = weigh(g, y)?;
                let b = weigh(g, z)?;
                g.add(a, b)
            }),
        ),
        (
            "mean_axis",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.mean(p[0], Axis::Rows);
                let z = g.mean(p[0], Axis::Cols);
                let m = g.mean_all(p[0]);
                let a = weigh(g, y)?;
                let b = weigh(g, z)?;
                let s = g.add(a, b)?;
                g.add(s, m)
            }),
        ),
        (
            "log_sum_exp",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.log_sum_exp(p[0], Axis::Cols);
                let z = g.log_sum_exp(p[0], Axis::Rows);
                let a = weigh(g, y)?;
                let b = weigh(g, z)?;
                g.add(a, b)
            }),
        ),
        (
            "gather_rows",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.gather_rows(p[0], &[1, 0, 1])?;
                weigh(g, y)
            }),
        ),
        (
            "square_scale",
            Box::new(|g: &mut Graph, p: &[Var]| {
                let y = g.square(p[0]);
                let y = g.scale(y, -0.7);
                weigh(g, y)
            }),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub target: String,
    pub seed: u64,
    pub rel_err: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

fn random_seq(len: usize, step: usize, case: usize, stream: Stream) -> SequenceTensor {
    let mut rng = stream.rng();
    SequenceTensor {
        steps: (0..len).map(|_| (0..step).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect(),
        case_features: (0..case).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    }
}

pub fn check_primitives(seed: u64) -> Result<Vec<CheckRow>, CheckError> {
    let s = Stream::new(seed).with("primitives");
    let params = [random_tensor(2, 3, s.index(0)), random_tensor(3, 2, s.index(1))];
    primitive_losses()
        .into_iter()
        .map(|(name, f)| Ok(CheckRow { target: name.into(), seed, rel_err: grad_check(|g, p| f(g, p), &params, EPSILON)? }))
        .collect()
}

pub fn check_bases(seed: u64) -> Result<Vec<CheckRow>, CheckError> {
    let s = Stream::new(seed).with("bases");
    let mut store = ParamStore::new();
    let mlp = Mlp::init(&mut store, "mlp", &[3, 4, 2], s.with("init"))?;
    let x = random_tensor(3, 3, s.with("x"));
    let mlp_err = grad_check::<NnError, _>(
        |g, p| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, p, xv)?;
            Ok(weigh(g, y)?)
        },
        &store.tensors,
        EPSILON,
    )?;

    let mut store = ParamStore::new();
    let lstm = Lstm::init(&mut store, "lstm", 2, 3, 1, 2, s.with("init"))?;
    let seqs: Vec<SequenceTensor> =
        [1usize, 3, 2].iter().enumerate().map(|(i, &n)| random_seq(n, 2, 1, s.with("seq").index(i as u64))).collect();
    let refs: Vec<&SequenceTensor> = seqs.iter().collect();
    let batch = SeqBatch::new(&refs, None)?;
    let lstm_err = grad_check::<NnError, _>(
        |g, p| {
            let y = lstm.forward(g, p, &batch)?;
            Ok(weigh(g, y)?)
        },
        &store.tensors,
        EPSILON,
    )?;
    Ok(vec![CheckRow { target: "mlp".into(), seed, rel_err: mlp_err }, CheckRow { target: "lstm".into(), seed, rel_err: lstm_err }])
}

pub fn check_heads(seed: u64) -> Result<Vec<CheckRow>, CheckError> {
    let heads: Vec<(&str, HeadSpec, Vec<f64>)> = vec![
        ("bernoulli", HeadSpec::new(HeadKind::Bernoulli)?, vec![1.0, 0.0, 1.0, 1.0]),
        ("categorical", HeadSpec::new(HeadKind::Categorical { classes: 3 })?, vec![2.0, 0.0, 1.0, 2.0]),
        ("gaussian", HeadSpec::new(HeadKind::Gaussian)?.with_standardization(1.5, 2.0)?, vec![0.3, -2.0, 4.0, 1.5]),
        (
            "mixed_flow",
            HeadSpec::new(HeadKind::MixedFlow { atoms: vec![0.0, 2.0], components: 3 })?.with_standardization(-0.5, 3.0)?,
            vec![0.0, 3.7, 2.0, -4.2],
        ),
    ];
    heads
        .into_iter()
        .map(|(name, h, y)| {
            let raw = random_tensor(y.len(), h.n_raw(), Stream::new(seed).with("heads").with(name));
            let err = grad_check::<HeadError, _>(|g, p| h.log_prob_graph(g, p[0], &y), &[raw], EPSILON)?;
            Ok(CheckRow { target: format!("head_{name}"), seed, rel_err: err })
        })
        .collect()
}

/// Every check at seeds `0..n_seeds`.
pub fn run_all(n_seeds: u64) -> Result<Vec<CheckRow>, CheckError> {
    let mut rows = Vec::new();
    for seed in 0..n_seeds {
        rows.extend(check_primitives(seed)?);
        rows.extend(check_bases(seed)?);
        rows.extend(check_heads(seed)?);
    }
    Ok(rows)
}
