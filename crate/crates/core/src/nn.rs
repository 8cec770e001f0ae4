//! MLP and LSTM base models over the [`diffcore`](crate::diffcore) tape.
//!
//! Parameters live in a flat [`ParamStore`]; layers hold indices into it, so a
//! whole model binds to a graph with one call and Adam walks one list.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Axis, Graph, ShapeError, Tensor, Var};
use crate::encode::SequenceTensor;
use crate::rng::Stream;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("invalid dimension: {0}")]
    Dim(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, t: Tensor) -> Result<usize, NnError> {
        if self.names.contains(&name) {
            return Err(NnError::DuplicateName(name));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_const(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, stream: Stream) -> Tensor {
    let mut rng = stream.rng();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Affine map `x · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: Stream) -> Result<Self, NnError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(NnError::Dim(format!("{name}: {in_dim} -> {out_dim}")));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(in_dim, out_dim, bound, seed.with(name).with("weight")))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, NnError> {
        let h = g.matmul(x, p[self.weight])?;
        Ok(g.add(h, p[self.bias])?)
    }
}

/// Multi-layer perceptron: `tanh` between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`, at least one layer.
    pub fn init(store: &mut ParamStore, name: &str, dims: &[usize], seed: Stream) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::Dim(format!("{name}: need at least input and output dims, got {dims:?}")));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0) {
            return Err(NnError::Dim(format!("{name}: zero-sized layer in {dims:?} ({d})")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{name}.l{i}"), w[0], w[1], seed))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var, NnError> {
        let [_, d] = g.shape(x);
        if d != self.in_dim() {
            return Err(ShapeError::new("mlp input", [0, d], [0, self.in_dim()]).into());
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Padded batch of sequences with per-row true lengths.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    /// One `batch x step_dim` tensor per time step; rows past their length are zero.
    pub steps: Vec<Tensor>,
    pub lengths: Vec<usize>,
    pub case: Tensor,
}

impl SeqBatch {
    /// Pads to `pad_to` steps (at least the longest sequence).
    pub fn new(seqs: &[&SequenceTensor], pad_to: Option<usize>) -> Result<Self, NnError> {
        let first = seqs.first().ok_or_else(|| NnError::Dim("empty sequence batch".into()))?;
        if seqs.iter().any(|s| s.steps.is_empty()) {
            return Err(NnError::Dim("zero-length sequence".into()));
        }
        let d = first.steps[0].len();
        let dc = first.case_features.len();
        let longest = seqs.iter().map(|s| s.steps.len()).max().unwrap_or(0);
        let len = pad_to.unwrap_or(longest).max(longest);
        let b = seqs.len();
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let mut data = vec![0.0; b * d];
            for (i, s) in seqs.iter().enumerate() {
                if let Some(v) = s.steps.get(t) {
                    if v.len() != d {
                        return Err(ShapeError::new("sequence step", [1, d], [1, v.len()]).into());
                    }
                    data[i * d..(i + 1) * d].copy_from_slice(v);
                }
            }
            steps.push(Tensor::new(b, d, data)?);
        }
        let case_rows: Vec<Vec<f64>> = seqs.iter().map(|s| s.case_features.clone()).collect();
        let case = if dc == 0 { Tensor::zeros(b, 0) } else { Tensor::from_rows(&case_rows)? };
        Ok(Self { steps, lengths: seqs.iter().map(|s| s.steps.len()).collect(), case })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Single-layer LSTM whose last valid hidden state is joined with case
/// features and mapped through one affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    /// `input x 4H`, gate order input, forget, cell, output.
    pub w_input: usize,
    /// `H x 4H`.
    pub w_hidden: usize,
    /// `1 x 4H`.
    pub bias: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub case_dim: usize,
    pub proj: Linear,
}

impl Lstm {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        case_dim: usize,
        out_dim: usize,
        seed: Stream,
    ) -> Result<Self, NnError> {
        if input_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(NnError::Dim(format!("{name}: input {input_dim}, hidden {hidden}, out {out_dim}")));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let s = seed.with(name);
        let w_input = store.add(format!("{name}.w_input"), uniform(input_dim, 4 * hidden, bound, s.with("w_input")))?;
        let w_hidden = store.add(format!("{name}.w_hidden"), uniform(hidden, 4 * hidden, bound, s.with("w_hidden")))?;
        let mut b = Tensor::zeros(1, 4 * hidden);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        let proj = Linear::init(store, &format!("{name}.proj"), hidden + case_dim, out_dim, seed)?;
        Ok(Self { w_input, w_hidden, bias, input_dim, hidden, case_dim, proj })
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// Hidden state at each row's last valid step.
    pub fn final_hidden(&self, g: &mut Graph, p: &[Var], batch: &SeqBatch) -> Result<Var, NnError> {
        let b = batch.batch_size();
        let h_dim = self.hidden;
        let mut h = g.constant(Tensor::zeros(b, h_dim));
        let mut c = g.constant(Tensor::zeros(b, h_dim));
        let longest = batch.lengths.iter().copied().max().unwrap_or(0);
        for (t, x_t) in batch.steps.iter().enumerate().take(longest) {
            if x_t.cols() != self.input_dim {
                return Err(ShapeError::new("lstm input", x_t.shape(), [b, self.input_dim]).into());
            }
            let x = g.constant(x_t.clone());
            let zx = g.matmul(x, p[self.w_input])?;
            let zh = g.matmul(h, p[self.w_hidden])?;
            let z = g.add(zx, zh)?;
            let z = g.add(z, p[self.bias])?;
            let gi = g.slice(z, Axis::Cols, 0, h_dim)?;
            let gf = g.slice(z, Axis::Cols, h_dim, 2 * h_dim)?;
            let gc = g.slice(z, Axis::Cols, 2 * h_dim, 3 * h_dim)?;
            let go = g.slice(z, Axis::Cols, 3 * h_dim, 4 * h_dim)?;
            let (i, f, o) = (g.sigmoid(gi), g.sigmoid(gf), g.sigmoid(go));
            let cand = g.tanh(gc);
            let fc = g.mul(f, c)?;
            let ic = g.mul(i, cand)?;
            let c_new = g.add(fc, ic)?;
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc)?;
            if batch.lengths.iter().all(|&l| l > t) {
                h = h_new;
                c = c_new;
            } else {
                let mask: Vec<f64> = batch.lengths.iter().map(|&l| if l > t { 1.0 } else { 0.0 }).collect();
                let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
                let m = g.constant(Tensor::column(mask));
                let k = g.constant(Tensor::column(keep));
                let (a, bh) = (g.mul(m, h_new)?, g.mul(k, h)?);
                h = g.add(a, bh)?;
                let (a, bc) = (g.mul(m, c_new)?, g.mul(k, c)?);
                c = g.add(a, bc)?;
            }
        }
        Ok(h)
    }

    /// Features from the final hidden state and `case` (which may carry extra
    /// columns appended by a learner).
    pub fn forward_with_case(&self, g: &mut Graph, p: &[Var], batch: &SeqBatch, case: Var) -> Result<Var, NnError> {
        let h = self.final_hidden(g, p, batch)?;
        let joined = if g.shape(case)[1] == 0 { h } else { g.concat(&[h, case], Axis::Cols)? };
        self.proj.forward(g, p, joined)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], batch: &SeqBatch) -> Result<Var, NnError> {
        let case = g.constant(batch.case.clone());
        self.forward_with_case(g, p, batch, case)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, sigmoid};

    fn seq(steps: Vec<Vec<f64>>, case: Vec<f64>) -> SequenceTensor {
        SequenceTensor { steps, case_features: case }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let mk = |seed| {
            let mut s = ParamStore::new();
            Mlp::init(&mut s, "m", &[3, 4, 2], Stream::new(seed)).unwrap();
            s
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1), mk(2));
        let mut s = ParamStore::new();
        assert!(matches!(Mlp::init(&mut s, "m", &[3, 0, 2], Stream::new(0)), Err(NnError::Dim(_))));
        assert!(matches!(Lstm::init(&mut s, "l", 3, 0, 1, 2, Stream::new(0)), Err(NnError::Dim(_))));
        let lstm = Lstm::init(&mut s, "l", 3, 4, 1, 2, Stream::new(0)).unwrap();
        assert!(s.tensors[lstm.bias].data()[4..8].iter().all(|&v| v == 1.0));
        assert!(s.tensors[lstm.bias].data()[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_and_identity_mlps() {
        let mut s = ParamStore::new();
        let m = Mlp::init(&mut s, "m", &[3, 2], Stream::new(0)).unwrap();
        s.tensors[m.layers[0].weight] = Tensor::zeros(3, 2);
        s.tensors[m.layers[0].bias] = Tensor::row(vec![0.5, -1.0]);
        let mut g = Graph::new();
        let p = s.bind_const(&mut g);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.0, 9.0]]).unwrap());
        let y = m.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.5, -1.0]);

        let mut s = ParamStore::new();
        let m = Mlp::init(&mut s, "id", &[2, 2], Stream::new(0)).unwrap();
        s.tensors[m.layers[0].weight] = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let p = s.bind_const(&mut g);
        let rows = vec![vec![0.3, -2.0], vec![7.0, 1.0], vec![0.0, 0.1]];
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = m.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &rows.concat()[..]);
        let bad = g.constant(Tensor::zeros(1, 3));
        assert!(m.forward(&mut g, &p, bad).is_err());
    }

    fn small_lstm() -> (ParamStore, Lstm) {
        let mut s = ParamStore::new();
        let l = Lstm::init(&mut s, "l", 2, 3, 1, 2, Stream::new(5)).unwrap();
        (s, l)
    }

    #[test]
    fn zero_lstm_has_zero_state() {
        let (mut s, l) = small_lstm();
        for t in &mut s.tensors {
            t.data_mut().fill(0.0);
        }
        let b = SeqBatch::new(&[&seq(vec![vec![1.0, 2.0], vec![3.0, -1.0]], vec![0.5])], None).unwrap();
        let mut g = Graph::new();
        let p = s.bind_const(&mut g);
        let h = l.final_hidden(&mut g, &p, &b).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_does_not_change_outputs() {
        let (s, l) = small_lstm();
        let a = seq(vec![vec![1.0, 2.0]], vec![0.5]);
        let b = seq(vec![vec![0.1, 0.2], vec![-1.0, 0.4], vec![0.3, 0.3]], vec![-1.0]);
        let run = |pad| {
            let batch = SeqBatch::new(&[&a, &b], pad).unwrap();
            let mut g = Graph::new();
            let p = s.bind_const(&mut g);
            let y = l.forward(&mut g, &p, &batch).unwrap();
            g.value(y).clone()
        };
        let (x, y) = (run(None), run(Some(7)));
        assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        // batch order permutes outputs
        let batch = SeqBatch::new(&[&b, &a], None).unwrap();
        let mut g = Graph::new();
        let p = s.bind_const(&mut g);
        let z = l.forward(&mut g, &p, &batch).unwrap();
        assert_eq!(g.value(z).row_slice(0), x.row_slice(1));
        assert_eq!(g.value(z).row_slice(1), x.row_slice(0));
        assert!(SeqBatch::new(&[&seq(vec![], vec![])], None).is_err());
    }

    #[test]
    fn single_step_matches_cell_equations() {
        let (s, l) = small_lstm();
        let x = [0.7, -0.2];
        let batch = SeqBatch::new(&[&seq(vec![x.to_vec()], vec![0.0])], None).unwrap();
        let mut g = Graph::new();
        let p = s.bind_const(&mut g);
        let h = l.final_hidden(&mut g, &p, &batch).unwrap();
        let (wx, b) = (&s.tensors[l.w_input], &s.tensors[l.bias]);
        let hd = 3;
        for j in 0..hd {
            let z = |k: usize| b.at(0, k) + x[0] * wx.at(0, k) + x[1] * wx.at(1, k);
            let i = sigmoid(z(j));
            let c = i * z(2 * hd + j).tanh();
            let o = sigmoid(z(3 * hd + j));
            let expect = o * c.tanh();
            assert!((g.value(h).at(0, j) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn base_models_pass_grad_check() {
        for seed in 0..5 {
            let mut s = ParamStore::new();
            let m = Mlp::init(&mut s, "m", &[3, 4, 2], Stream::new(seed)).unwrap();
            let x = Tensor::from_rows(&[vec![0.2, -1.0, 0.5], vec![1.5, 0.3, -0.7]]).unwrap();
            let err = grad_check::<NnError, _>(
                |g, p| {
                    let xv = g.constant(x.clone());
                    let y = m.forward(g, p, xv)?;
                    let y = g.square(y);
                    Ok(g.sum_all(y))
                },
                &s.tensors,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "mlp {err}");

            let mut s = ParamStore::new();
            let l = Lstm::init(&mut s, "l", 2, 3, 1, 2, Stream::new(seed)).unwrap();
            let a = seq(vec![vec![1.0, 2.0]], vec![0.5]);
            let b = seq(vec![vec![0.1, 0.2], vec![-1.0, 0.4], vec![0.3, 0.3]], vec![-1.0]);
            let batch = SeqBatch::new(&[&a, &b], None).unwrap();
            let err = grad_check::<NnError, _>(
                |g, p| {
                    let y = l.forward(g, p, &batch)?;
                    let y = g.square(y);
                    Ok(g.sum_all(y))
                },
                &s.tensors,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "lstm {err}");
        }
    }
}
