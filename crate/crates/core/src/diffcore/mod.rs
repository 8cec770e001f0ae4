//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`] for every node that
//! depends on a parameter leaf.

mod graph;
mod tensor;

use rand::seq::index::sample;
use thiserror::Error;

pub use graph::{lse, Axis, Gradients, Graph, Var};
pub use graph::{sigmoid, softplus};
pub use tensor::Tensor;

use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape mismatch in {op}: {left:?} vs {right:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub left: [usize; 2],
    pub right: [usize; 2],
}

impl ShapeError {
    pub fn new(op: &'static str, left: [usize; 2], right: [usize; 2]) -> Self {
        Self { op, left, right }
    }
}

/// Coordinates checked when a parameter set exceeds [`GRAD_CHECK_FULL_LIMIT`].
pub const GRAD_CHECK_SAMPLE: usize = 2000;
pub const GRAD_CHECK_FULL_LIMIT: usize = 10_000;

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` builds a scalar from parameter leaves registered in order. Returns the
/// maximum over checked coordinates of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<E, F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64, E>
where
    E: From<ShapeError>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(params)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();

    let coords: Vec<(usize, usize)> = params.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j))).collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > GRAD_CHECK_FULL_LIMIT {
        let mut rng = Stream::new(coords.len() as u64).with("grad_check").rng();
        sample(&mut rng, coords.len(), GRAD_CHECK_SAMPLE).into_iter().map(|k| coords[k]).collect()
    } else {
        coords
    };

    let scalar = |ps: &[Tensor]| -> Result<f64, E> {
        let (g, _, out) = eval(ps)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (i, j) in chosen {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + epsilon;
        let up = scalar(&work)?;
        work[i].data_mut()[j] = orig - epsilon;
        let down = scalar(&work)?;
        work[i].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let ad = analytic[i].data()[j];
        let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::new(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_and_its_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), Some(0.5));
        let gr = g.backward(y).unwrap();
        assert_relative_eq!(gr.get(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1000.0, 1000.0]));
        let y = g.log_sum_exp(x, Axis::Cols);
        assert_relative_eq!(g.value(y).data()[0], 1000.0 + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn matmul_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(2, 3, 1.0));
        let b = g.constant(Tensor::full(3, 1, 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &t(2, 1, &[3.0, 3.0]));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.left, [2, 3]);
        assert_eq!(err.right, [2, 3]);
        assert!(err.to_string().contains("[2, 3]"));
        let c = g.constant(Tensor::zeros(4, 2));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(t(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum_all(x);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap(), &Tensor::full(2, 2, 1.0));
    }

    #[test]
    fn log_of_exp_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[-3.0, 0.0, 2.5]));
        let e = g.exp(x);
        let l = g.log(e);
        let s = g.sum_all(l);
        let gr = g.backward(s).unwrap();
        for v in gr.get(x).unwrap().data() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 1));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[0.0, 2.0, -1.0]));
        let a = g.abs(x);
        let s = g.sum_all(a);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn quadratic_grad_check() {
        let err = grad_check::<ShapeError, _>(
            |g, p| {
                let sq = g.square(p[0]);
                let s = g.sum_all(sq);
                Ok(g.scale(s, 0.5))
            },
            &[Tensor::row(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut g = Graph::new();
        let x = g.param(t(3, 1, &[1.0, 2.0, 3.0]));
        let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 1.0, 3.0]);
        let s = g.sum_all(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.constant(t(2, 2, &[0.3, -1.2, 2.2, 0.7]));
            let b = g.constant(t(2, 2, &[1.1, 0.4, -0.9, 0.2]));
            let m = g.matmul(a, b).unwrap();
            let s = g.softplus(m);
            let l = g.log_sum_exp(s, Axis::Rows);
            g.value(l).clone()
        };
        let (x, y) = (build(), build());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = Stream::new(seed).with("tensor").rng();
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        for seed in 0..20u64 {
            let a = rand_tensor(2, 3, seed);
            let b = rand_tensor(3, 2, seed + 1000);
            for (name, f) in crate::gradcheck::primitive_losses() {
                let err = grad_check(|g, p| f(g, p), &[a.clone(), b.clone()], 1e-6).unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn broadcast_add_matches_manual(r in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
            let a = rand_tensor(r, c, seed);
            let b = rand_tensor(1, c, seed + 1);
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let y = g.add(va, vb).unwrap();
            for i in 0..r {
                for j in 0..c {
                    prop_assert_eq!(g.value(y).at(i, j), a.at(i, j) + b.at(0, j));
                }
            }
        }
    }
}
