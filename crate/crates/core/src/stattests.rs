//! Two-sample tests for realism checks on generated `(T, Y)` data.
//!
//! All tests except Epps–Singleton use label-permutation p-values with the
//! `+1` correction. Replicate `r` shuffles with its own keyed stream, so
//! p-values do not depend on thread scheduling.

use std::fmt::Write as _;

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::rng::Stream;

pub const DEFAULT_PERMUTATIONS: usize = 1000;
pub const DEFAULT_K: usize = 5;
pub const ES_POINTS: [f64; 2] = [0.4, 0.8];
pub const JITTER: f64 = 1e-6;
pub const MAX_ASSIGNMENT: usize = 512;
pub const PASS_LEVEL: f64 = 0.1;

pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("empty sample")]
    Empty,
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid order {0}; expected 1 or 2")]
    Order(u32),
    #[error("row {row}: {source}")]
    Row { row: String, source: Box<StatError> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    /// Zero for asymptotic p-values.
    pub n_permutations: usize,
}

/// Permutation p-value: `extreme(r)` reports whether replicate `r` is at
/// least as extreme as the observed statistic.
fn perm_p(n_perm: usize, extreme: impl Fn(u64) -> bool + Sync) -> f64 {
    let hits = (0..n_perm as u64).into_par_iter().filter(|&r| extreme(r)).count();
    (1 + hits) as f64 / (1 + n_perm) as f64
}

/// Label vector of replicate `r`: the first `na` shuffled positions are `A`.
fn perm_labels(stream: Stream, r: u64, na: usize, n: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream.with("perm").index(r).rng());
    let mut labels = vec![false; n];
    for &i in &idx[..na] {
        labels[i] = true;
    }
    labels
}

fn check_nonempty<T>(a: &[T], b: &[T]) -> Result<(), StatError> {
    if a.is_empty() || b.is_empty() {
        Err(StatError::Empty)
    } else {
        Ok(())
    }
}

/// Kolmogorov–Smirnov distance for a labelling of pooled values.
struct KsPool {
    /// Pooled indices sorted by value.
    order: Vec<usize>,
    /// `true` where the next sorted value differs (end of a tie group).
    group_end: Vec<bool>,
}

impl KsPool {
    fn new(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let group_end = (0..order.len()).map(|k| k + 1 == order.len() || values[order[k]] != values[order[k + 1]]).collect();
        Self { order, group_end }
    }

    fn distance(&self, labels: &[bool], na: usize, nb: usize) -> f64 {
        let (mut ca, mut cb, mut d) = (0usize, 0usize, 0.0f64);
        for (k, &i) in self.order.iter().enumerate() {
            if labels[i] {
                ca += 1;
            } else {
                cb += 1;
            }
            if self.group_end[k] {
                d = d.max((ca as f64 / na as f64 - cb as f64 / nb as f64).abs());
            }
        }
        d
    }
}

pub fn ks_test(a: &[f64], b: &[f64], n_perm: usize, stream: Stream) -> Result<TestResult, StatError> {
    check_nonempty(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (na, nb, n) = (a.len(), b.len(), pooled.len());
    let pool = KsPool::new(&pooled);
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let d = pool.distance(&labels, na, nb);
    let p = perm_p(n_perm, |r| pool.distance(&perm_labels(stream, r, na, n), na, nb) >= d - 1e-12);
    Ok(TestResult { name: "KS".into(), statistic: d, p_value: p, n_permutations: n_perm })
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn es_features(x: f64, ts: [f64; 2]) -> Vector4<f64> {
    Vector4::new((ts[0] * x).cos(), (ts[1] * x).cos(), (ts[0] * x).sin(), (ts[1] * x).sin())
}

fn mean_and_cov(x: &[f64], ts: [f64; 2]) -> (Vector4<f64>, Matrix4<f64>) {
    let g: Vec<Vector4<f64>> = x.iter().map(|&v| es_features(v, ts)).collect();
    let n = g.len() as f64;
    let mean = g.iter().fold(Vector4::zeros(), |acc, v| acc + v) / n;
    let cov = g.iter().fold(Matrix4::zeros(), |acc, v| {
        let d = v - mean;
        acc + d * d.transpose()
    }) / n;
    (mean, cov)
}

/// Epps–Singleton test on empirical characteristic functions with an
/// asymptotic chi-square null; degrees of freedom equal the numerical rank of
/// the weighted covariance.
pub fn es_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatError> {
    check_nonempty(a, b)?;
    let (nx, ny) = (a.len() as f64, b.len() as f64);
    let n = nx + ny;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    if pooled[0] == pooled[pooled.len() - 1] {
        return Err(StatError::Degenerate("all points identical".into()));
    }
    let mut scale = (percentile(&pooled, 0.75) - percentile(&pooled, 0.25)) / 2.0;
    if scale <= 0.0 {
        let m = pooled.iter().sum::<f64>() / n;
        scale = (pooled.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    }
    let ts = [ES_POINTS[0] / scale, ES_POINTS[1] / scale];
    let (mx, cx) = mean_and_cov(a, ts);
    let (my, cy) = mean_and_cov(b, ts);
    let cov = cx * (n / nx) + cy * (n / ny);
    let eig = SymmetricEigen::new(cov);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let tol = lmax * 1e-10;
    let mut pinv = Matrix4::zeros();
    let mut rank = 0;
    for k in 0..4 {
        let l = eig.eigenvalues[k];
        if l > tol {
            let v = eig.eigenvectors.column(k);
            pinv += v * v.transpose() / l;
            rank += 1;
        }
    }
    if rank == 0 {
        return Err(StatError::Degenerate("zero covariance".into()));
    }
    let diff = mx - my;
    let mut w = n * (diff.transpose() * pinv * diff)[(0, 0)];
    if nx.max(ny) < 25.0 {
        w /= 1.0 + n.powf(-0.45) + 10.1 * (nx.powf(-1.7) + ny.powf(-1.7));
    }
    let p = ChiSquared::new(rank as f64).expect("positive df").sf(w.max(0.0));
    Ok(TestResult { name: "ES".into(), statistic: w, p_value: p.clamp(0.0, 1.0), n_permutations: 0 })
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Pooled points plus `U(0, JITTER)` per coordinate.
fn jittered(a: &[Point], b: &[Point], stream: Stream) -> Vec<Point> {
    let mut rng = stream.with("jitter").rng();
    a.iter().chain(b).map(|p| [p[0] + rng.gen_range(0.0..JITTER), p[1] + rng.gen_range(0.0..JITTER)]).collect()
}

/// Euclidean minimum spanning tree by Prim's algorithm, as edge list.
pub fn minimum_spanning_tree(points: &[Point]) -> Vec<(usize, usize)> {
    let n = points.len();
    if n < 2 {
        return vec![];
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = dist(&points[cur], &points[j]);
            if d < best[j] {
                best[j] = d;
                parent[j] = cur;
            }
            if best[j] < next_d {
                next_d = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((parent[next], next));
        cur = next;
    }
    edges
}

/// Friedman–Rafsky: few cross-label MST edges indicate different samples.
pub fn fr_test(a: &[Point], b: &[Point], n_perm: usize, stream: Stream) -> Result<TestResult, StatError> {
    for s in [a, b] {
        if s.len() < 5 {
            return Err(StatError::TooFew { need: 5, got: s.len() });
        }
    }
    let pts = jittered(a, b, stream);
    let edges = minimum_spanning_tree(&pts);
    let (na, n) = (a.len(), pts.len());
    let cross = |labels: &[bool]| edges.iter().filter(|&&(i, j)| labels[i] != labels[j]).count();
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let c = cross(&labels);
    let p = perm_p(n_perm, |r| cross(&perm_labels(stream, r, na, n)) <= c);
    Ok(TestResult { name: "FR".into(), statistic: c as f64, p_value: p, n_permutations: n_perm })
}

/// `k` nearest neighbours of every point (self excluded), by brute force.
fn knn_graph(points: &[Point], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> =
                points.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, q)| (dist(&points[i], q), j)).collect();
            d.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            d[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

pub fn knn_test(a: &[Point], b: &[Point], k: usize, n_perm: usize, stream: Stream) -> Result<TestResult, StatError> {
    check_nonempty(a, b)?;
    let n = a.len() + b.len();
    if k == 0 || n <= k + 1 {
        return Err(StatError::TooFew { need: k + 2, got: n });
    }
    let pts = jittered(a, b, stream);
    let graph = knn_graph(&pts, k);
    let na = a.len();
    let stat = |labels: &[bool]| {
        let same: usize = graph.iter().enumerate().map(|(i, nb)| nb.iter().filter(|&&j| labels[j] == labels[i]).count()).sum();
        same as f64 / (n * k) as f64
    };
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let s = stat(&labels);
    let p = perm_p(n_perm, |r| stat(&perm_labels(stream, r, na, n)) >= s - 1e-12);
    Ok(TestResult { name: "kNN".into(), statistic: s, p_value: p, n_permutations: n_perm })
}

/// Energy distance `2 E|A-B| - E|A-A'| - E|B-B'|` with all-pairs means.
fn energy_stat(d: &[f64], labels: &[bool], na: usize, nb: usize) -> f64 {
    let n = labels.len();
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut ra, mut rb) = (0.0, 0.0);
        for (j, &v) in row.iter().enumerate() {
            if labels[j] {
                ra += v;
            } else {
                rb += v;
            }
        }
        if labels[i] {
            saa += ra;
            sab += rb;
        } else {
            sbb += rb;
        }
    }
    let (na, nb) = (na as f64, nb as f64);
    2.0 * sab / (na * nb) - saa / (na * na) - sbb / (nb * nb)
}

pub fn energy_test(a: &[Point], b: &[Point], n_perm: usize, stream: Stream) -> Result<TestResult, StatError> {
    check_nonempty(a, b)?;
    let pts: Vec<Point> = a.iter().chain(b).copied().collect();
    let n = pts.len();
    let d: Vec<f64> = (0..n * n).map(|k| dist(&pts[k / n], &pts[k % n])).collect();
    let (na, nb) = (a.len(), b.len());
    let labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let e = energy_stat(&d, &labels, na, nb);
    let p = perm_p(n_perm, |r| energy_stat(&d, &perm_labels(stream, r, na, n), na, nb) >= e - 1e-12);
    Ok(TestResult { name: "Energy".into(), statistic: e, p_value: p, n_permutations: n_perm })
}

/// Minimum-cost perfect matching on a square cost matrix (row-major),
/// by the shortest augmenting path method with potentials. Returns the
/// total cost.
pub fn assignment_cost(cost: &[f64], n: usize) -> f64 {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[(p[j] - 1) * n + (j - 1)]).sum()
}

/// Whether all points share one coordinate, making the problem 1-D.
fn collinear_axis(points: &[Point]) -> Option<usize> {
    (0..2).find(|&c| points.iter().all(|p| p[c] == points[0][c])).map(|c| 1 - c)
}

/// Exact `W_order` between equal-size point sets.
pub fn wasserstein_points(a: &[Point], b: &[Point], order: u32) -> Result<f64, StatError> {
    check_nonempty(a, b)?;
    if a.len() != b.len() {
        return Err(StatError::Degenerate(format!("unequal sizes {} and {}", a.len(), b.len())));
    }
    if !(1..=2).contains(&order) {
        return Err(StatError::Order(order));
    }
    let all: Vec<Point> = a.iter().chain(b).copied().collect();
    let n = a.len();
    let total = match collinear_axis(&all) {
        Some(axis) => {
            let mut x: Vec<f64> = a.iter().map(|p| p[axis]).collect();
            let mut y: Vec<f64> = b.iter().map(|p| p[axis]).collect();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            x.iter().zip(&y).map(|(u, v)| (u - v).abs().powi(order as i32)).sum::<f64>()
        }
        None => {
            let cost: Vec<f64> = (0..n * n).map(|k| dist(&a[k / n], &b[k % n]).powi(order as i32)).collect();
            assignment_cost(&cost, n)
        }
    };
    Ok((total / n as f64).powf(1.0 / order as f64))
}

fn subsample(points: &[Point], m: usize, stream: Stream) -> Vec<Point> {
    if points.len() <= m {
        return points.to_vec();
    }
    let mut idx = sample(&mut stream.rng(), points.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

pub fn wasserstein_perm_test(a: &[Point], b: &[Point], order: u32, n_perm: usize, stream: Stream) -> Result<TestResult, StatError> {
    check_nonempty(a, b)?;
    let m = a.len().min(b.len()).min(MAX_ASSIGNMENT);
    let a = subsample(a, m, stream.with("subsample-a"));
    let b = subsample(b, m, stream.with("subsample-b"));
    let w = wasserstein_points(&a, &b, order)?;
    let pooled: Vec<Point> = a.iter().chain(&b).copied().collect();
    let split = |labels: &[bool]| -> (Vec<Point>, Vec<Point>) {
        let (mut x, mut y) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for (p, &l) in pooled.iter().zip(labels) {
            if l {
                x.push(*p);
            } else {
                y.push(*p);
            }
        }
        (x, y)
    };
    let p = perm_p(n_perm, |r| {
        let (x, y) = split(&perm_labels(stream, r, m, 2 * m));
        wasserstein_points(&x, &y, order).expect("equal sizes") >= w - 1e-12
    });
    let name = if order == 1 { "Wass1" } else { "Wass2" };
    Ok(TestResult { name: name.into(), statistic: w, p_value: p, n_permutations: n_perm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub result: TestResult,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuiteReport {
    pub rows: Vec<SuiteRow>,
}

pub const SUITE_ROWS: [&str; 9] = ["T KS", "T ES", "Y KS", "Y ES", "(T,Y) Wass1", "(T,Y) Wass2", "(T,Y) FR", "(T,Y) kNN", "(T,Y) Energy"];

impl TestSuiteReport {
    pub fn passes(&self) -> usize {
        self.rows.iter().filter(|r| r.pass).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("test,statistic,p_value,n_permutations,pass\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:?},{:?},{},{}", r.label, r.result.statistic, r.result.p_value, r.result.n_permutations, r.pass);
        }
        out
    }
}

/// Rescales each coordinate by its pooled standard deviation.
fn standardize_pairs(real: &[(f64, f64)], gen: &[(f64, f64)]) -> (Vec<Point>, Vec<Point>) {
    let n = (real.len() + gen.len()) as f64;
    let scale = |f: fn(&(f64, f64)) -> f64| {
        let m = real.iter().chain(gen).map(f).sum::<f64>() / n;
        let s = (real.iter().chain(gen).map(|p| (f(p) - m).powi(2)).sum::<f64>() / n).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let (st, sy) = (scale(|p| p.0), scale(|p| p.1));
    let conv = |v: &[(f64, f64)]| v.iter().map(|&(t, y)| [t / st, y / sy]).collect();
    (conv(real), conv(gen))
}

/// The nine realism rows, passing at `p > 0.1`.
pub fn realism_suite(real: &[(f64, f64)], gen: &[(f64, f64)], n_perm: usize, seed: u64) -> Result<TestSuiteReport, StatError> {
    check_nonempty(real, gen)?;
    let s = Stream::new(seed).with("realism");
    let t = |v: &[(f64, f64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
    let y = |v: &[(f64, f64)]| v.iter().map(|p| p.1).collect::<Vec<_>>();
    let (rt, gt, ry, gy) = (t(real), t(gen), y(real), y(gen));
    let (rp, gp) = standardize_pairs(real, gen);
    let mut rows = Vec::with_capacity(9);
    for label in SUITE_ROWS {
        let st = s.with(label);
        let res = match label {
            "T KS" => ks_test(&rt, &gt, n_perm, st),
            "T ES" => es_test(&rt, &gt),
            "Y KS" => ks_test(&ry, &gy, n_perm, st),
            "Y ES" => es_test(&ry, &gy),
            "(T,Y) Wass1" => wasserstein_perm_test(&rp, &gp, 1, n_perm, st),
            "(T,Y) Wass2" => wasserstein_perm_test(&rp, &gp, 2, n_perm, st),
            "(T,Y) FR" => fr_test(&rp, &gp, n_perm, st),
            "(T,Y) kNN" => knn_test(&rp, &gp, DEFAULT_K, n_perm, st),
            _ => energy_test(&rp, &gp, n_perm, st),
        }
        .map_err(|e| StatError::Row { row: label.to_string(), source: Box::new(e) })?;
        rows.push(SuiteRow { label: label.to_string(), pass: res.p_value > PASS_LEVEL, result: res });
    }
    Ok(TestSuiteReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, shift: f64, seed: u64) -> Vec<f64> {
        let mut rng = Stream::new(seed).rng();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                shift + z
            })
            .collect::<Vec<f64>>()
    }

    fn line(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0]).collect()
    }

    #[test]
    fn ks_reference_cases() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let r = ks_test(&a, &[5.0, 2.0, 1.0, 2.0], 200, Stream::new(0)).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let r = ks_test(&[0.0; 100], &[1.0; 100], 1000, Stream::new(0)).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert_eq!(r.p_value, 1.0 / 1001.0);
        assert_eq!(ks_test(&[], &[1.0], 10, Stream::new(0)), Err(StatError::Empty));
        // ties across samples are handled at group ends
        let r = ks_test(&[0.0, 1.0], &[0.0, 0.0], 10, Stream::new(0)).unwrap();
        assert_eq!(r.statistic, 0.5);
    }

    #[test]
    fn es_reference_cases() {
        assert!(matches!(es_test(&[1.0; 30], &[1.0; 30]), Err(StatError::Degenerate(_))));
        let mut rng = Stream::new(3).rng();
        let bern =
            |p: f64, rng: &mut crate::rng::StreamRng| (0..200).map(|_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let (x, y) = (bern(0.1, &mut rng), bern(0.9, &mut rng));
        assert!(es_test(&x, &y).unwrap().p_value <= 0.001);
        let (x, y) = (bern(0.5, &mut rng), bern(0.5, &mut rng));
        let r = es_test(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&r.p_value));
        let r = es_test(&normals(100, 0.0, 1), &normals(100, 0.0, 2)).unwrap();
        assert!(r.p_value > 0.01);
        assert!(es_test(&normals(10, 0.0, 1), &normals(12, 0.0, 2)).is_ok());
    }

    #[test]
    fn mst_of_two_pairs() {
        let pts = line(&[0.0, 1.0, 10.0, 11.0]);
        let mut e: Vec<(usize, usize)> = minimum_spanning_tree(&pts).into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        e.sort();
        assert_eq!(e, vec![(0, 1), (1, 2), (2, 3)]);
        let a = line(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let b = line(&[100.0, 101.0, 102.0, 103.0, 104.0]);
        for seed in 0..5 {
            assert_eq!(fr_test(&a, &b, 50, Stream::new(seed)).unwrap().statistic, 1.0);
        }
        assert!(fr_test(&a, &a, 300, Stream::new(1)).unwrap().p_value >= 0.5);
        assert!(matches!(fr_test(&a[..4], &b, 10, Stream::new(0)), Err(StatError::TooFew { .. })));
    }

    #[test]
    fn knn_and_energy_reference_cases() {
        let a: Vec<Point> = (0..50).map(|i| [i as f64 * 0.01, 0.0]).collect();
        let b: Vec<Point> = (0..50).map(|i| [100.0 + i as f64 * 0.01, 5.0]).collect();
        let r = knn_test(&a, &b, 5, 200, Stream::new(0)).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert_eq!(r.p_value, 1.0 / 201.0);
        assert!(knn_test(&a[..3], &b[..3], 6, 10, Stream::new(0)).is_err());

        let r = energy_test(&[[0.0, 0.0]; 50], &[[3.0, 4.0]; 50], 100, Stream::new(0)).unwrap();
        assert!((r.statistic - 10.0).abs() < 1e-12);
        let r = energy_test(&b, &b.iter().rev().copied().collect::<Vec<_>>(), 100, Stream::new(0)).unwrap();
        assert!(r.statistic.abs() < 1e-12);
    }

    fn brute_assignment(cost: &[f64], n: usize) -> f64 {
        fn go(row: usize, used: &mut Vec<bool>, cost: &[f64], n: usize) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + go(row + 1, used, cost, n));
                    used[j] = false;
                }
            }
            best
        }
        go(0, &mut vec![false; n], cost, n)
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = Stream::new(11).rng();
        for n in 1..=7 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
                assert!((assignment_cost(&cost, n) - brute_assignment(&cost, n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wasserstein_reference_cases() {
        let a = line(&[1.0, 2.0, 3.0]);
        let b = line(&[2.0, 3.0, 4.0]);
        assert!((wasserstein_points(&a, &b, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((wasserstein_points(&a, &b, 2).unwrap() - 1.0).abs() < 1e-12);
        let r = wasserstein_perm_test(&a, &a, 1, 100, Stream::new(0)).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        assert!(wasserstein_points(&a, &b, 3).is_err());
        // 2-D assignment path agrees with the 1-D path after a rotation
        let rot = |p: &Point| [p[0] * 0.6, p[0] * 0.8];
        let (ra, rb): (Vec<Point>, Vec<Point>) = (a.iter().map(rot).collect(), b.iter().map(rot).collect());
        assert!((wasserstein_points(&ra, &rb, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn suite_on_identical_data() {
        let mut rng = Stream::new(5).rng();
        let real: Vec<(f64, f64)> =
            (0..120).map(|_| (rng.gen_range(1..=3) as f64, if rng.gen::<f64>() < 0.3 { 0.0 } else { rng.gen_range(-5.0..5.0) })).collect();
        let rep = realism_suite(&real, &real, 200, 1).unwrap();
        assert_eq!(rep.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), SUITE_ROWS.to_vec());
        for r in &rep.rows {
            assert!(r.result.p_value >= 0.5 && r.pass, "{}: {}", r.label, r.result.p_value);
        }
        assert_eq!(rep.to_csv().lines().count(), 10);
    }

    #[test]
    fn suite_flags_flipped_treatments() {
        let mut rng = Stream::new(6).rng();
        let real: Vec<(f64, f64)> = (0..300).map(|_| (if rng.gen::<f64>() < 0.8 { 1.0 } else { 0.0 }, rng.gen_range(0.0..1.0))).collect();
        let gen: Vec<(f64, f64)> = real.iter().map(|&(t, y)| (1.0 - t, y)).collect();
        let rep = realism_suite(&real, &gen, 200, 2).unwrap();
        for label in ["T KS", "T ES"] {
            let row = rep.rows.iter().find(|r| r.label == label).unwrap();
            assert!(row.result.p_value <= 0.01, "{label}");
        }
    }

    #[test]
    fn p_values_are_corrected_and_scheduling_free() {
        let (a, b) = (normals(60, 0.0, 1), normals(60, 0.3, 2));
        let r1 = ks_test(&a, &b, 99, Stream::new(4)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let r2 = pool.install(|| ks_test(&a, &b, 99, Stream::new(4)).unwrap());
        assert_eq!(r1, r2);
        assert!(r1.p_value >= 1.0 / 100.0 && r1.p_value <= 1.0);
        let w = wasserstein_perm_test(&line(&a), &line(&b), 1, 20, Stream::new(0)).unwrap();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let direct = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 60.0;
        assert!((w.statistic - direct).abs() < 1e-9);
    }
}
