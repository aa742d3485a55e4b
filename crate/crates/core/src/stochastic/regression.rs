//! Least-squares Monte Carlo backend.
//!
//! Brownian paths are simulated on a uniform grid of nodes; a field at a node
//! is one row per path. Conditional expectations given `F_t` are least-squares
//! regressions onto normalized Hermite polynomials `He_k(W_t / sqrt t) / sqrt(k!)`,
//! which is exact for functionals of the current Brownian value up to the
//! polynomial degree and sampling noise.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gauss::GaussHermite;
use super::{PairNode, StochasticBackend};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    pub paths: usize,
    pub seed: u64,
    /// Highest Hermite degree in the regression basis.
    pub degree: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            seed: 7,
            degree: 4,
        }
    }
}

/// Paths used when measuring errors against exact fields.
const ERROR_PATHS: usize = 4096;

/// Gram matrices worse than this are treated as singular.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct RegressionBackend<S> {
    paths: usize,
    degree: usize,
    horizon: f64,
    node_dt: f64,
    /// `w[k][p]` is `W(t_k)` on path `p`.
    w: Vec<Vec<S>>,
}

impl<S: Real> RegressionBackend<S> {
    pub fn new(config: &RegressionConfig, horizon: S, nodes: usize) -> Result<Self> {
        if config.paths < 2 * (config.degree + 1) {
            return Err(Error::InsufficientPoints(config.paths));
        }
        if nodes == 0 || !(horizon > S::zero()) {
            return Err(Error::InvalidGrid(format!(
                "regression backend needs a positive horizon and at least one step, got T={horizon}, n={nodes}"
            )));
        }
        let horizon = horizon.as_f64();
        let node_dt = horizon / nodes as f64;
        let sd = node_dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut w = Vec::with_capacity(nodes + 1);
        let mut cur = vec![0.0f64; config.paths];
        w.push(vec![S::zero(); config.paths]);
        for _ in 0..nodes {
            for c in cur.iter_mut() {
                let xi: f64 = StandardNormal.sample(&mut rng);
                *c += sd * xi;
            }
            w.push(cur.iter().map(|&v| S::of(v)).collect());
        }
        Ok(Self {
            paths: config.paths,
            degree: config.degree,
            horizon,
            node_dt,
            w,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn node_index(&self, t: f64) -> Result<usize> {
        let s = t / self.node_dt;
        let k = s.round();
        if k < 0.0 || (s - k).abs() > 1e-7 || k as usize >= self.w.len() {
            return Err(Error::Misaligned {
                time: t,
                dt: self.node_dt,
            });
        }
        Ok(k as usize)
    }

    fn step_indices(&self, t: S, dt: S) -> Result<(usize, usize)> {
        if !(dt > S::zero()) {
            return Err(Error::Domain(format!("step length must be positive, got {dt}")));
        }
        let k0 = self.node_index(t.as_f64())?;
        let k1 = self.node_index((t + dt).as_f64())?;
        if k1 <= k0 {
            return Err(Error::Misaligned {
                time: t.as_f64(),
                dt: dt.as_f64(),
            });
        }
        Ok((k0, k1))
    }

    fn check_rows(&self, v: &ArrayView2<S>) -> Result<()> {
        if v.nrows() != self.paths {
            return Err(Error::DimensionMismatch {
                expected: self.paths,
                found: v.nrows(),
            });
        }
        Ok(())
    }

    /// Basis values at node `k` for every path, `basis[p][i]`.
    fn basis(&self, k: usize) -> (usize, Vec<f64>) {
        let t = k as f64 * self.node_dt;
        let dim = if k == 0 { 1 } else { self.degree + 1 };
        let mut out = vec![0.0; self.paths * dim];
        let scale = if k == 0 { 0.0 } else { 1.0 / t.sqrt() };
        for (p, row) in out.chunks_mut(dim).enumerate() {
            let x = self.w[k][p].as_f64() * scale;
            // He_{n+1} = x He_n - n He_{n-1}, normalized by sqrt(n!)
            let (mut prev, mut cur) = (0.0f64, 1.0f64);
            row[0] = 1.0;
            for n in 1..dim {
                let next = x * cur - (n as f64 - 1.0) * prev;
                prev = cur;
                cur = next;
                row[n] = cur;
            }
            let mut fact = 1.0f64;
            for (n, r) in row.iter_mut().enumerate().skip(1) {
                fact *= n as f64;
                *r /= fact.sqrt();
            }
        }
        (dim, out)
    }

    /// Regress `targets[p][m]` (row per path) on the basis at node `k` and
    /// return fitted values per path.
    fn regress(&self, k: usize, targets: &Array2<f64>) -> Result<Array2<S>> {
        let (dim, phi) = self.basis(k);
        let n = self.paths as f64;
        let mut gram = vec![0.0f64; dim * dim];
        for row in phi.chunks(dim) {
            for a in 0..dim {
                for b in 0..=a {
                    gram[a * dim + b] += row[a] * row[b];
                }
            }
        }
        gram.iter_mut().for_each(|g| *g /= n);
        let chol = cholesky(&mut gram, dim).ok_or(Error::SingularRegression {
            time: k as f64 * self.node_dt,
            condition: f64::INFINITY,
        })?;
        if chol > MAX_CONDITION {
            return Err(Error::SingularRegression {
                time: k as f64 * self.node_dt,
                condition: chol,
            });
        }
        let modes = targets.ncols();
        let mut rhs = vec![0.0f64; dim * modes];
        for (row, trow) in phi.chunks(dim).zip(targets.rows()) {
            for a in 0..dim {
                let ra = row[a];
                for (m, &y) in trow.iter().enumerate() {
                    rhs[a * modes + m] += ra * y;
                }
            }
        }
        rhs.iter_mut().for_each(|r| *r /= n);
        for m in 0..modes {
            let mut col: Vec<f64> = (0..dim).map(|a| rhs[a * modes + m]).collect();
            cholesky_solve(&gram, dim, &mut col);
            for a in 0..dim {
                rhs[a * modes + m] = col[a];
            }
        }
        let mut out = Array2::zeros((self.paths, modes));
        for (mut orow, row) in out.rows_mut().into_iter().zip(phi.chunks(dim)) {
            for (m, o) in orow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..dim {
                    acc += row[a] * rhs[a * modes + m];
                }
                *o = S::of(acc);
            }
        }
        Ok(out)
    }
}

/// In-place lower Cholesky factor of a symmetric matrix (lower triangle
/// used). Returns the squared ratio of the largest to smallest pivot as a
/// cheap condition estimate, or `None` if a pivot is not positive.
fn cholesky(a: &mut [f64], n: usize) -> Option<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let l = d.sqrt();
        lo = lo.min(l);
        hi = hi.max(l);
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    Some((hi / lo).powi(2))
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

impl<S: Real> StochasticBackend<S> for RegressionBackend<S> {
    fn name(&self) -> &'static str {
        "regression"
    }

    fn level_points(&self) -> usize {
        self.paths
    }

    fn step_points(&self) -> usize {
        self.paths
    }

    fn step_parent(&self, step_point: usize) -> usize {
        step_point
    }

    fn coordinates(&self, t: S) -> Result<Vec<S>> {
        Ok(self.w[self.node_index(t.as_f64())?].clone())
    }

    fn step_coordinates(&self, t: S, dt: S) -> Result<Vec<S>> {
        let (_, k1) = self.step_indices(t, dt)?;
        Ok(self.w[k1].clone())
    }

    fn increments(&self, t: S, dt: S) -> Result<Vec<S>> {
        let (k0, k1) = self.step_indices(t, dt)?;
        Ok(self.w[k1].iter().zip(&self.w[k0]).map(|(&a, &b)| a - b).collect())
    }

    fn lift_next(&self, t: S, dt: S, v: ArrayView2<S>) -> Result<Array2<S>> {
        self.step_indices(t, dt)?;
        self.check_rows(&v)?;
        Ok(v.to_owned())
    }

    fn lift_current(&self, t: S, dt: S, v: ArrayView2<S>) -> Result<Array2<S>> {
        self.step_indices(t, dt)?;
        self.check_rows(&v)?;
        Ok(v.to_owned())
    }

    fn expect(&self, t: S, dt: S, s: ArrayView2<S>) -> Result<Array2<S>> {
        let (k0, _) = self.step_indices(t, dt)?;
        self.check_rows(&s)?;
        self.regress(k0, &s.mapv(|v| v.as_f64()))
    }

    fn ito(&self, t: S, dt: S, s: ArrayView2<S>) -> Result<Array2<S>> {
        let (k0, k1) = self.step_indices(t, dt)?;
        self.check_rows(&s)?;
        let inv = 1.0 / dt.as_f64();
        let mut target = s.mapv(|v| v.as_f64());
        for (mut row, p) in target.rows_mut().into_iter().zip(0..self.paths) {
            let dw = (self.w[k1][p] - self.w[k0][p]).as_f64() * inv;
            row.mapv_inplace(|v| v * dw);
        }
        self.regress(k0, &target)
    }

    fn level_weights(&self, t: S) -> Result<Vec<S>> {
        self.node_index(t.as_f64())?;
        Ok(vec![S::one() / S::of_usize(self.paths); self.paths])
    }

    fn step_measure(&self, _t: S, _dt: S, level: &[S]) -> Result<Vec<S>> {
        if level.len() != self.paths {
            return Err(Error::DimensionMismatch {
                expected: self.paths,
                found: level.len(),
            });
        }
        Ok(level.to_vec())
    }

    fn initial_measure(&self) -> Vec<S> {
        vec![S::one() / S::of_usize(self.paths); self.paths]
    }

    fn propagate_measure(&self, t: S, dt: S, mu: &[S]) -> Result<Vec<S>> {
        self.step_indices(t, dt)?;
        Ok(mu.to_vec())
    }

    fn project_next(
        &self,
        t: S,
        dt: S,
        s: ArrayView2<S>,
        _mu: &[S],
        _mu_next: &[S],
    ) -> Result<Array2<S>> {
        self.step_indices(t, dt)?;
        self.check_rows(&s)?;
        Ok(s.to_owned())
    }

    fn pair_rule(&self, t0: S, t1: S) -> Result<Vec<PairNode<S>>> {
        let k0 = self.node_index(t0.as_f64())?;
        let n = self.paths.min(ERROR_PATHS);
        let w0 = S::one() / S::of_usize(n);
        // Use the simulated value at t1 when it is a node; otherwise
        // integrate the Gaussian increment by quadrature.
        if let Ok(k1) = self.node_index(t1.as_f64()) {
            if k1 >= k0 {
                return Ok((0..n)
                    .map(|p| PairNode {
                        weight: w0,
                        x0: self.w[k0][p],
                        x1: self.w[k1][p],
                        path: p,
                    })
                    .collect());
            }
        }
        if t1 < t0 {
            return Err(Error::Domain(format!("pair rule needs t0 <= t1, got {t0}, {t1}")));
        }
        let gh = GaussHermite::new(12)?;
        let sd = (t1 - t0).sqrt();
        let mut out = Vec::with_capacity(n * gh.order());
        for p in 0..n {
            for (&x, &w) in gh.nodes.iter().zip(&gh.weights) {
                out.push(PairNode {
                    weight: w0 * S::of(w),
                    x0: self.w[k0][p],
                    x1: self.w[k0][p] + sd * S::of(x),
                    path: p,
                });
            }
        }
        Ok(out)
    }

    fn evaluate(&self, t: S, values: ArrayView2<S>, _x: S, path: usize, out: &mut [S]) -> Result<()> {
        self.node_index(t.as_f64())?;
        self.check_rows(&values)?;
        out.iter_mut().zip(values.row(path).iter()).for_each(|(o, &v)| *o = v);
        Ok(())
    }
}

impl<S> RegressionBackend<S> {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}
