//! Gauss-Hermite lattice in the Brownian coordinate.
//!
//! A field at any time is a function of `x = W(t)` sampled on a fixed
//! uniform grid. One step of length `dt` branches every node `x_i` into
//! `x_i + sqrt(dt) xi_k` with normalized Gauss-Hermite weights `w_k`; values
//! at the branch points come from interpolating the later field. Outside the
//! grid the edge value is used.
//!
//! Under this one-step measure the increment operator identities hold
//! exactly: `I` is the weighted projection onto `span{xi_k}` node by node.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::gauss::GaussHermite;
use super::{PairNode, StochasticBackend};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    #[default]
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeConfig {
    pub gh_order: usize,
    /// Half-width of the grid in units of `sqrt(T)`.
    pub extent: f64,
    /// Grid size; must be odd so `x = 0` is a node.
    pub points: usize,
    pub interpolation: Interpolation,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            gh_order: 8,
            extent: 6.0,
            points: 257,
            interpolation: Interpolation::Cubic,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Stencil<S> {
    base: usize,
    len: usize,
    w: [S; 4],
}

#[derive(Debug, Clone)]
pub struct LatticeBackend<S> {
    x: Vec<S>,
    x0: S,
    h: S,
    center: usize,
    gh_nodes: Vec<S>,
    gh_weights: Vec<S>,
    interpolation: Interpolation,
    horizon: S,
}

impl<S: Real> LatticeBackend<S> {
    pub fn new(config: &LatticeConfig, horizon: S) -> Result<Self> {
        if config.points < 5 || config.points.is_multiple_of(2) {
            return Err(Error::Domain(format!(
                "lattice needs an odd number of at least 5 points, got {}",
                config.points
            )));
        }
        if !(config.extent > 0.0) {
            return Err(Error::Domain("lattice extent must be positive".into()));
        }
        let half = S::of(config.extent) * horizon.sqrt();
        let h = (half + half) / S::of_usize(config.points - 1);
        Self::build(h, config.points, config.gh_order, config.interpolation, horizon)
    }

    /// Trinomial lattice for step `tau`: spacing `sqrt(3 tau)` so that the
    /// three Gauss-Hermite branches of a `tau` step land exactly on nodes.
    /// The transition is then a genuine Markov chain on the grid.
    pub fn aligned(horizon: S, tau: S, extent: S) -> Result<Self> {
        if !(tau > S::zero()) || !(extent > S::zero()) {
            return Err(Error::Domain("aligned lattice needs positive tau and extent".into()));
        }
        let h = (S::of(3.0) * tau).sqrt();
        let half_nodes = (extent * horizon.sqrt() / h).ceil().to_usize().unwrap_or(1).max(2);
        Self::build(h, 2 * half_nodes + 1, 3, Interpolation::Cubic, horizon)
    }

    fn build(
        h: S,
        points: usize,
        gh_order: usize,
        interpolation: Interpolation,
        horizon: S,
    ) -> Result<Self> {
        let gh = GaussHermite::new(gh_order)?;
        let center = points / 2;
        let x0 = -S::of_usize(center) * h;
        let x = (0..points)
            .map(|i| {
                if i == center {
                    S::zero()
                } else {
                    x0 + S::of_usize(i) * h
                }
            })
            .collect();
        Ok(Self {
            x,
            x0,
            h,
            center,
            gh_nodes: gh.nodes.iter().map(|&v| S::of(v)).collect(),
            gh_weights: gh.weights.iter().map(|&v| S::of(v)).collect(),
            interpolation,
            horizon,
        })
    }

    pub fn grid(&self) -> &[S] {
        &self.x
    }

    pub fn spacing(&self) -> S {
        self.h
    }

    pub fn gh_order(&self) -> usize {
        self.gh_nodes.len()
    }

    pub fn gh_nodes(&self) -> &[S] {
        &self.gh_nodes
    }

    pub fn gh_weights(&self) -> &[S] {
        &self.gh_weights
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    fn stencil(&self, y: S) -> Stencil<S> {
        let n = self.x.len();
        let last = self.x[n - 1];
        let y = y.max(self.x0).min(last);
        let s = (y - self.x0) / self.h;
        let nearest = s.round();
        let snap = S::of(1e-9).max(S::epsilon() * S::of(64.0));
        if (s - nearest).abs() <= snap * nearest.abs().max(S::one()) {
            let base = nearest.to_usize().unwrap_or(0).min(n - 1);
            return Stencil {
                base,
                len: 1,
                w: [S::one(), S::zero(), S::zero(), S::zero()],
            };
        }
        let cell = s.floor().to_usize().unwrap_or(0);
        match self.interpolation {
            Interpolation::Linear => {
                let i = cell.min(n - 2);
                let f = s - S::of_usize(i);
                Stencil {
                    base: i,
                    len: 2,
                    w: [S::one() - f, f, S::zero(), S::zero()],
                }
            }
            Interpolation::Cubic => {
                let i = cell.clamp(1, n - 3);
                let f = s - S::of_usize(i);
                let one = S::one();
                let two = S::of(2.0);
                let six = S::of(6.0);
                let half = S::of(0.5);
                Stencil {
                    base: i - 1,
                    len: 4,
                    w: [
                        -f * (f - one) * (f - two) / six,
                        (f + one) * (f - one) * (f - two) * half,
                        -(f + one) * f * (f - two) * half,
                        (f + one) * f * (f - one) / six,
                    ],
                }
            }
        }
    }

    fn stencils(&self, dt: S) -> Vec<Stencil<S>> {
        let sd = dt.sqrt();
        let mut out = Vec::with_capacity(self.x.len() * self.gh_nodes.len());
        for &xi in &self.x {
            for &node in &self.gh_nodes {
                out.push(self.stencil(xi + sd * node));
            }
        }
        out
    }

    /// Interpolate a field at an arbitrary coordinate (clamped at the edges).
    pub fn interpolate_row(&self, v: ArrayView2<S>, y: S, out: &mut [S]) {
        let st = self.stencil(y);
        out.iter_mut().for_each(|o| *o = S::zero());
        for q in 0..st.len {
            let row = v.row(st.base + q);
            for (o, &val) in out.iter_mut().zip(row.iter()) {
                *o = *o + st.w[q] * val;
            }
        }
    }

    fn check_level(&self, v: &ArrayView2<S>) -> Result<()> {
        if v.nrows() != self.x.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x.len(),
                found: v.nrows(),
            });
        }
        Ok(())
    }

    fn check_step(&self, s: &ArrayView2<S>) -> Result<()> {
        let expected = self.x.len() * self.gh_nodes.len();
        if s.nrows() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: s.nrows(),
            });
        }
        Ok(())
    }

    fn check_dt(dt: S) -> Result<()> {
        if !(dt > S::zero()) {
            return Err(Error::Domain(format!("step length must be positive, got {dt}")));
        }
        Ok(())
    }
}

impl<S: Real> StochasticBackend<S> for LatticeBackend<S> {
    fn name(&self) -> &'static str {
        "lattice"
    }

    fn level_points(&self) -> usize {
        self.x.len()
    }

    fn step_points(&self) -> usize {
        self.x.len() * self.gh_nodes.len()
    }

    fn step_parent(&self, step_point: usize) -> usize {
        step_point / self.gh_nodes.len()
    }

    fn coordinates(&self, _t: S) -> Result<Vec<S>> {
        Ok(self.x.clone())
    }

    fn step_coordinates(&self, _t: S, dt: S) -> Result<Vec<S>> {
        Self::check_dt(dt)?;
        let sd = dt.sqrt();
        Ok(self
            .x
            .iter()
            .flat_map(|&xi| self.gh_nodes.iter().map(move |&n| xi + sd * n))
            .collect())
    }

    fn increments(&self, _t: S, dt: S) -> Result<Vec<S>> {
        Self::check_dt(dt)?;
        let sd = dt.sqrt();
        Ok(self
            .x
            .iter()
            .flat_map(|_| self.gh_nodes.iter().map(move |&n| sd * n))
            .collect())
    }

    fn lift_next(&self, _t: S, dt: S, v: ArrayView2<S>) -> Result<Array2<S>> {
        Self::check_dt(dt)?;
        self.check_level(&v)?;
        let stencils = self.stencils(dt);
        let modes = v.ncols();
        let mut out = Array2::zeros((stencils.len(), modes));
        for (mut row, st) in out.rows_mut().into_iter().zip(&stencils) {
            for q in 0..st.len {
                let src = v.row(st.base + q);
                let w = st.w[q];
                row.iter_mut().zip(src.iter()).for_each(|(o, &s)| *o = *o + w * s);
            }
        }
        Ok(out)
    }

    fn lift_current(&self, _t: S, dt: S, v: ArrayView2<S>) -> Result<Array2<S>> {
        Self::check_dt(dt)?;
        self.check_level(&v)?;
        let k = self.gh_nodes.len();
        let mut out = Array2::zeros((self.x.len() * k, v.ncols()));
        for (p, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&v.row(p / k));
        }
        Ok(out)
    }

    fn expect(&self, _t: S, dt: S, s: ArrayView2<S>) -> Result<Array2<S>> {
        Self::check_dt(dt)?;
        self.check_step(&s)?;
        let k = self.gh_nodes.len();
        let mut out = Array2::zeros((self.x.len(), s.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for (q, &w) in self.gh_weights.iter().enumerate() {
                let src = s.row(i * k + q);
                row.iter_mut().zip(src.iter()).for_each(|(o, &v)| *o = *o + w * v);
            }
        }
        Ok(out)
    }

    fn ito(&self, _t: S, dt: S, s: ArrayView2<S>) -> Result<Array2<S>> {
        Self::check_dt(dt)?;
        self.check_step(&s)?;
        let k = self.gh_nodes.len();
        let inv_sd = S::one() / dt.sqrt();
        let mut out = Array2::zeros((self.x.len(), s.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for q in 0..k {
                let w = self.gh_weights[q] * self.gh_nodes[q] * inv_sd;
                let src = s.row(i * k + q);
                row.iter_mut().zip(src.iter()).for_each(|(o, &v)| *o = *o + w * v);
            }
        }
        Ok(out)
    }

    fn level_weights(&self, t: S) -> Result<Vec<S>> {
        if t < S::zero() {
            return Err(Error::Domain(format!("negative time {t}")));
        }
        let mut w = vec![S::zero(); self.x.len()];
        // A law narrower than the grid spacing sits on the center node.
        if t <= S::of(1e-4) * self.h * self.h {
            w[self.center] = S::one();
            return Ok(w);
        }
        let two_t = t + t;
        for (wi, &xi) in w.iter_mut().zip(&self.x) {
            *wi = (-xi * xi / two_t).exp();
        }
        let total: S = w.iter().copied().sum();
        w.iter_mut().for_each(|v| *v = *v / total);
        Ok(w)
    }

    fn step_measure(&self, _t: S, _dt: S, level: &[S]) -> Result<Vec<S>> {
        if level.len() != self.x.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x.len(),
                found: level.len(),
            });
        }
        Ok(level
            .iter()
            .flat_map(|&m| self.gh_weights.iter().map(move |&w| m * w))
            .collect())
    }

    fn initial_measure(&self) -> Vec<S> {
        let mut mu = vec![S::zero(); self.x.len()];
        mu[self.center] = S::one();
        mu
    }

    fn propagate_measure(&self, _t: S, dt: S, mu: &[S]) -> Result<Vec<S>> {
        Self::check_dt(dt)?;
        let stencils = self.stencils(dt);
        let k = self.gh_nodes.len();
        let mut next = vec![S::zero(); self.x.len()];
        for (p, st) in stencils.iter().enumerate() {
            let mass = mu[p / k] * self.gh_weights[p % k];
            if mass == S::zero() {
                continue;
            }
            for q in 0..st.len {
                next[st.base + q] = next[st.base + q] + mass * st.w[q];
            }
        }
        Ok(next)
    }

    fn project_next(
        &self,
        _t: S,
        dt: S,
        s: ArrayView2<S>,
        mu: &[S],
        mu_next: &[S],
    ) -> Result<Array2<S>> {
        Self::check_dt(dt)?;
        self.check_step(&s)?;
        let stencils = self.stencils(dt);
        let k = self.gh_nodes.len();
        let mut out = Array2::zeros((self.x.len(), s.ncols()));
        for (p, st) in stencils.iter().enumerate() {
            let mass = mu[p / k] * self.gh_weights[p % k];
            if mass == S::zero() {
                continue;
            }
            let src = s.row(p);
            for q in 0..st.len {
                let w = mass * st.w[q];
                let mut dst = out.row_mut(st.base + q);
                dst.iter_mut().zip(src.iter()).for_each(|(o, &v)| *o = *o + w * v);
            }
        }
        for (mut row, &m) in out.rows_mut().into_iter().zip(mu_next) {
            if m == S::zero() {
                row.fill(S::zero());
            } else {
                row.mapv_inplace(|v| v / m);
            }
        }
        Ok(out)
    }

    fn pair_rule(&self, t0: S, t1: S) -> Result<Vec<PairNode<S>>> {
        if t0 < S::zero() || t1 < t0 {
            return Err(Error::Domain(format!("pair rule needs 0 <= t0 <= t1, got {t0}, {t1}")));
        }
        let tiny = S::of(1e-14) * self.horizon.max(S::one());
        let outer = if t0 <= tiny { vec![(S::zero(), S::one())] } else { scaled_rule(OUTER_ORDER, t0)? };
        let inner = if t1 - t0 <= tiny { vec![(S::zero(), S::one())] } else { scaled_rule(INNER_ORDER, t1 - t0)? };
        let mut out = Vec::with_capacity(outer.len() * inner.len());
        for &(x0, w0) in &outer {
            for &(dx, w1) in &inner {
                out.push(PairNode {
                    weight: w0 * w1,
                    x0,
                    x1: x0 + dx,
                    path: 0,
                });
            }
        }
        Ok(out)
    }

    fn evaluate(&self, _t: S, values: ArrayView2<S>, x: S, _path: usize, out: &mut [S]) -> Result<()> {
        self.check_level(&values)?;
        self.interpolate_row(values, x, out);
        Ok(())
    }
}

const OUTER_ORDER: usize = 40;
const INNER_ORDER: usize = 20;

/// Gauss-Hermite nodes scaled to `N(0, var)`.
fn scaled_rule<S: Real>(order: usize, var: S) -> Result<Vec<(S, S)>> {
    let gh = GaussHermite::new(order)?;
    let sd = var.sqrt();
    Ok(gh
        .nodes
        .iter()
        .zip(&gh.weights)
        .map(|(&x, &w)| (sd * S::of(x), S::of(w)))
        .collect())
}
