//! Error functionals and log-log rate fits.
//!
//! Errors are measured against an *oracle*: either an exact `(t, W(t))`
//! formula or a finer piecewise-constant solution. Expectations go through
//! the backend's [`pair_rule`](StochasticBackend::pair_rule), so the same
//! code measures lattice and Monte-Carlo solutions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::schemes::MarkovFn;
use crate::spectral::TimeGrid;
use crate::stochastic::gauss::{GaussHermite, GaussLegendre};
use crate::stochastic::{PiecewiseProcess, StochasticBackend};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log err` against `log tau`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    if let Some(&(_, e)) = points.iter().find(|(_, e)| !(*e > 0.0)) {
        return Err(Error::NonPositiveError(e));
    }
    if let Some(&(t, _)) = points.iter().find(|(t, _)| !(*t > 0.0)) {
        return Err(Error::Domain(format!("step sizes must be positive, got {t}")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("rate fit needs at least two distinct step sizes".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit { slope, intercept, r2 })
}

/// Index of the first point of the longest tail over which the errors
/// decrease strictly as `tau` shrinks. Points are ordered by decreasing `tau`.
pub fn asymptotic_start(errors: &[f64]) -> usize {
    let mut start = errors.len().saturating_sub(1);
    while start > 0 && errors[start - 1] > errors[start] {
        start -= 1;
    }
    start
}

/// One node of an oracle's time rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeNode<S> {
    pub s: S,
    pub weight: S,
    /// Time whose Brownian value the oracle depends on at `s`.
    pub measurable_at: S,
}

/// Something a computed process is compared against.
pub trait ProcessOracle<S: Real>: Sync {
    fn modes(&self) -> usize;

    /// Quadrature for `int_a^b ... ds` suited to the oracle's time regularity.
    fn time_rule(&self, a: S, b: S) -> Vec<TimeNode<S>>;

    /// Value at time `s` given `W(measurable_at) = x` (or the sample `path`).
    fn eval(&self, node: &TimeNode<S>, x: S, path: usize, out: &mut [S]) -> Result<()>;
}

/// Exact `(t, W(t))` formula.
pub struct ExactOracle<S> {
    pub f: MarkovFn<S>,
    pub modes: usize,
    /// Largest rate of change in time (e.g. the largest eigenvalue); sets
    /// the number of composite Gauss panels.
    pub stiffness: f64,
}

impl<S: Real> ExactOracle<S> {
    pub fn new(f: MarkovFn<S>, modes: usize, stiffness: f64) -> Self {
        Self { f, modes, stiffness }
    }
}

const PANEL_ORDER: usize = 4;
const MAX_PANELS: usize = 16;

fn composite_rule<S: Real>(a: S, b: S, stiffness: f64) -> Vec<(S, S)> {
    let len = (b - a).as_f64();
    // 4-point Gauss on e^{-8x} over a panel is accurate to about 1e-5
    let panels = ((stiffness * len / 8.0).ceil() as usize).clamp(1, MAX_PANELS);
    let gl = GaussLegendre::new(PANEL_ORDER).expect("fixed order");
    let width = (b - a) / S::of_usize(panels);
    let mut out = Vec::with_capacity(panels * PANEL_ORDER);
    for k in 0..panels {
        let left = a + S::of_usize(k) * width;
        for (&c, &w) in gl.nodes.iter().zip(&gl.weights) {
            out.push((left + S::of(c) * width, S::of(w) * width));
        }
    }
    out
}

impl<S: Real> ProcessOracle<S> for ExactOracle<S> {
    fn modes(&self) -> usize {
        self.modes
    }

    fn time_rule(&self, a: S, b: S) -> Vec<TimeNode<S>> {
        composite_rule(a, b, self.stiffness)
            .into_iter()
            .map(|(s, weight)| TimeNode {
                s,
                weight,
                measurable_at: s,
            })
            .collect()
    }

    fn eval(&self, node: &TimeNode<S>, x: S, _path: usize, out: &mut [S]) -> Result<()> {
        (self.f)(node.s, x, out);
        Ok(())
    }
}

/// A computed piecewise-constant process on its own backend, typically a
/// fine-grid reference.
pub struct PiecewiseOracle<'a, S: Real> {
    pub backend: &'a dyn StochasticBackend<S>,
    pub process: &'a PiecewiseProcess<S>,
}

impl<S: Real> PiecewiseOracle<'_, S> {
    fn index_of(&self, t: S) -> usize {
        let k = (t / self.process.grid.tau()).round().to_usize().unwrap_or(0);
        k.min(self.process.steps())
    }
}

impl<S: Real> ProcessOracle<S> for PiecewiseOracle<'_, S> {
    fn modes(&self) -> usize {
        self.process.fields[0].modes()
    }

    fn time_rule(&self, a: S, b: S) -> Vec<TimeNode<S>> {
        let grid = self.process.grid;
        let (k0, k1) = (self.index_of(a), self.index_of(b));
        (k0..k1)
            .map(|k| {
                let (l, r) = (grid.node(k), grid.node(k + 1));
                TimeNode {
                    s: (l + r) / S::of(2.0),
                    weight: r - l,
                    measurable_at: l,
                }
            })
            .collect()
    }

    fn eval(&self, node: &TimeNode<S>, x: S, path: usize, out: &mut [S]) -> Result<()> {
        let k = self.index_of(node.measurable_at);
        self.backend
            .evaluate(node.measurable_at, self.process.fields[k].values.view(), x, path, out)
    }
}

fn sq_dist<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `max_{0 <= j < J} ||p(t_j) - P_j||_{L^2(Omega; H)}`.
pub fn err_p_inf<S: Real, B: StochasticBackend<S> + ?Sized>(
    backend: &B,
    p: &PiecewiseProcess<S>,
    oracle: &dyn ProcessOracle<S>,
) -> Result<S> {
    let modes = oracle.modes();
    let (mut a, mut b) = (vec![S::zero(); modes], vec![S::zero(); modes]);
    let mut worst = S::zero();
    for j in 0..p.steps() {
        let t = p.grid.node(j);
        let node = TimeNode {
            s: t,
            weight: S::one(),
            measurable_at: t,
        };
        let mut acc = S::zero();
        for q in backend.pair_rule(t, t)? {
            oracle.eval(&node, q.x1, q.path, &mut a)?;
            backend.evaluate(t, p.fields[j].values.view(), q.x0, q.path, &mut b)?;
            acc = acc + q.weight * sq_dist(&a, &b);
        }
        worst = worst.max(acc.sqrt());
    }
    Ok(worst)
}

/// `||z - Z||_{L^2(0, T; L^2(Omega; H))}` with `Z` constant on the steps of
/// its own grid.
pub fn err_z<S: Real, B: StochasticBackend<S> + ?Sized>(
    backend: &B,
    z: &PiecewiseProcess<S>,
    oracle: &dyn ProcessOracle<S>,
) -> Result<S> {
    let modes = oracle.modes();
    let (mut a, mut b) = (vec![S::zero(); modes], vec![S::zero(); modes]);
    let mut total = S::zero();
    for j in 0..z.steps() {
        let (t0, t1) = (z.grid.node(j), z.grid.node(j + 1));
        for node in oracle.time_rule(t0, t1) {
            let mut acc = S::zero();
            for q in backend.pair_rule(t0, node.measurable_at)? {
                oracle.eval(&node, q.x1, q.path, &mut a)?;
                backend.evaluate(t0, z.fields[j].values.view(), q.x0, q.path, &mut b)?;
                acc = acc + q.weight * sq_dist(&a, &b);
            }
            total = total + node.weight * acc;
        }
    }
    Ok(total.sqrt())
}

const GAP_OUTER: usize = 40;
const GAP_INNER: usize = 20;

/// `||(I - P_tau) z||_{L^2}` for an exact `z`, computed by Gaussian
/// quadrature independent of any backend.
pub fn ptau_gap<S: Real>(grid: &TimeGrid<S>, z: &ExactOracle<S>) -> Result<S> {
    let outer = GaussHermite::new(GAP_OUTER)?;
    let inner = GaussHermite::new(GAP_INNER)?;
    let modes = z.modes;
    let mut buf = vec![S::zero(); modes];
    let mut total = S::zero();
    let tau = grid.tau();
    for j in 0..grid.steps() {
        let (t0, t1) = (grid.node(j), grid.node(j + 1));
        let times = z.time_rule(t0, t1);
        let xs: Vec<(S, S)> = if j == 0 {
            vec![(S::zero(), S::one())]
        } else {
            let sd = t0.sqrt();
            outer.nodes.iter().zip(&outer.weights).map(|(&x, &w)| (sd * S::of(x), S::of(w))).collect()
        };
        for &(x, wx) in &xs {
            // conditional values z(s, x + sqrt(s - t0) eta) and their mean
            let mut samples: Vec<(S, Vec<S>)> = Vec::with_capacity(times.len() * GAP_INNER);
            let mut mean = vec![S::zero(); modes];
            for node in &times {
                let sd = (node.s - t0).sqrt();
                for (&e, &we) in inner.nodes.iter().zip(&inner.weights) {
                    (z.f)(node.s, x + sd * S::of(e), &mut buf);
                    let w = node.weight * S::of(we);
                    mean.iter_mut().zip(&buf).for_each(|(m, &v)| *m = *m + w * v / tau);
                    samples.push((w, buf.clone()));
                }
            }
            let acc: S = samples.iter().map(|(w, v)| *w * sq_dist(v, &mean)).sum();
            total = total + wx * acc;
        }
    }
    Ok(total.sqrt())
}
