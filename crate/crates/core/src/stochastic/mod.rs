//! Adapted random fields and the conditional-expectation engines behind them.
//!
//! A field at time `t` stores one row of eigen-coefficients per sample point
//! of a backend: a node of the Brownian-coordinate grid for the lattice, a
//! Monte-Carlo path for the regression backend. One time step `[t, t + dt]`
//! additionally has a *step space* whose points carry the joint value of
//! `(W(t), W(t + dt))`; fields from both ends of the step can be lifted into
//! it, multiplied by the increment, and conditioned back down to `t`.

pub mod gauss;
pub mod lattice;
pub mod regression;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spectral::TimeGrid;

pub use lattice::{Interpolation, LatticeBackend, LatticeConfig};
pub use regression::{RegressionBackend, RegressionConfig};

/// `F_{t_j}`-measurable `H`-valued random variable, `values[point][mode]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField<S> {
    pub time_index: usize,
    pub values: Array2<S>,
}

impl<S: Real> AdaptedField<S> {
    pub fn new(time_index: usize, values: Array2<S>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "field at index {time_index} has non-finite entries"
            )));
        }
        Ok(Self { time_index, values })
    }

    pub fn zeros(time_index: usize, points: usize, modes: usize) -> Self {
        Self {
            time_index,
            values: Array2::zeros((points, modes)),
        }
    }

    /// Field that takes the same `H` value at every sample point.
    pub fn constant(time_index: usize, points: usize, coeffs: &[S]) -> Self {
        let mut values = Array2::zeros((points, coeffs.len()));
        for mut row in values.rows_mut() {
            row.iter_mut().zip(coeffs).for_each(|(a, &b)| *a = b);
        }
        Self { time_index, values }
    }

    /// Field `x -> g(x)` evaluated at the backend's coordinates.
    pub fn from_fn(
        time_index: usize,
        coordinates: &[S],
        modes: usize,
        g: impl Fn(S, &mut [S]),
    ) -> Self {
        let mut values = Array2::zeros((coordinates.len(), modes));
        for (mut row, &x) in values.rows_mut().into_iter().zip(coordinates) {
            g(x, row.as_slice_mut().expect("row-major field"));
        }
        Self { time_index, values }
    }

    pub fn points(&self) -> usize {
        self.values.nrows()
    }

    pub fn modes(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_index(mut self, time_index: usize) -> Self {
        self.time_index = time_index;
        self
    }

    /// Largest pointwise `H` norm.
    pub fn sup_norm(&self) -> S {
        self.values
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt())
            .fold(S::zero(), S::max)
    }

    /// `E ||v||_H^2` under point weights.
    pub fn mean_square(&self, weights: &[S]) -> S {
        weighted_inner(self.values.view(), self.values.view(), weights)
    }
}

/// `sum_p w_p <a_p, b_p>_H`.
pub fn weighted_inner<S: Real>(a: ArrayView2<S>, b: ArrayView2<S>, weights: &[S]) -> S {
    debug_assert_eq!(a.dim(), b.dim());
    debug_assert_eq!(a.nrows(), weights.len());
    a.rows()
        .into_iter()
        .zip(b.rows())
        .zip(weights)
        .map(|((ra, rb), &w)| {
            if w == S::zero() {
                S::zero()
            } else {
                w * ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<S>()
            }
        })
        .sum()
}

/// Element of the space of processes that are constant on `[t_j, t_{j+1})`.
///
/// `fields[j]` is the value on `[t_j, t_{j+1})`; `fields[J]` is the terminal
/// value (zero for `Z`-type processes, which have none).
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseProcess<S> {
    pub grid: TimeGrid<S>,
    pub fields: Vec<AdaptedField<S>>,
}

impl<S: Real> PiecewiseProcess<S> {
    pub fn new(grid: TimeGrid<S>, fields: Vec<AdaptedField<S>>) -> Result<Self> {
        if fields.len() != grid.steps() + 1 {
            return Err(Error::DimensionMismatch {
                expected: grid.steps() + 1,
                found: fields.len(),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            if f.time_index != j {
                return Err(Error::InvalidGrid(format!(
                    "field {j} carries time index {}",
                    f.time_index
                )));
            }
        }
        Ok(Self { grid, fields })
    }

    pub fn zeros(grid: TimeGrid<S>, points: usize, modes: usize) -> Self {
        let fields = (0..=grid.steps())
            .map(|j| AdaptedField::zeros(j, points, modes))
            .collect();
        Self { grid, fields }
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn field(&self, j: usize) -> &AdaptedField<S> {
        &self.fields[j]
    }

    /// `a * self + b * other`, fieldwise.
    pub fn axpby(&self, a: S, other: &Self, b: S) -> Self {
        let fields = self
            .fields
            .iter()
            .zip(&other.fields)
            .map(|(x, y)| AdaptedField {
                time_index: x.time_index,
                values: Zip::from(&x.values)
                    .and(&y.values)
                    .map_collect(|&p, &q| a * p + b * q),
            })
            .collect();
        Self {
            grid: self.grid,
            fields,
        }
    }

    pub fn scaled(&self, a: S) -> Self {
        let fields = self
            .fields
            .iter()
            .map(|x| AdaptedField {
                time_index: x.time_index,
                values: x.values.mapv(|v| a * v),
            })
            .collect();
        Self {
            grid: self.grid,
            fields,
        }
    }

    /// `int_0^T <self, other>` with per-level point weights; the terminal
    /// field does not contribute.
    pub fn inner(&self, other: &Self, level_weights: &[Vec<S>]) -> S {
        let tau = self.grid.tau();
        (0..self.steps())
            .map(|j| {
                weighted_inner(
                    self.fields[j].values.view(),
                    other.fields[j].values.view(),
                    &level_weights[j],
                )
            })
            .sum::<S>()
            * tau
    }
}

/// Conditional-expectation engine. Times are absolute; `dt` is the length
/// of one step of whatever grid the caller is walking.
pub trait StochasticBackend<S: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of sample points of a field at a fixed time.
    fn level_points(&self) -> usize;

    /// Number of points of the step space.
    fn step_points(&self) -> usize;

    /// Index of the level point at `t` each step point descends from.
    fn step_parent(&self, step_point: usize) -> usize;

    /// `W(t)` at every level point.
    fn coordinates(&self, t: S) -> Result<Vec<S>>;

    /// `W(t + dt)` at every step point.
    fn step_coordinates(&self, t: S, dt: S) -> Result<Vec<S>>;

    /// `W(t + dt) - W(t)` at every step point.
    fn increments(&self, t: S, dt: S) -> Result<Vec<S>>;

    /// Lift a field at `t + dt` into the step space.
    fn lift_next(&self, t: S, dt: S, v: ArrayView2<S>) -> Result<Array2<S>>;

    /// Lift a field at `t` into the step space (constant in the increment).
    fn lift_current(&self, t: S, dt: S, v: ArrayView2<S>) -> Result<Array2<S>>;

    /// `E_t` of a step-space field.
    fn expect(&self, t: S, dt: S, s: ArrayView2<S>) -> Result<Array2<S>>;

    /// `(1/dt) E_t(s * (W(t + dt) - W(t)))` of a step-space field.
    fn ito(&self, t: S, dt: S, s: ArrayView2<S>) -> Result<Array2<S>>;

    /// Positive quadrature weights for the law of `W(t)` over level points.
    fn level_weights(&self, t: S) -> Result<Vec<S>>;

    /// Joint weights of the step space given level weights at `t`.
    fn step_measure(&self, t: S, dt: S, level: &[S]) -> Result<Vec<S>>;

    /// Weights of the backend's own chain at time 0.
    fn initial_measure(&self) -> Vec<S>;

    /// Push chain weights from `t` to `t + dt`.
    fn propagate_measure(&self, t: S, dt: S, mu: &[S]) -> Result<Vec<S>>;

    /// Adjoint of [`lift_next`](Self::lift_next) with respect to the chain
    /// weights: conditional expectation of a step-space field given the
    /// level point at `t + dt`.
    fn project_next(
        &self,
        t: S,
        dt: S,
        s: ArrayView2<S>,
        mu: &[S],
        mu_next: &[S],
    ) -> Result<Array2<S>>;

    /// Quadrature for the joint law of `(W(t0), W(t1))`, `t0 <= t1`, used to
    /// measure errors against functions of the Brownian coordinate.
    fn pair_rule(&self, t0: S, t1: S) -> Result<Vec<PairNode<S>>>;

    /// Value of a level field at `t` at a quadrature node: the lattice
    /// interpolates at `x`, the regression backend reads row `path`.
    fn evaluate(&self, t: S, values: ArrayView2<S>, x: S, path: usize, out: &mut [S]) -> Result<()>;
}

/// One node of a [`StochasticBackend::pair_rule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairNode<S> {
    pub weight: S,
    pub x0: S,
    pub x1: S,
    pub path: usize,
}

/// Backend selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Lattice(LatticeConfig),
    /// Trinomial lattice whose branches land exactly on grid nodes for the
    /// coarse step of the run.
    AlignedLattice {
        #[serde(default = "default_extent")]
        extent: f64,
    },
    Regression(RegressionConfig),
}

fn default_extent() -> f64 {
    6.0
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Lattice(LatticeConfig::default())
    }
}

impl BackendSpec {
    pub fn label(&self) -> &'static str {
        match self {
            BackendSpec::Lattice(_) => "lattice",
            BackendSpec::AlignedLattice { .. } => "aligned_lattice",
            BackendSpec::Regression(_) => "regression",
        }
    }

    /// Instantiate for a grid; `refinement` is the number of sub-steps per
    /// step the caller will walk (only the regression backend cares).
    pub fn build<S: Real>(
        &self,
        grid: &TimeGrid<S>,
        refinement: usize,
    ) -> Result<Box<dyn StochasticBackend<S>>> {
        Ok(match self {
            BackendSpec::Lattice(cfg) => Box::new(LatticeBackend::new(cfg, grid.horizon())?),
            BackendSpec::AlignedLattice { extent } => {
                Box::new(LatticeBackend::aligned(grid.horizon(), grid.tau(), S::of(*extent))?)
            }
            BackendSpec::Regression(cfg) => Box::new(RegressionBackend::new(
                cfg,
                grid.horizon(),
                grid.steps() * refinement.max(1),
            )?),
        })
    }
}

fn check_index<S: Real>(grid: &TimeGrid<S>, j: usize, v: &AdaptedField<S>) -> Result<()> {
    if j >= grid.steps() {
        return Err(Error::IndexOutOfRange {
            index: j,
            max: grid.steps() - 1,
        });
    }
    if v.time_index != j + 1 {
        return Err(Error::IndexOutOfRange {
            index: v.time_index,
            max: j + 1,
        });
    }
    Ok(())
}

/// `E_{t_j} v` for a field given at `t_{j+1}`.
pub fn cond_expect<S: Real, B: StochasticBackend<S> + ?Sized>(
    backend: &B,
    grid: &TimeGrid<S>,
    j: usize,
    v: &AdaptedField<S>,
) -> Result<AdaptedField<S>> {
    check_index(grid, j, v)?;
    let (t, dt) = (grid.node(j), grid.tau());
    let lifted = backend.lift_next(t, dt, v.values.view())?;
    Ok(AdaptedField {
        time_index: j,
        values: backend.expect(t, dt, lifted.view())?,
    })
}

/// `I_tau^j v = (1/tau) E_{t_j}(v dW_j)` for a field given at `t_{j+1}`.
pub fn ito_coefficient<S: Real, B: StochasticBackend<S> + ?Sized>(
    backend: &B,
    grid: &TimeGrid<S>,
    j: usize,
    v: &AdaptedField<S>,
) -> Result<AdaptedField<S>> {
    check_index(grid, j, v)?;
    let (t, dt) = (grid.node(j), grid.tau());
    let lifted = backend.lift_next(t, dt, v.values.view())?;
    Ok(AdaptedField {
        time_index: j,
        values: backend.ito(t, dt, lifted.view())?,
    })
}

/// Multiply every step point by its Brownian increment.
pub fn times_increment<S: Real>(s: &Array2<S>, increments: &[S]) -> Array2<S> {
    let mut out = s.clone();
    for (mut row, &dw) in out.axis_iter_mut(Axis(0)).zip(increments) {
        row.mapv_inplace(|v| v * dw);
    }
    out
}

/// Squared norms `(||v - dW I v||^2, ||dW I v||^2, ||v||^2)` over one step
/// under the backend's weights, for `v` given at `t_{j+1}`.
pub fn pythagoras_check<S: Real, B: StochasticBackend<S> + ?Sized>(
    backend: &B,
    grid: &TimeGrid<S>,
    j: usize,
    v: &AdaptedField<S>,
) -> Result<(S, S, S)> {
    check_index(grid, j, v)?;
    let (t, dt) = (grid.node(j), grid.tau());
    let lifted = backend.lift_next(t, dt, v.values.view())?;
    let iv = backend.ito(t, dt, lifted.view())?;
    let dw = backend.increments(t, dt)?;
    let proj = times_increment(&backend.lift_current(t, dt, iv.view())?, &dw);
    let rest = &lifted - &proj;
    let weights = backend.step_measure(t, dt, &backend.level_weights(t)?)?;
    Ok((
        weighted_inner(rest.view(), rest.view(), &weights),
        weighted_inner(proj.view(), proj.view(), &weights),
        weighted_inner(lifted.view(), lifted.view(), &weights),
    ))
}

/// Orthogonal projection onto piecewise-constant adapted processes.
///
/// `fine` lives on a refinement of `coarse` by an integer factor `s`; its
/// field `s j + i` is the value on the `i`-th sub-interval of step `j`. The
/// result on step `j` is `(1/s) sum_i E_{t_j} fine_{sj+i}`, the conditional
/// expectations being taken along the refined chain.
pub fn project_ptau<S: Real, B: StochasticBackend<S> + ?Sized>(
    backend: &B,
    coarse: &TimeGrid<S>,
    fine: &PiecewiseProcess<S>,
) -> Result<PiecewiseProcess<S>> {
    let steps = coarse.steps();
    let fine_steps = fine.steps();
    let aligned = fine_steps.is_multiple_of(steps)
        && (fine.grid.horizon() - coarse.horizon()).abs() <= S::epsilon() * S::of(16.0) * coarse.horizon();
    if !aligned {
        return Err(Error::Misaligned {
            time: fine.grid.horizon().as_f64(),
            dt: fine.grid.tau().as_f64(),
        });
    }
    let s = fine_steps / steps;
    let h = fine.grid.tau();
    let inv_s = S::one() / S::of_usize(s);
    let mut fields = Vec::with_capacity(steps + 1);
    for j in 0..steps {
        let mut acc = fine.fields[s * j].values.clone();
        for i in 1..s {
            let mut cur = fine.fields[s * j + i].values.clone();
            for back in (0..i).rev() {
                let t = fine.grid.node(s * j + back);
                let lifted = backend.lift_next(t, h, cur.view())?;
                cur = backend.expect(t, h, lifted.view())?;
            }
            acc = acc + &cur;
        }
        fields.push(AdaptedField {
            time_index: j,
            values: acc.mapv(|v| v * inv_s),
        });
    }
    fields.push(AdaptedField {
        time_index: steps,
        values: fine.fields[fine_steps].values.clone(),
    });
    PiecewiseProcess::new(*coarse, fields)
}
