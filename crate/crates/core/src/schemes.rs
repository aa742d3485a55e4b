//! Backward Euler-type time stepping for
//! `dp = -(A p + f(t, p, z)) dt + z dW`, `p(T) = p_T`.
//!
//! All three schemes share one step: lift `P_{j+1}` into the step space, find
//! `Z_j` with `Z_j = I(P_{j+1} + int f(t, P_{j+1}, Z_j) dt)`, then
//! `P_j = (I - tau A)^{-1} E_{t_j}(P_{j+1} + int f dt)`. They differ in how `Z`
//! enters the driver:
//!
//! * scheme 1 solves the fixed point for `Z_j`;
//! * scheme 2 freezes `Z_j = I P_{j+1}`;
//! * scheme 3 keeps `Z` on `s` sub-steps of each step and conditions down the
//!   sub-levels; with `s = 1` it runs exactly the scheme-1 step.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spectral::{SpectralOperator, TimeGrid};
use crate::stochastic::gauss::GaussLegendre;
use crate::stochastic::{AdaptedField, PiecewiseProcess, StochasticBackend};

/// `H`-valued function of `(t, W(t))`, written into the output slice.
pub type MarkovFn<S> = Arc<dyn Fn(S, S, &mut [S]) + Send + Sync>;

/// Maximum number of fixed-point sweeps for `Z_j`.
pub const MAX_FIXED_POINT_ITERATIONS: usize = 50;

/// Relative stopping tolerance of the fixed point; raised to a few ulps in
/// single precision.
pub const FIXED_POINT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDependence {
    None,
    Affine,
    General,
}

/// The nonlinearity `f(t, p, z)` of the equation, evaluated at one sample
/// point whose Brownian coordinate is `x`.
pub trait Driver<S: Real>: Send + Sync {
    fn eval(&self, t: S, x: S, p: &[S], z: &[S], out: &mut [S]);

    /// Declared Lipschitz constant in `(p, z)`.
    fn lipschitz(&self) -> S;

    fn z_dependence(&self) -> ZDependence;

    /// Whether `f` reads `p` at all.
    fn depends_on_p(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "driver"
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDriver;

impl<S: Real> Driver<S> for ZeroDriver {
    fn eval(&self, _t: S, _x: S, _p: &[S], _z: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|o| *o = S::zero());
    }
    fn lipschitz(&self) -> S {
        S::zero()
    }
    fn z_dependence(&self) -> ZDependence {
        ZDependence::None
    }
    fn depends_on_p(&self) -> bool {
        false
    }
    fn name(&self) -> &str {
        "zero"
    }
}

/// Driver independent of `(p, z)`: `f = g(t, W(t))`.
#[derive(Clone)]
pub struct SourceDriver<S> {
    pub g: MarkovFn<S>,
}

impl<S> fmt::Debug for SourceDriver<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SourceDriver")
    }
}

impl<S: Real> Driver<S> for SourceDriver<S> {
    fn eval(&self, t: S, x: S, _p: &[S], _z: &[S], out: &mut [S]) {
        (self.g)(t, x, out)
    }
    fn lipschitz(&self) -> S {
        S::zero()
    }
    fn z_dependence(&self) -> ZDependence {
        ZDependence::None
    }
    fn depends_on_p(&self) -> bool {
        false
    }
    fn name(&self) -> &str {
        "source"
    }
}

/// `f(p, z) = a sin(p) + b cos(z)`, coordinatewise.
#[derive(Debug, Clone, Copy)]
pub struct SineCosineDriver<S> {
    pub a: S,
    pub b: S,
    pub lipschitz: S,
}

impl<S: Real> SineCosineDriver<S> {
    pub fn new(a: S, b: S) -> Self {
        Self {
            a,
            b,
            lipschitz: a.abs().max(b.abs()),
        }
    }
}

impl<S: Real> Driver<S> for SineCosineDriver<S> {
    fn eval(&self, _t: S, _x: S, p: &[S], z: &[S], out: &mut [S]) {
        for ((o, &p), &z) in out.iter_mut().zip(p).zip(z) {
            *o = self.a * p.sin() + self.b * z.cos();
        }
    }
    fn lipschitz(&self) -> S {
        self.lipschitz
    }
    fn z_dependence(&self) -> ZDependence {
        if self.b == S::zero() {
            ZDependence::None
        } else {
            ZDependence::General
        }
    }
    fn name(&self) -> &str {
        "sine_cosine"
    }
}

/// `f(z) = c z`.
#[derive(Debug, Clone, Copy)]
pub struct LinearZDriver<S> {
    pub c: S,
}

impl<S: Real> Driver<S> for LinearZDriver<S> {
    fn eval(&self, _t: S, _x: S, _p: &[S], z: &[S], out: &mut [S]) {
        for (o, &z) in out.iter_mut().zip(z) {
            *o = self.c * z;
        }
    }
    fn lipschitz(&self) -> S {
        self.c.abs()
    }
    fn z_dependence(&self) -> ZDependence {
        ZDependence::Affine
    }
    fn depends_on_p(&self) -> bool {
        false
    }
    fn name(&self) -> &str {
        "linear_z"
    }
}

/// Terminal datum `p_T` as a function of `W(T)`.
pub type TerminalFn<S> = Arc<dyn Fn(S, &mut [S]) + Send + Sync>;

#[derive(Clone)]
pub struct BseeProblem<S: Real> {
    pub operator: SpectralOperator<S>,
    pub grid: TimeGrid<S>,
    pub terminal: TerminalFn<S>,
    pub driver: Arc<dyn Driver<S>>,
    /// Gauss-Legendre points per step for `int f dt`.
    pub quad_order: usize,
}

impl<S: Real> fmt::Debug for BseeProblem<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BseeProblem")
            .field("modes", &self.operator.modes())
            .field("grid", &self.grid)
            .field("driver", &self.driver.name())
            .field("quad_order", &self.quad_order)
            .finish()
    }
}

impl<S: Real> BseeProblem<S> {
    pub fn new(
        operator: SpectralOperator<S>,
        grid: TimeGrid<S>,
        terminal: TerminalFn<S>,
        driver: Arc<dyn Driver<S>>,
    ) -> Self {
        Self {
            operator,
            grid,
            terminal,
            driver,
            quad_order: 2,
        }
    }

    pub fn with_quad_order(mut self, q: usize) -> Self {
        self.quad_order = q;
        self
    }

    pub fn with_grid(mut self, grid: TimeGrid<S>) -> Self {
        self.grid = grid;
        self
    }

    /// `p_T` on the backend's sample points at `T`.
    pub fn terminal_field<B: StochasticBackend<S> + ?Sized>(&self, backend: &B) -> Result<AdaptedField<S>> {
        let xs = backend.coordinates(self.grid.horizon())?;
        let terminal = &self.terminal;
        AdaptedField::new(
            self.grid.steps(),
            AdaptedField::from_fn(self.grid.steps(), &xs, self.operator.modes(), |x, out| terminal(x, out)).values,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BseeSolution<S> {
    pub p: PiecewiseProcess<S>,
    /// On the grid refined by `substeps`; its terminal field is zero.
    pub z: PiecewiseProcess<S>,
    pub substeps: usize,
    /// Fixed-point sweeps per coarse step (maximum over its sub-steps).
    pub fp_iterations: Vec<usize>,
    /// Successive-iterate gaps, one list per fine step.
    pub residuals: Vec<Vec<f64>>,
}

impl<S: Real> BseeSolution<S> {
    pub fn fp_iters_max(&self) -> usize {
        self.fp_iterations.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ZRule {
    FixedPoint,
    Frozen,
}

struct StepOutput<S> {
    z: Array2<S>,
    y: Array2<S>,
    iterations: usize,
    residuals: Vec<f64>,
}

struct Stepper<'a, S: Real, B: ?Sized> {
    problem: &'a BseeProblem<S>,
    backend: &'a B,
    quad: Vec<(S, S)>,
}

impl<'a, S: Real, B: StochasticBackend<S> + ?Sized> Stepper<'a, S, B> {
    fn new(problem: &'a BseeProblem<S>, backend: &'a B) -> Result<Self> {
        let gl = GaussLegendre::new(problem.quad_order)?;
        let quad = gl
            .nodes
            .iter()
            .zip(&gl.weights)
            .map(|(&c, &w)| (S::of(c), S::of(w)))
            .collect();
        Ok(Self {
            problem,
            backend,
            quad,
        })
    }

    /// `sum_q w_q h f(t + c_q h, p, z, x)` at every step point.
    fn integrate_driver(&self, t: S, h: S, p: &Array2<S>, z: &Array2<S>, xs: &[S]) -> Array2<S> {
        let driver = &*self.problem.driver;
        let modes = p.ncols();
        let mut out = Array2::zeros(p.raw_dim());
        let mut buf = vec![S::zero(); modes];
        for (((mut o, pr), zr), &x) in out.rows_mut().into_iter().zip(p.rows()).zip(z.rows()).zip(xs) {
            let (ps, zs) = (pr.as_slice().expect("row-major"), zr.as_slice().expect("row-major"));
            for &(c, w) in &self.quad {
                driver.eval(t + c * h, x, ps, zs, &mut buf);
                let wh = w * h;
                o.iter_mut().zip(&buf).for_each(|(a, &b)| *a = *a + wh * b);
            }
        }
        out
    }

    /// One backward step of length `h` from `t + h` to `t`. `y_next` is the
    /// lifted value being conditioned, `p_arg` the lifted `p` argument of `f`.
    fn step(
        &self,
        index: usize,
        t: S,
        h: S,
        y_next: &Array2<S>,
        p_arg: &Array2<S>,
        rule: ZRule,
    ) -> Result<StepOutput<S>> {
        let b = self.backend;
        let xs = b.step_coordinates(t, h)?;
        let driver = &*self.problem.driver;
        let mut z = b.ito(t, h, y_next.view())?;
        let mut iterations = 0;
        let mut residuals = Vec::new();
        let forcing = match (rule, driver.z_dependence()) {
            (ZRule::Frozen, _) | (ZRule::FixedPoint, ZDependence::None) => {
                let zl = b.lift_current(t, h, z.view())?;
                let f = self.integrate_driver(t, h, p_arg, &zl, &xs);
                if rule == ZRule::FixedPoint {
                    // Z = I(y + F) with F independent of Z: one sweep is exact.
                    z = b.ito(t, h, (y_next + &f).view())?;
                    iterations = 1;
                }
                f
            }
            (ZRule::FixedPoint, _) => {
                let tol = S::of(FIXED_POINT_TOL).max(S::of(16.0) * S::epsilon());
                let mut converged = false;
                while iterations < MAX_FIXED_POINT_ITERATIONS {
                    let zl = b.lift_current(t, h, z.view())?;
                    let f = self.integrate_driver(t, h, p_arg, &zl, &xs);
                    let next = b.ito(t, h, (y_next + &f).view())?;
                    let gap = sup_row_norm(&(&next - &z));
                    z = next;
                    iterations += 1;
                    residuals.push(gap.as_f64());
                    if !gap.is_finite() {
                        break;
                    }
                    if gap <= tol * (S::one() + sup_row_norm(&z)) {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::FixedPointDiverged {
                        step: index,
                        residuals,
                    });
                }
                let zl = b.lift_current(t, h, z.view())?;
                self.integrate_driver(t, h, p_arg, &zl, &xs)
            }
        };
        let y = b.expect(t, h, (y_next + &forcing).view())?;
        Ok(StepOutput {
            z,
            y,
            iterations,
            residuals,
        })
    }
}

fn sup_row_norm<S: Real>(a: &Array2<S>) -> S {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt())
        .fold(S::zero(), S::max)
}

fn apply_resolvent<S: Real>(op: &SpectralOperator<S>, tau: S, power: usize, a: &mut Array2<S>) {
    for mut row in a.rows_mut() {
        op.scale_resolvent(power, tau, row.as_slice_mut().expect("row-major"));
    }
}

fn check_step_bound<S: Real>(problem: &BseeProblem<S>) -> Result<()> {
    let tau = problem.grid.tau();
    let cl = problem.driver.lipschitz();
    if tau * cl * cl >= S::one() {
        return Err(Error::StepTooLarge {
            tau: tau.as_f64(),
            lipschitz: cl.as_f64(),
        });
    }
    Ok(())
}

fn sweep<S: Real, B: StochasticBackend<S> + ?Sized>(
    problem: &BseeProblem<S>,
    backend: &B,
    substeps: usize,
    rule: ZRule,
) -> Result<BseeSolution<S>> {
    if substeps == 0 {
        return Err(Error::Domain("scheme 3 needs at least one sub-step".into()));
    }
    let grid = problem.grid;
    let fine = grid.refine(substeps)?;
    let (tau, h) = (grid.tau(), fine.tau());
    let steps = grid.steps();
    let stepper = Stepper::new(problem, backend)?;
    let modes = problem.operator.modes();

    let terminal = problem.terminal_field(backend)?;
    let mut p_fields: Vec<Option<AdaptedField<S>>> = vec![None; steps + 1];
    let mut z_fields: Vec<Option<AdaptedField<S>>> = vec![None; steps * substeps + 1];
    z_fields[steps * substeps] = Some(AdaptedField::zeros(steps * substeps, backend.level_points(), modes));
    let mut fp_iterations = vec![0; steps];
    let mut residuals = vec![Vec::new(); steps * substeps];

    let mut p_next = terminal.values.clone();
    p_fields[steps] = Some(terminal);
    for j in (0..steps).rev() {
        // E_{t_i} P_{j+1} on the sub-levels i = 1..s (index s is P_{j+1}).
        let mut p_bar: Vec<Array2<S>> = vec![Array2::zeros((0, 0)); substeps + 1];
        p_bar[substeps] = p_next.clone();
        if problem.driver.depends_on_p() {
            for i in (1..substeps).rev() {
                let t = fine.node(j * substeps + i);
                let lifted = backend.lift_next(t, h, p_bar[i + 1].view())?;
                p_bar[i] = backend.expect(t, h, lifted.view())?;
            }
        }
        let mut y = p_next;
        for i in (0..substeps).rev() {
            let k = j * substeps + i;
            let t = fine.node(k);
            let y_lift = backend.lift_next(t, h, y.view())?;
            let p_arg = if i + 1 == substeps {
                y_lift.clone()
            } else if problem.driver.depends_on_p() {
                backend.lift_next(t, h, p_bar[i + 1].view())?
            } else {
                Array2::zeros(y_lift.raw_dim())
            };
            let out = stepper.step(k, t, h, &y_lift, &p_arg, rule)?;
            fp_iterations[j] = fp_iterations[j].max(out.iterations);
            residuals[k] = out.residuals;
            z_fields[k] = Some(AdaptedField::new(k, out.z)?);
            y = out.y;
        }
        apply_resolvent(&problem.operator, tau, 1, &mut y);
        p_fields[j] = Some(AdaptedField::new(j, y.clone())?);
        p_next = y;
    }
    let p = PiecewiseProcess::new(grid, p_fields.into_iter().map(|f| f.expect("filled")).collect())?;
    let z = PiecewiseProcess::new(fine, z_fields.into_iter().map(|f| f.expect("filled")).collect())?;
    Ok(BseeSolution {
        p,
        z,
        substeps,
        fp_iterations,
        residuals,
    })
}

/// Scheme 1: implicit in `Z_j` through a fixed point; needs `tau C_L^2 < 1`.
pub fn solve_scheme1<S: Real, B: StochasticBackend<S> + ?Sized>(
    problem: &BseeProblem<S>,
    backend: &B,
) -> Result<BseeSolution<S>> {
    check_step_bound(problem)?;
    sweep(problem, backend, 1, ZRule::FixedPoint)
}

/// Scheme 2: `Z_j = I P_{j+1}`, no step-size restriction.
pub fn solve_scheme2<S: Real, B: StochasticBackend<S> + ?Sized>(
    problem: &BseeProblem<S>,
    backend: &B,
) -> Result<BseeSolution<S>> {
    sweep(problem, backend, 1, ZRule::Frozen)
}

/// Scheme 3 with `Z` resolved on `substeps` sub-intervals per step.
///
/// The `p` argument of `f` on a sub-step is `E_{t_{i+1}} P_{j+1}`, the best
/// approximation of `P_{j+1}` known at the end of that sub-step.
pub fn solve_scheme3<S: Real, B: StochasticBackend<S> + ?Sized>(
    problem: &BseeProblem<S>,
    backend: &B,
    substeps: usize,
) -> Result<BseeSolution<S>> {
    if problem.driver.z_dependence() == ZDependence::General {
        check_step_bound(problem)?;
    }
    sweep(problem, backend, substeps, ZRule::FixedPoint)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Scheme {
    pub fn number(self) -> u8 {
        match self {
            Scheme::One => 1,
            Scheme::Two => 2,
            Scheme::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Scheme::One),
            2 => Ok(Scheme::Two),
            3 => Ok(Scheme::Three),
            _ => Err(Error::Domain(format!("unknown scheme {n}"))),
        }
    }

    /// Sub-steps actually used: only scheme 3 refines.
    pub fn effective_substeps(self, substeps: usize) -> usize {
        if self == Scheme::Three {
            substeps.max(1)
        } else {
            1
        }
    }

    pub fn solve<S: Real, B: StochasticBackend<S> + ?Sized>(
        self,
        problem: &BseeProblem<S>,
        backend: &B,
        substeps: usize,
    ) -> Result<BseeSolution<S>> {
        match self {
            Scheme::One => solve_scheme1(problem, backend),
            Scheme::Two => solve_scheme2(problem, backend),
            Scheme::Three => solve_scheme3(problem, backend, substeps),
        }
    }
}

/// Discrete mild form of the linear equation with source `g`:
/// `P_j = E_{t_j}((I - tau A)^{-(J-j)} p_T + sum_{k >= j} (I - tau A)^{-(k-j+1)} int_{t_k}^{t_{k+1}} g dt)`.
///
/// Every term is conditioned separately from its own level down to `t_j`
/// (quadratic cost in `J`), so this is independent of the backward
/// recursion. `substeps` selects the chain of sub-levels the conditional
/// expectations walk, matching [`solve_scheme3`] with the same value.
pub fn closed_form_linear<S: Real, B: StochasticBackend<S> + ?Sized>(
    terminal: &TerminalFn<S>,
    source: Option<&MarkovFn<S>>,
    operator: &SpectralOperator<S>,
    grid: &TimeGrid<S>,
    backend: &B,
    quad_order: usize,
    substeps: usize,
) -> Result<PiecewiseProcess<S>> {
    let s = substeps.max(1);
    let fine = grid.refine(s)?;
    let (tau, h) = (grid.tau(), fine.tau());
    let steps = grid.steps();
    let modes = operator.modes();
    let gl = GaussLegendre::new(quad_order)?;

    let xs_t = backend.coordinates(grid.horizon())?;
    let p_t = AdaptedField::from_fn(steps, &xs_t, modes, |x, out| terminal(x, out)).values;

    // Condition a level field from coarse level j + 1 down to j.
    let down = |j: usize, v: &Array2<S>| -> Result<Array2<S>> {
        let mut cur = v.clone();
        for i in (0..s).rev() {
            let t = fine.node(j * s + i);
            let lifted = backend.lift_next(t, h, cur.view())?;
            cur = backend.expect(t, h, lifted.view())?;
        }
        Ok(cur)
    };

    // E_{t_k} int_{t_k}^{t_{k+1}} g dt along the sub-levels.
    let source_term = |k: usize, g: &MarkovFn<S>| -> Result<Array2<S>> {
        let mut acc: Option<Array2<S>> = None;
        for i in (0..s).rev() {
            let t = fine.node(k * s + i);
            let xs = backend.step_coordinates(t, h)?;
            let mut f = Array2::zeros((xs.len(), modes));
            let mut buf = vec![S::zero(); modes];
            for (mut row, &x) in f.rows_mut().into_iter().zip(&xs) {
                for (&c, &w) in gl.nodes.iter().zip(&gl.weights) {
                    g(t + S::of(c) * h, x, &mut buf);
                    let wh = S::of(w) * h;
                    row.iter_mut().zip(&buf).for_each(|(a, &b)| *a = *a + wh * b);
                }
            }
            if let Some(prev) = acc {
                f = f + backend.lift_next(t, h, prev.view())?;
            }
            acc = Some(backend.expect(t, h, f.view())?);
        }
        Ok(acc.expect("at least one sub-step"))
    };

    let mut fields = vec![AdaptedField::zeros(0, 0, 0); steps + 1];
    fields[steps] = AdaptedField::new(steps, p_t.clone())?;
    let mut terminal_cond = p_t;
    // conditioned[k - j] holds E_{t_j} of the step-k source
    let mut conditioned: Vec<Array2<S>> = Vec::new();
    for j in (0..steps).rev() {
        terminal_cond = down(j, &terminal_cond)?;
        let mut pj = terminal_cond.clone();
        apply_resolvent(operator, tau, steps - j, &mut pj);
        if let Some(g) = source {
            for c in conditioned.iter_mut() {
                *c = down(j, c)?;
            }
            conditioned.insert(0, source_term(j, g)?);
            for (offset, c) in conditioned.iter().enumerate() {
                let mut term = c.clone();
                apply_resolvent(operator, tau, offset + 1, &mut term);
                Zip::from(&mut pj).and(&term).for_each(|a, &b| *a = *a + b);
            }
        }
        fields[j] = AdaptedField::new(j, pj)?;
    }
    PiecewiseProcess::new(*grid, fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{LatticeBackend, LatticeConfig};

    fn lattice() -> LatticeBackend<f64> {
        LatticeBackend::new(&LatticeConfig::default(), 1.0).unwrap()
    }

    fn operator() -> SpectralOperator<f64> {
        SpectralOperator::laplacian_1d(6).unwrap()
    }

    fn v(m: usize) -> f64 {
        1.0 / ((m + 1) as f64).powi(3)
    }

    fn problem(terminal: TerminalFn<f64>, driver: Arc<dyn Driver<f64>>, steps: usize) -> BseeProblem<f64> {
        BseeProblem::new(operator(), TimeGrid::new(1.0, steps).unwrap(), terminal, driver)
    }

    fn max_diff(a: &PiecewiseProcess<f64>, b: &PiecewiseProcess<f64>, rows: &[usize]) -> f64 {
        a.fields
            .iter()
            .zip(&b.fields)
            .flat_map(|(x, y)| rows.iter().flat_map(move |&i| x.values.row(i).iter().zip(y.values.row(i)).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_terminal_is_the_resolvent_chain() {
        let b = lattice();
        let pr = problem(Arc::new(|_, out: &mut [f64]| out.iter_mut().enumerate().for_each(|(m, o)| *o = v(m))), Arc::new(ZeroDriver), 8);
        let sol = solve_scheme1(&pr, &b).unwrap();
        let op = operator();
        for j in 0..=8 {
            for m in 0..6 {
                let want = v(m) * if j == 8 { 1.0 } else { op.resolvent_factor(m, 0.125, 8 - j) };
                for i in [0, 128, 256] {
                    assert!((sol.p.fields[j].values[[i, m]] - want).abs() < 1e-14);
                }
            }
        }
        assert!(sol.z.fields.iter().all(|f| f.values.iter().all(|z| z.abs() < 1e-14)));
    }

    #[test]
    fn linear_terminal_gives_resolvent_z() {
        let b = lattice();
        let pr = problem(
            Arc::new(|x, out: &mut [f64]| out.iter_mut().enumerate().for_each(|(m, o)| *o = x * v(m))),
            Arc::new(ZeroDriver),
            8,
        );
        let sol = solve_scheme1(&pr, &b).unwrap();
        let op = operator();
        for j in 0..8 {
            for m in 0..6 {
                let want = v(m) * if j == 7 { 1.0 } else { op.resolvent_factor(m, 0.125, 7 - j) };
                // edge clamping of the linear terminal leaks in at the 1e-11 level
                assert!((sol.z.fields[j].values[[128, m]] - want).abs() < 1e-10, "j {j} m {m}");
            }
        }
    }

    #[test]
    fn scheme3_with_one_substep_is_scheme1() {
        let b = lattice();
        let pr = problem(
            Arc::new(|x, out: &mut [f64]| out.iter_mut().enumerate().for_each(|(m, o)| *o = x.sin() * v(m))),
            Arc::new(SineCosineDriver::new(0.5, 0.5)),
            8,
        );
        let s1 = solve_scheme1(&pr, &b).unwrap();
        let s3 = solve_scheme3(&pr, &b, 1).unwrap();
        assert_eq!(s1.p, s3.p);
        assert_eq!(s1.z, s3.z);
    }

    #[test]
    fn fixed_point_contracts_at_the_predicted_rate() {
        let b = lattice();
        let pr = problem(
            Arc::new(|x, out: &mut [f64]| out.iter_mut().enumerate().for_each(|(m, o)| *o = x.sin() * v(m))),
            Arc::new(SineCosineDriver::new(0.5, 0.5)),
            16,
        );
        let sol = solve_scheme1(&pr, &b).unwrap();
        let bound = 0.5 * (1.0f64 / 16.0).sqrt() * 1.1;
        for r in &sol.residuals {
            for w in r.windows(2) {
                if w[0] > 1e-13 {
                    assert!(w[1] / w[0] <= bound, "ratio {} > {bound}", w[1] / w[0]);
                }
            }
        }
        assert!(sol.fp_iters_max() > 1);
    }

    #[test]
    fn step_bound_is_enforced() {
        let b = lattice();
        let pr = problem(Arc::new(|_, out: &mut [f64]| out.fill(1.0)), Arc::new(LinearZDriver { c: 3.0 }), 8);
        assert!(matches!(solve_scheme1(&pr, &b), Err(Error::StepTooLarge { .. })));
        // affine z-dependence does not restrict scheme 3 or scheme 2
        assert!(solve_scheme2(&pr, &b).is_ok());
        assert!(solve_scheme3(&pr, &b, 2).is_ok());
    }

    #[test]
    fn schemes_match_closed_form_with_source() {
        let b = lattice();
        let g: MarkovFn<f64> = Arc::new(|t, x, out: &mut [f64]| {
            out.iter_mut().enumerate().for_each(|(m, o)| *o = (t + x.cos()) * v(m))
        });
        let terminal: TerminalFn<f64> = Arc::new(|x, out: &mut [f64]| out.iter_mut().enumerate().for_each(|(m, o)| *o = x * v(m)));
        let pr = problem(terminal.clone(), Arc::new(SourceDriver { g: g.clone() }), 8);
        let rows: Vec<usize> = (0..257).collect();
        for s in [1, 2] {
            let cf = closed_form_linear(&terminal, Some(&g), &pr.operator, &pr.grid, &b, 2, s).unwrap();
            let sol = solve_scheme3(&pr, &b, s).unwrap();
            assert!(max_diff(&cf, &sol.p, &rows) < 1e-12);
        }
        let cf = closed_form_linear(&terminal, Some(&g), &pr.operator, &pr.grid, &b, 2, 1).unwrap();
        for sol in [solve_scheme1(&pr, &b).unwrap(), solve_scheme2(&pr, &b).unwrap()] {
            assert!(max_diff(&cf, &sol.p, &rows) < 1e-12);
        }
    }

    #[test]
    fn constant_source_matches_geometric_sum() {
        let b = lattice();
        let g: MarkovFn<f64> = Arc::new(|_, _, out: &mut [f64]| out.iter_mut().enumerate().for_each(|(m, o)| *o = v(m)));
        let terminal: TerminalFn<f64> = Arc::new(|_, out: &mut [f64]| out.fill(0.0));
        let op = operator();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let cf = closed_form_linear(&terminal, Some(&g), &op, &grid, &b, 2, 1).unwrap();
        let tau = grid.tau();
        for m in 0..6 {
            let r = op.resolvent_factor(m, tau, 1);
            // sum_{k=1}^{n} r^k tau v = tau v r (1 - r^n) / (1 - r)
            let n = 16;
            let want = tau * v(m) * r * (1.0 - r.powi(n)) / (1.0 - r);
            assert!((cf.fields[0].values[[128, m]] - want).abs() < 1e-14);
        }
    }
}
