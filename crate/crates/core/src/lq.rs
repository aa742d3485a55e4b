//! Stochastic linear-quadratic control:
//! minimize `1/2 E int |y - y_d|^2 + nu/2 E int |u|^2` subject to the
//! forward equation in [`crate::forward`].
//!
//! The reduced problem `(nu I + S^* S) U = S^* y_d` is solved by conjugate
//! residuals in the chain-weighted inner product of the forward model. The
//! adjoint pair `(P, Z)` is produced by the explicit backward recursion and
//! the bilinear form [`LqSolver::bilinear_s`] gives an independent route to
//! the gradient.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{CoefficientSet, ForwardModel};
use crate::rates::{fit_rate, RateFit};
use crate::reference::default_vector;
use crate::scalar::Real;
use crate::schemes::MarkovFn;
use crate::spectral::{SpectralOperator, TimeGrid};
use crate::stochastic::gauss::{GaussHermite, GaussLegendre};
use crate::stochastic::{weighted_inner, AdaptedField, BackendSpec, PiecewiseProcess, StochasticBackend};

pub const DEFAULT_CG_TOL: f64 = 1e-10;
const STAGNATION_WINDOW: usize = 20;
const STAGNATION_FACTOR: f64 = 1e-2;
const TARGET_GH_ORDER: usize = 16;

/// Named tracking targets `y_d(t, W_t)`, each a multiple of the default
/// spatial profile `d_m = m^-3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPreset {
    Zero,
    /// `sin(pi t) d`
    Deterministic,
    /// `(1 + t) cos(W_t) d`
    #[default]
    Smooth,
}

impl TargetPreset {
    pub fn function<S: Real>(self, modes: usize) -> MarkovFn<S> {
        let d: Vec<S> = default_vector(modes);
        match self {
            TargetPreset::Zero => Arc::new(|_, _, out: &mut [S]| out.fill(S::zero())),
            TargetPreset::Deterministic => Arc::new(move |t: S, _, out: &mut [S]| {
                let s = (S::of(std::f64::consts::PI) * t).sin();
                out.iter_mut().zip(&d).for_each(|(o, &dm)| *o = s * dm);
            }),
            TargetPreset::Smooth => Arc::new(move |t: S, x: S, out: &mut [S]| {
                let s = (S::one() + t) * x.cos();
                out.iter_mut().zip(&d).for_each(|(o, &dm)| *o = s * dm);
            }),
        }
    }
}

#[derive(Clone)]
pub struct LqProblem<S: Real> {
    pub nu: S,
    pub coeffs: CoefficientSet,
    pub operator: SpectralOperator<S>,
    pub grid: TimeGrid<S>,
    pub target: MarkovFn<S>,
    pub quad_order: usize,
    pub cg_tol: f64,
    pub max_iterations: usize,
}

impl<S: Real> LqProblem<S> {
    pub fn new(
        nu: S,
        coeffs: CoefficientSet,
        operator: SpectralOperator<S>,
        grid: TimeGrid<S>,
        target: MarkovFn<S>,
    ) -> Result<Self> {
        if !(nu > S::zero()) {
            return Err(Error::InvalidProblem(format!("nu must be positive, got {nu}")));
        }
        Ok(Self {
            nu,
            coeffs,
            operator,
            grid,
            target,
            quad_order: 2,
            cg_tol: DEFAULT_CG_TOL,
            max_iterations: 500,
        })
    }

    pub fn with_grid(&self, grid: TimeGrid<S>) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn with_tolerance(mut self, cg_tol: f64) -> Self {
        self.cg_tol = cg_tol;
        self
    }
}

#[derive(Debug, Clone)]
pub struct LqSolution<S> {
    pub u: PiecewiseProcess<S>,
    pub y: PiecewiseProcess<S>,
    pub p: PiecewiseProcess<S>,
    pub z: PiecewiseProcess<S>,
    pub cost: S,
    pub iterations: usize,
    /// Relative residual `|b - A U| / |b|` after every iteration.
    pub residuals: Vec<f64>,
    /// Relative gradient norm computed directly from `S^*`.
    pub gradient_residual: f64,
    /// The same quantity obtained through the bilinear form.
    pub optimality_residual: f64,
    /// `|U - u_diag| / |U|` with `u_diag = -(alpha_1 E P + alpha_3 Z) / nu`
    /// read off the adjoint pair; small but only first-order accurate.
    pub pointwise_gap: f64,
}

/// Everything that stays fixed while the control varies.
pub struct LqSolver<'a, S: Real, B: ?Sized> {
    pub problem: &'a LqProblem<S>,
    pub model: ForwardModel<'a, S, B>,
    /// Step averages of the conditioned target.
    pub target: PiecewiseProcess<S>,
}

impl<'a, S: Real, B: StochasticBackend<S> + ?Sized> LqSolver<'a, S, B> {
    pub fn new(problem: &'a LqProblem<S>, backend: &'a B) -> Result<Self> {
        let model = ForwardModel::new(
            &problem.coeffs,
            &problem.operator,
            problem.grid,
            backend,
            problem.quad_order,
        )?;
        let target = project_target(problem, backend)?;
        Ok(Self { problem, model, target })
    }

    pub fn zeros(&self) -> PiecewiseProcess<S> {
        self.model.zeros()
    }

    pub fn inner(&self, a: &PiecewiseProcess<S>, b: &PiecewiseProcess<S>) -> S {
        self.model.inner(a, b)
    }

    pub fn norm(&self, a: &PiecewiseProcess<S>) -> S {
        self.model.norm(a)
    }

    pub fn cost(&self, u: &PiecewiseProcess<S>) -> Result<S> {
        let y = self.model.solve_state(u)?;
        let g = y.axpby(S::one(), &self.target, -S::one());
        let half = S::of(0.5);
        Ok(half * self.inner(&g, &g) + half * self.problem.nu * self.inner(u, u))
    }

    /// `nu U + S^*(S U - y_d)`.
    pub fn gradient(&self, u: &PiecewiseProcess<S>) -> Result<PiecewiseProcess<S>> {
        let y = self.model.solve_state(u)?;
        let g = y.axpby(S::one(), &self.target, -S::one());
        Ok(u.axpby(self.problem.nu, &self.model.state_map_adjoint(&g)?, S::one()))
    }

    fn hessian(&self, v: &PiecewiseProcess<S>) -> Result<PiecewiseProcess<S>> {
        let sv = self.model.solve_state(v)?;
        Ok(v.axpby(self.problem.nu, &self.model.state_map_adjoint(&sv)?, S::one()))
    }

    /// Backward recursion for the adjoint pair. Returns `(P, Z, g)` with
    /// `g = S U - y_d`; `P_J = 0` and `Z` has no terminal value.
    #[allow(clippy::type_complexity)]
    pub fn solve_adjoint(
        &self,
        u: &PiecewiseProcess<S>,
    ) -> Result<(PiecewiseProcess<S>, PiecewiseProcess<S>, PiecewiseProcess<S>)> {
        let y = self.model.solve_state(u)?;
        let g = y.axpby(S::one(), &self.target, -S::one());
        let b = self.model.backend;
        let grid = self.problem.grid;
        let tau = grid.tau();
        let steps = grid.steps();
        let (n, m) = (self.model.points(), self.model.modes());
        let mut p = vec![AdaptedField::zeros(steps, n, m); steps + 1];
        let mut z = vec![AdaptedField::zeros(steps, n, m); steps + 1];
        for j in (0..steps).rev() {
            let c = self.model.steps[j];
            let t = grid.node(j);
            let lifted = b.lift_next(t, tau, p[j + 1].values.view())?;
            let e = b.expect(t, tau, lifted.view())?;
            let zj = b.ito(t, tau, lifted.view())?.mapv(|v| (S::one() + c.a0) * v);
            let mut pj = e.mapv(|v| (S::one() + c.a0) * v)
                + &g.fields[j].values.mapv(|v| tau * v)
                + &zj.mapv(|v| tau * c.b2 * v);
            for mut row in pj.rows_mut() {
                self.problem
                    .operator
                    .scale_resolvent(1, tau, row.as_slice_mut().expect("row-major"));
            }
            p[j] = AdaptedField { time_index: j, values: pj };
            z[j] = AdaptedField { time_index: j, values: zj };
        }
        Ok((PiecewiseProcess::new(grid, p)?, PiecewiseProcess::new(grid, z)?, g))
    }

    /// The bilinear form
    /// `sum_j a1 E<P_{j+1}, v_j> + tau alpha_3 E<Z_j, v_j>
    ///        - E<(a0 P_{j+1} + tau g_j + tau alpha_2 Z_j) (alpha_2 (S v)_j + alpha_3 v_j) dW_j>`,
    /// which equals `<S^* g, v>` when `(P, Z)` solve the adjoint equation for `g`.
    /// Every expectation is taken directly on the step space.
    pub fn bilinear_s(
        &self,
        p: &PiecewiseProcess<S>,
        z: &PiecewiseProcess<S>,
        g: &PiecewiseProcess<S>,
        v: &PiecewiseProcess<S>,
    ) -> Result<S> {
        let sv = self.model.solve_state(v)?;
        let b = self.model.backend;
        let grid = self.problem.grid;
        let tau = grid.tau();
        let mut total = S::zero();
        for j in 0..grid.steps() {
            let c = self.model.steps[j];
            let t = grid.node(j);
            let nu_step = b.step_measure(t, tau, self.model.measure(j))?;
            let dw = b.increments(t, tau)?;
            let pn = b.lift_next(t, tau, p.fields[j + 1].values.view())?;
            let vl = b.lift_current(t, tau, v.fields[j].values.view())?;
            let gl = b.lift_current(t, tau, g.fields[j].values.view())?;
            let zl = b.lift_current(t, tau, z.fields[j].values.view())?;
            let svl = b.lift_current(t, tau, sv.fields[j].values.view())?;
            let mut acc = S::zero();
            for (k, (&w, &d)) in nu_step.iter().zip(&dw).enumerate() {
                if w == S::zero() {
                    continue;
                }
                let mut s = S::zero();
                for mode in 0..self.model.modes() {
                    let (pv, vv, zv) = (pn[[k, mode]], vl[[k, mode]], zl[[k, mode]]);
                    let left = c.a0 * pv + tau * gl[[k, mode]] + tau * c.b2 * zv;
                    let right = c.b2 * svl[[k, mode]] + c.b3 * vv;
                    s = s + c.a1 * pv * vv + tau * c.b3 * zv * vv - left * right * d;
                }
                acc = acc + w * s;
            }
            total = total + acc;
        }
        Ok(total)
    }

    /// Conjugate residuals on `(nu I + S^* S) U = S^* y_d`, started from zero.
    pub fn solve(&self) -> Result<LqSolution<S>> {
        // below a few ulps the residual cannot decrease further
        let tol = self.problem.cg_tol.max(16.0 * S::epsilon().as_f64());
        let rhs = self.model.state_map_adjoint(&self.target)?;
        let b_norm = self.norm(&rhs).as_f64();
        let mut u = self.zeros();
        let mut residuals = Vec::new();
        let (mut rq_min, mut rq_max) = (f64::INFINITY, 0.0f64);
        let mut iterations = 0;
        if b_norm > 0.0 {
            let mut r = rhs.clone();
            let mut ar = self.hessian(&r)?;
            let mut p = r.clone();
            let mut ap = ar.clone();
            let mut r_ar = self.inner(&r, &ar);
            loop {
                let pp = self.inner(&p, &p);
                let p_ap = self.inner(&p, &ap);
                if pp > S::zero() {
                    let rq = (p_ap / pp).as_f64();
                    rq_min = rq_min.min(rq);
                    rq_max = rq_max.max(rq);
                }
                let ap_ap = self.inner(&ap, &ap);
                if !(ap_ap > S::zero()) {
                    break;
                }
                let alpha = r_ar / ap_ap;
                u = u.axpby(S::one(), &p, alpha);
                r = r.axpby(S::one(), &ap, -alpha);
                iterations += 1;
                let rel = self.norm(&r).as_f64() / b_norm;
                residuals.push(rel);
                if rel <= tol {
                    break;
                }
                // residuals[k - 1] is the residual after k iterations; it starts at 1
                let stalled = iterations >= STAGNATION_WINDOW && {
                    let before = match iterations - STAGNATION_WINDOW {
                        0 => 1.0,
                        k => residuals[k - 1],
                    };
                    rel > (1.0 - STAGNATION_FACTOR) * before
                };
                if stalled || iterations >= self.problem.max_iterations {
                    return Err(Error::Stagnation {
                        iterations,
                        residuals,
                        rayleigh_min: rq_min,
                        rayleigh_max: rq_max,
                    });
                }
                ar = self.hessian(&r)?;
                let r_ar_new = self.inner(&r, &ar);
                let beta = r_ar_new / r_ar;
                r_ar = r_ar_new;
                p = r.axpby(S::one(), &p, beta);
                ap = ar.axpby(S::one(), &ap, beta);
            }
        }
        self.finish(u, residuals, iterations, b_norm)
    }

    fn finish(
        &self,
        u: PiecewiseProcess<S>,
        residuals: Vec<f64>,
        iterations: usize,
        b_norm: f64,
    ) -> Result<LqSolution<S>> {
        let nu = self.problem.nu;
        let y = self.model.solve_state(&u)?;
        let (p, z, g) = self.solve_adjoint(&u)?;
        let direct = u.axpby(nu, &self.model.state_map_adjoint(&g)?, S::one());
        let d_norm = self.norm(&direct);
        let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
        let gradient_residual = d_norm.as_f64() / scale;
        let optimality_residual = if d_norm > S::zero() {
            let along = nu * self.inner(&u, &direct) + self.bilinear_s(&p, &z, &g, &direct)?;
            along.as_f64().abs() / d_norm.as_f64() / scale
        } else {
            0.0
        };
        let diag = self.pointwise_control(&p, &z)?;
        let gap = diag.axpby(S::one(), &u, -S::one());
        let u_norm = self.norm(&u);
        let pointwise_gap = if u_norm > S::zero() {
            (self.norm(&gap) / u_norm).as_f64()
        } else {
            self.norm(&gap).as_f64()
        };
        let cost = self.cost(&u)?;
        Ok(LqSolution {
            u,
            y,
            p,
            z,
            cost,
            iterations,
            residuals,
            gradient_residual,
            optimality_residual,
            pointwise_gap,
        })
    }

    /// `-(a1/tau E_j P_{j+1} + alpha_3 Z_j) / nu`.
    pub fn pointwise_control(&self, p: &PiecewiseProcess<S>, z: &PiecewiseProcess<S>) -> Result<PiecewiseProcess<S>> {
        let b = self.model.backend;
        let grid = self.problem.grid;
        let tau = grid.tau();
        let nu = self.problem.nu;
        let mut out = self.zeros();
        for j in 0..grid.steps() {
            let c = self.model.steps[j];
            let t = grid.node(j);
            let e = b.expect(t, tau, b.lift_next(t, tau, p.fields[j + 1].values.view())?.view())?;
            out.fields[j].values = e.mapv(|v| -c.a1 / tau / nu * v) + &z.fields[j].values.mapv(|v| -c.b3 / nu * v);
        }
        Ok(out)
    }
}

/// `y_d` averaged over each step and conditioned on `W(t_j)`.
fn project_target<S: Real, B: StochasticBackend<S> + ?Sized>(problem: &LqProblem<S>, backend: &B) -> Result<PiecewiseProcess<S>> {
    let grid = problem.grid;
    let modes = problem.operator.modes();
    let gh = GaussHermite::new(TARGET_GH_ORDER)?;
    let gl = GaussLegendre::new(problem.quad_order.max(4))?;
    let mut out = PiecewiseProcess::zeros(grid, backend.level_points(), modes);
    let mut buf = vec![S::zero(); modes];
    for j in 0..grid.steps() {
        let t = grid.node(j);
        let tau = grid.tau();
        let x = backend.coordinates(t)?;
        let values: &mut Array2<S> = &mut out.fields[j].values;
        for (q, &wq) in gl.nodes.iter().zip(&gl.weights) {
            let s = t + S::of(*q) * tau;
            let sd = (S::of(*q) * tau).sqrt();
            for (i, &xi) in x.iter().enumerate() {
                for (&eta, &we) in gh.nodes.iter().zip(&gh.weights) {
                    (problem.target)(s, xi + sd * S::of(eta), &mut buf);
                    let w = S::of(wq * we);
                    for (m, &v) in buf.iter().enumerate() {
                        values[[i, m]] = values[[i, m]] + w * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cost of a control on a fresh solver.
pub fn cost<S: Real, B: StochasticBackend<S> + ?Sized>(problem: &LqProblem<S>, backend: &B, u: &PiecewiseProcess<S>) -> Result<S> {
    LqSolver::new(problem, backend)?.cost(u)
}

#[allow(clippy::type_complexity)]
pub fn solve_adjoint<S: Real, B: StochasticBackend<S> + ?Sized>(
    problem: &LqProblem<S>,
    backend: &B,
    u: &PiecewiseProcess<S>,
) -> Result<(PiecewiseProcess<S>, PiecewiseProcess<S>)> {
    let (p, z, _) = LqSolver::new(problem, backend)?.solve_adjoint(u)?;
    Ok((p, z))
}

pub fn bilinear_s<S: Real, B: StochasticBackend<S> + ?Sized>(
    problem: &LqProblem<S>,
    backend: &B,
    p: &PiecewiseProcess<S>,
    z: &PiecewiseProcess<S>,
    g: &PiecewiseProcess<S>,
    v: &PiecewiseProcess<S>,
) -> Result<S> {
    LqSolver::new(problem, backend)?.bilinear_s(p, z, g, v)
}

pub fn solve_lq<S: Real, B: StochasticBackend<S> + ?Sized>(problem: &LqProblem<S>, backend: &B) -> Result<LqSolution<S>> {
    LqSolver::new(problem, backend)?.solve()
}

#[derive(Debug, Clone, Serialize)]
pub struct LqRateReport {
    pub steps: Vec<usize>,
    pub reference_steps: usize,
    pub taus: Vec<f64>,
    pub errors: Vec<f64>,
    pub iterations: Vec<usize>,
    pub fit: Option<RateFit>,
    pub note: Option<String>,
}

/// Error of the optimal control against a solution on `factor * max(steps)`
/// steps, in `L^2(Omega x (0,T))` under the coarse chain's law.
pub fn rate_study_lq<S: Real>(
    base: &LqProblem<S>,
    steps: &[usize],
    factor: usize,
    backend: &BackendSpec,
) -> Result<LqRateReport> {
    if steps.is_empty() {
        return Err(Error::InsufficientPoints(0));
    }
    let horizon = base.grid.horizon();
    let max = *steps.iter().max().expect("non-empty");
    let ref_steps = max * factor.max(1);
    for &j in steps {
        if j == 0 || !ref_steps.is_multiple_of(j) {
            return Err(Error::InvalidGrid(format!(
                "{j} steps do not divide the reference grid of {ref_steps}"
            )));
        }
    }
    let ref_grid = TimeGrid::new(horizon, ref_steps)?;
    let ref_problem = base.with_grid(ref_grid);
    let ref_backend = backend.build(&ref_grid, 1)?;
    let reference = solve_lq(&ref_problem, ref_backend.as_ref())?;
    // regression paths are shared between all grids
    let shared = matches!(backend, BackendSpec::Regression(_));

    let mut report = LqRateReport {
        steps: steps.to_vec(),
        reference_steps: ref_steps,
        taus: Vec::new(),
        errors: Vec::new(),
        iterations: Vec::new(),
        fit: None,
        note: None,
    };
    for &j in steps {
        let grid = TimeGrid::new(horizon, j)?;
        let problem = base.with_grid(grid);
        let own;
        let coarse_backend: &dyn StochasticBackend<S> = if shared {
            ref_backend.as_ref()
        } else {
            own = backend.build(&grid, 1)?;
            own.as_ref()
        };
        let solver = LqSolver::new(&problem, coarse_backend)?;
        let sol = solver.solve()?;
        let err = control_distance(&solver, &sol.u, &reference.u, ref_backend.as_ref())?;
        report.taus.push(grid.tau().as_f64());
        report.errors.push(err);
        report.iterations.push(sol.iterations);
    }
    if steps.len() < 2 {
        report.note = Some("insufficient points".into());
    } else {
        let pts: Vec<(f64, f64)> = report.taus.iter().copied().zip(report.errors.iter().copied()).collect();
        report.fit = Some(fit_rate(&pts)?);
    }
    Ok(report)
}

/// `(E int |U_ref - U_coarse|^2)^{1/2}`, conditioning the reference control
/// down to each coarse node along the reference chain.
pub fn control_distance<S: Real, B: StochasticBackend<S> + ?Sized>(
    coarse: &LqSolver<'_, S, B>,
    u: &PiecewiseProcess<S>,
    reference: &PiecewiseProcess<S>,
    ref_backend: &dyn StochasticBackend<S>,
) -> Result<f64> {
    let grid = coarse.problem.grid;
    let ref_grid = reference.grid;
    let ratio = ref_grid.steps() / grid.steps();
    if ratio * grid.steps() != ref_grid.steps() {
        return Err(Error::InvalidGrid("reference grid is not a refinement".into()));
    }
    let tr = ref_grid.tau();
    let modes = coarse.model.modes();
    let mut total = 0.0;
    for j in 0..grid.steps() {
        // block sums of E_{t_j} U_ref and E_{t_j} |U_ref|^2
        let n_ref = ref_backend.level_points();
        let mut first: Array2<S> = Array2::zeros((n_ref, modes));
        let mut second: Array2<S> = Array2::zeros((n_ref, 1));
        for k in (ratio * j..ratio * (j + 1)).rev() {
            let t = ref_grid.node(k);
            if k + 1 < ratio * (j + 1) {
                first = ref_backend.expect(t, tr, ref_backend.lift_next(t, tr, first.view())?.view())?;
                second = ref_backend.expect(t, tr, ref_backend.lift_next(t, tr, second.view())?.view())?;
            }
            let uk = &reference.fields[k].values;
            first = first + uk;
            for (i, row) in uk.rows().into_iter().enumerate() {
                second[[i, 0]] = second[[i, 0]] + row.iter().map(|&v| v * v).sum::<S>();
            }
        }
        let t = grid.node(j);
        let x = coarse.model.backend.coordinates(t)?;
        let mu = coarse.model.measure(j);
        let (mut m1, mut m2) = (vec![S::zero(); modes], [S::zero()]);
        let mut level = 0.0;
        for (i, (&xi, &w)) in x.iter().zip(mu).enumerate() {
            if w == S::zero() {
                continue;
            }
            ref_backend.evaluate(t, first.view(), xi, i, &mut m1)?;
            ref_backend.evaluate(t, second.view(), xi, i, &mut m2)?;
            let c = u.fields[j].values.row(i);
            let cross: S = m1.iter().zip(c.iter()).map(|(&a, &b)| a * b).sum();
            let cc: S = c.iter().map(|&b| b * b).sum();
            let e = m2[0] - S::of(2.0) * cross + S::of_usize(ratio) * cc;
            level += w.as_f64() * e.as_f64();
        }
        total += tr.as_f64() * level;
    }
    Ok(total.max(0.0).sqrt())
}

/// Chain-weighted inner product of two level fields; re-exported for tests.
pub fn level_inner<S: Real>(a: &Array2<S>, b: &Array2<S>, weights: &[S]) -> S {
    weighted_inner(a.view(), b.view(), weights)
}
