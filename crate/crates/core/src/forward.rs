//! Controlled forward state
//! `dy = (A y + alpha_0 y + alpha_1 u) dt + (alpha_2 y + alpha_3 u) dW`, `y(0) = 0`,
//! discretized by implicit Euler, and the transpose of the control-to-state
//! map.
//!
//! On a lattice the state after one step is a function of the step-space
//! point, not of `W(t_{j+1})` alone. It is brought back to the level by
//! [`StochasticBackend::project_next`], i.e. conditioned on the new Brownian
//! coordinate under the backend's own chain. That keeps the state Markov
//! and the projection is exactly the transpose of lifting, so the map and
//! its adjoint below are exact transposes of each other.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spectral::{SpectralOperator, TimeGrid};
use crate::stochastic::gauss::GaussLegendre;
use crate::stochastic::{weighted_inner, AdaptedField, PiecewiseProcess, StochasticBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientPreset {
    /// `cos(t)`
    Cos,
    /// `sin(t)`
    Sin,
    /// `t`
    Ramp,
}

/// A deterministic coefficient `alpha_i(t)`: a constant or a named preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Preset(CoefficientPreset),
}

impl Default for Coefficient {
    fn default() -> Self {
        Coefficient::Constant(0.0)
    }
}

impl Coefficient {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Coefficient::Constant(c) => c,
            Coefficient::Preset(CoefficientPreset::Cos) => t.cos(),
            Coefficient::Preset(CoefficientPreset::Sin) => t.sin(),
            Coefficient::Preset(CoefficientPreset::Ramp) => t,
        }
    }

    /// `sup_{0 <= t <= T} |alpha(t)|`.
    pub fn sup(&self, horizon: f64) -> f64 {
        match *self {
            Coefficient::Constant(c) => c.abs(),
            Coefficient::Preset(CoefficientPreset::Cos) => 1.0,
            Coefficient::Preset(CoefficientPreset::Sin) => {
                if horizon >= std::f64::consts::FRAC_PI_2 {
                    1.0
                } else {
                    horizon.sin()
                }
            }
            Coefficient::Preset(CoefficientPreset::Ramp) => horizon.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Coefficient::Constant(c) if *c == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CoefficientSet {
    pub alpha0: Coefficient,
    pub alpha1: Coefficient,
    pub alpha2: Coefficient,
    pub alpha3: Coefficient,
}

impl CoefficientSet {
    pub fn constant(a0: f64, a1: f64, a2: f64, a3: f64) -> Self {
        Self {
            alpha0: Coefficient::Constant(a0),
            alpha1: Coefficient::Constant(a1),
            alpha2: Coefficient::Constant(a2),
            alpha3: Coefficient::Constant(a3),
        }
    }

    /// Rejects `tau sup|alpha_2|^2 >= 1`.
    pub fn check_step(&self, tau: f64, horizon: f64) -> Result<()> {
        let sup = self.alpha2.sup(horizon);
        if !(tau * sup * sup < 1.0) {
            return Err(Error::DiffusionBound { tau, alpha2_sup: sup });
        }
        Ok(())
    }
}

/// Per-step coefficients: `int alpha_0`, `int alpha_1` over the step and the
/// left-endpoint values of `alpha_2`, `alpha_3` used with the increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients<S> {
    pub a0: S,
    pub a1: S,
    pub b2: S,
    pub b3: S,
}

/// The discrete control-to-state map `S_tau` on a fixed grid and backend,
/// together with the chain weights that define its inner product.
pub struct ForwardModel<'a, S: Real, B: ?Sized> {
    pub operator: &'a SpectralOperator<S>,
    pub grid: TimeGrid<S>,
    pub backend: &'a B,
    pub steps: Vec<StepCoefficients<S>>,
    /// Chain weights `mu_j` at every level.
    pub measures: Vec<Vec<S>>,
}

impl<'a, S: Real, B: StochasticBackend<S> + ?Sized> ForwardModel<'a, S, B> {
    pub fn new(
        coeffs: &CoefficientSet,
        operator: &'a SpectralOperator<S>,
        grid: TimeGrid<S>,
        backend: &'a B,
        quad_order: usize,
    ) -> Result<Self> {
        let tau = grid.tau();
        coeffs.check_step(tau.as_f64(), grid.horizon().as_f64())?;
        let gl = GaussLegendre::new(quad_order)?;
        let steps = (0..grid.steps())
            .map(|j| {
                let (a, b) = (grid.node(j).as_f64(), grid.node(j + 1).as_f64());
                StepCoefficients {
                    a0: S::of(gl.integrate(a, b, |t| coeffs.alpha0.eval(t))),
                    a1: S::of(gl.integrate(a, b, |t| coeffs.alpha1.eval(t))),
                    b2: S::of(coeffs.alpha2.eval(a)),
                    b3: S::of(coeffs.alpha3.eval(a)),
                }
            })
            .collect();
        let mut measures = Vec::with_capacity(grid.steps() + 1);
        measures.push(backend.initial_measure());
        for j in 0..grid.steps() {
            let next = backend.propagate_measure(grid.node(j), tau, &measures[j])?;
            measures.push(next);
        }
        Ok(Self {
            operator,
            grid,
            backend,
            steps,
            measures,
        })
    }

    pub fn points(&self) -> usize {
        self.backend.level_points()
    }

    pub fn modes(&self) -> usize {
        self.operator.modes()
    }

    pub fn zeros(&self) -> PiecewiseProcess<S> {
        PiecewiseProcess::zeros(self.grid, self.points(), self.modes())
    }

    /// `tau sum_{j<J} E_mu <a_j, b_j>`.
    pub fn inner(&self, a: &PiecewiseProcess<S>, b: &PiecewiseProcess<S>) -> S {
        a.inner(b, &self.measures)
    }

    pub fn norm(&self, a: &PiecewiseProcess<S>) -> S {
        self.inner(a, a).max(S::zero()).sqrt()
    }

    fn check_shape(&self, u: &PiecewiseProcess<S>) -> Result<()> {
        if u.steps() != self.grid.steps() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.steps(),
                found: u.steps(),
            });
        }
        let f = &u.fields[0];
        if f.points() != self.points() || f.modes() != self.modes() {
            return Err(Error::DimensionMismatch {
                expected: self.points() * self.modes(),
                found: f.points() * f.modes(),
            });
        }
        Ok(())
    }

    fn resolve(&self, a: &mut Array2<S>) {
        let tau = self.grid.tau();
        for mut row in a.rows_mut() {
            self.operator.scale_resolvent(1, tau, row.as_slice_mut().expect("row-major"));
        }
    }

    /// `Y = S_tau U`.
    pub fn solve_state(&self, u: &PiecewiseProcess<S>) -> Result<PiecewiseProcess<S>> {
        self.check_shape(u)?;
        let b = self.backend;
        let tau = self.grid.tau();
        let mut fields = Vec::with_capacity(self.grid.steps() + 1);
        let mut y = Array2::zeros((self.points(), self.modes()));
        fields.push(AdaptedField { time_index: 0, values: y.clone() });
        for (j, c) in self.steps.iter().enumerate() {
            let t = self.grid.node(j);
            let uj = &u.fields[j].values;
            let drift = y.mapv(|v| (S::one() + c.a0) * v) + &uj.mapv(|v| c.a1 * v);
            let diffusion = y.mapv(|v| c.b2 * v) + &uj.mapv(|v| c.b3 * v);
            let mut step = b.lift_current(t, tau, drift.view())?;
            let noise = b.lift_current(t, tau, diffusion.view())?;
            let dw = b.increments(t, tau)?;
            for ((mut row, nrow), &d) in step.rows_mut().into_iter().zip(noise.rows()).zip(&dw) {
                row.iter_mut().zip(nrow.iter()).for_each(|(a, &n)| *a = *a + d * n);
            }
            self.resolve(&mut step);
            y = b.project_next(t, tau, step.view(), &self.measures[j], &self.measures[j + 1])?;
            fields.push(AdaptedField {
                time_index: j + 1,
                values: y.clone(),
            });
        }
        PiecewiseProcess::new(self.grid, fields)
    }

    /// `S_tau^* R`, the transpose of [`solve_state`](Self::solve_state) under
    /// [`inner`](Self::inner). The terminal field of the result is zero.
    pub fn state_map_adjoint(&self, r: &PiecewiseProcess<S>) -> Result<PiecewiseProcess<S>> {
        self.check_shape(r)?;
        let b = self.backend;
        let tau = self.grid.tau();
        let steps = self.grid.steps();
        let mut out = vec![AdaptedField::zeros(steps, self.points(), self.modes()); steps + 1];
        let mut lambda: Array2<S> = Array2::zeros((self.points(), self.modes()));
        for j in (0..steps).rev() {
            let c = self.steps[j];
            let t = self.grid.node(j);
            let mut next = lambda.clone();
            self.resolve(&mut next);
            let lifted = b.lift_next(t, tau, next.view())?;
            let e = b.expect(t, tau, lifted.view())?;
            let i = b.ito(t, tau, lifted.view())?;
            out[j] = AdaptedField {
                time_index: j,
                values: e.mapv(|v| c.a1 / tau * v) + &i.mapv(|v| c.b3 * v),
            };
            lambda = r.fields[j].values.mapv(|v| tau * v) + &e.mapv(|v| (S::one() + c.a0) * v) + &i.mapv(|v| c.b2 * tau * v);
        }
        PiecewiseProcess::new(self.grid, out)
    }

    /// Level weights used by [`inner`](Self::inner) at `t_j`.
    pub fn measure(&self, j: usize) -> &[S] {
        &self.measures[j]
    }

    pub fn level_inner(&self, j: usize, a: &Array2<S>, b: &Array2<S>) -> S {
        weighted_inner(a.view(), b.view(), &self.measures[j])
    }
}

/// `Y = S_tau U` on a fresh model.
pub fn solve_state<S: Real, B: StochasticBackend<S> + ?Sized>(
    u: &PiecewiseProcess<S>,
    coeffs: &CoefficientSet,
    operator: &SpectralOperator<S>,
    grid: TimeGrid<S>,
    backend: &B,
) -> Result<PiecewiseProcess<S>> {
    ForwardModel::new(coeffs, operator, grid, backend, 2)?.solve_state(u)
}

/// `S_tau^* R` on a fresh model.
pub fn state_map_adjoint<S: Real, B: StochasticBackend<S> + ?Sized>(
    r: &PiecewiseProcess<S>,
    coeffs: &CoefficientSet,
    operator: &SpectralOperator<S>,
    grid: TimeGrid<S>,
    backend: &B,
) -> Result<PiecewiseProcess<S>> {
    ForwardModel::new(coeffs, operator, grid, backend, 2)?.state_map_adjoint(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::LatticeBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_process(model: &ForwardModel<f64, LatticeBackend<f64>>, rng: &mut ChaCha8Rng) -> PiecewiseProcess<f64> {
        let mut p = model.zeros();
        for f in p.fields.iter_mut().take(model.grid.steps()) {
            f.values.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        p
    }

    fn setup(steps: usize, coeffs: CoefficientSet) -> (SpectralOperator<f64>, TimeGrid<f64>, LatticeBackend<f64>, CoefficientSet) {
        let op = SpectralOperator::laplacian_1d(4).unwrap();
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let b = LatticeBackend::aligned(1.0, grid.tau(), 5.0).unwrap();
        (op, grid, b, coeffs)
    }

    #[test]
    fn zero_control_gives_zero_state() {
        let (op, grid, b, c) = setup(8, CoefficientSet::constant(0.2, 1.0, 0.5, 0.3));
        let m = ForwardModel::new(&c, &op, grid, &b, 2).unwrap();
        let y = m.solve_state(&m.zeros()).unwrap();
        assert!(y.fields.iter().all(|f| f.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adjoint_is_the_transpose() {
        let (op, grid, b, c) = setup(12, CoefficientSet::constant(0.2, 1.0, 0.5, 0.3));
        let m = ForwardModel::new(&c, &op, grid, &b, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let u = random_process(&m, &mut rng);
            let r = random_process(&m, &mut rng);
            let lhs = m.inner(&m.solve_state(&u).unwrap(), &r);
            let rhs = m.inner(&u, &m.state_map_adjoint(&r).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn linearity() {
        let (op, grid, b, c) = setup(8, CoefficientSet::constant(0.1, 1.0, 0.4, 0.2));
        let m = ForwardModel::new(&c, &op, grid, &b, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (u, v) = (random_process(&m, &mut rng), random_process(&m, &mut rng));
        let lhs = m.solve_state(&u.axpby(2.0, &v, -3.0)).unwrap();
        let rhs = m.solve_state(&u).unwrap().axpby(2.0, &m.solve_state(&v).unwrap(), -3.0);
        let diff = lhs.axpby(1.0, &rhs, -1.0);
        assert!(m.norm(&diff) < 1e-12);
    }

    #[test]
    fn pure_integrator_in_the_weak_operator_limit() {
        // tiny eigenvalue, alpha = (0, 1, 0, 0): Y_{j+1} ~ sum tau U_k
        let op = SpectralOperator::with_coercivity(vec![1e-6], 1e-6).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let b = LatticeBackend::aligned(1.0, grid.tau(), 5.0).unwrap();
        let c = CoefficientSet::constant(0.0, 1.0, 0.0, 0.0);
        let m = ForwardModel::new(&c, &op, grid, &b, 2).unwrap();
        let mut u = m.zeros();
        for (j, f) in u.fields.iter_mut().enumerate().take(10) {
            f.values.fill(j as f64);
        }
        let y = m.solve_state(&u).unwrap();
        let centre = b.grid().len() / 2;
        let mut sum = 0.0;
        for j in 0..10 {
            sum += 0.1 * j as f64;
            assert!((y.fields[j + 1].values[[centre, 0]] - sum).abs() < 1e-5 * (1.0 + sum));
        }
    }

    #[test]
    fn diffusion_bound_is_enforced() {
        let (op, grid, b, _) = setup(4, CoefficientSet::default());
        let c = CoefficientSet::constant(0.0, 1.0, 2.0, 0.0); // tau * 4 = 1
        assert!(matches!(ForwardModel::new(&c, &op, grid, &b, 2), Err(Error::DiffusionBound { .. })));
        let z = PiecewiseProcess::zeros(grid, b.grid().len(), 4);
        assert!(matches!(solve_state(&z, &c, &op, grid, &b), Err(Error::DiffusionBound { .. })));
        assert!(matches!(state_map_adjoint(&z, &c, &op, grid, &b), Err(Error::DiffusionBound { .. })));
    }

    #[test]
    fn presets_parse_and_bound() {
        let c: CoefficientSet = serde_json::from_str(r#"{"alpha0": "cos", "alpha2": 0.5}"#).unwrap();
        assert_eq!(c.alpha0, Coefficient::Preset(CoefficientPreset::Cos));
        assert_eq!(c.alpha2.sup(1.0), 0.5);
        assert!(c.alpha1.is_zero());
        assert!((Coefficient::Preset(CoefficientPreset::Sin).sup(1.0) - 1f64.sin()).abs() < 1e-15);
    }
}
