//! Diagonal spectral realization of a self-adjoint, coercive generator `A`.
//!
//! Everything is expressed in the eigenbasis of `-A`, so the semigroup
//! `e^{tA}`, the implicit Euler resolvent `(I - tau A)^{-1}` and the
//! fractional norms `||(-A)^gamma v||` all act coefficientwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Coefficients of an element of `H` in the eigenbasis of `-A`.
#[derive(Debug, Clone, PartialEq)]
pub struct HVector<S> {
    coeffs: Vec<S>,
}

impl<S: Real> HVector<S> {
    pub fn new(coeffs: Vec<S>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("HVector coefficients must be finite".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn zeros(modes: usize) -> Self {
        Self {
            coeffs: vec![S::zero(); modes],
        }
    }

    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn into_inner(self) -> Vec<S> {
        self.coeffs
    }

    /// Plain `H` norm.
    pub fn norm(&self) -> S {
        self.coeffs.iter().map(|&c| c * c).sum::<S>().sqrt()
    }
}

/// Eigenvalues `0 < delta <= lambda_1 <= ... <= lambda_M` of `-A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOperator<S> {
    eigenvalues: Vec<S>,
    coercivity: S,
}

/// Operator presets addressable from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorPreset {
    /// Dirichlet Laplacian on (0, 1): `lambda_m = m^2 pi^2`.
    #[serde(rename = "laplacian_1d")]
    Laplacian1d { modes: usize },
    /// Explicit eigenvalue list.
    Eigenvalues(Vec<f64>),
}

impl Default for OperatorPreset {
    fn default() -> Self {
        OperatorPreset::Laplacian1d { modes: 16 }
    }
}

impl OperatorPreset {
    pub fn build<S: Real>(&self) -> Result<SpectralOperator<S>> {
        match self {
            OperatorPreset::Laplacian1d { modes } => SpectralOperator::laplacian_1d(*modes),
            OperatorPreset::Eigenvalues(values) => {
                SpectralOperator::new(values.iter().map(|&v| S::of(v)).collect())
            }
        }
    }
}

impl<S: Real> SpectralOperator<S> {
    /// Builds the operator with coercivity constant `delta = lambda_1`.
    pub fn new(eigenvalues: Vec<S>) -> Result<Self> {
        let first = *eigenvalues
            .first()
            .ok_or_else(|| Error::InvalidOperator("at least one mode is required".into()))?;
        Self::with_coercivity(eigenvalues, first)
    }

    pub fn with_coercivity(eigenvalues: Vec<S>, coercivity: S) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidOperator("at least one mode is required".into()));
        }
        if !(coercivity > S::zero()) || !coercivity.is_finite() {
            return Err(Error::InvalidOperator(format!(
                "coercivity constant must be positive, got {coercivity}"
            )));
        }
        for (m, &lambda) in eigenvalues.iter().enumerate() {
            if !lambda.is_finite() || lambda < coercivity {
                return Err(Error::InvalidOperator(format!(
                    "eigenvalue {m} = {lambda} is below the coercivity bound {coercivity}"
                )));
            }
            if m > 0 && lambda < eigenvalues[m - 1] {
                return Err(Error::InvalidOperator(format!(
                    "eigenvalues must be nondecreasing (index {m})"
                )));
            }
        }
        Ok(Self {
            eigenvalues,
            coercivity,
        })
    }

    /// Dirichlet Laplacian on the unit interval truncated to `modes` modes.
    pub fn laplacian_1d(modes: usize) -> Result<Self> {
        let pi2 = S::of(std::f64::consts::PI * std::f64::consts::PI);
        Self::new(
            (1..=modes)
                .map(|m| S::of_usize(m * m) * pi2)
                .collect(),
        )
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[S] {
        &self.eigenvalues
    }

    pub fn coercivity(&self) -> S {
        self.coercivity
    }

    fn check(&self, v: &HVector<S>) -> Result<()> {
        if v.len() != self.modes() {
            return Err(Error::DimensionMismatch {
                expected: self.modes(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `||(-A)^gamma v||_H` for `gamma` in `[0, 1]`.
    pub fn norm_gamma(&self, v: &HVector<S>, gamma: S) -> Result<S> {
        self.check(v)?;
        if !(gamma >= S::zero() && gamma <= S::one()) {
            return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        let two_gamma = gamma + gamma;
        Ok(self
            .eigenvalues
            .iter()
            .zip(v.coeffs())
            .map(|(&lambda, &c)| lambda.powf(two_gamma) * c * c)
            .sum::<S>()
            .sqrt())
    }

    /// Multiplier of mode `m` under `e^{tA}`.
    #[inline]
    pub fn semigroup_factor(&self, m: usize, t: S) -> S {
        (-self.eigenvalues[m] * t).exp()
    }

    /// Multiplier of mode `m` under `(I - tau A)^{-power}`.
    #[inline]
    pub fn resolvent_factor(&self, m: usize, tau: S, power: usize) -> S {
        resolvent_multiplier(self.eigenvalues[m], tau, power)
    }

    pub fn apply_semigroup(&self, t: S, v: &HVector<S>) -> Result<HVector<S>> {
        self.check(v)?;
        if !(t >= S::zero()) {
            return Err(Error::Domain(format!("semigroup time must be nonnegative, got {t}")));
        }
        let coeffs = v
            .coeffs()
            .iter()
            .enumerate()
            .map(|(m, &c)| c * self.semigroup_factor(m, t))
            .collect();
        Ok(HVector { coeffs })
    }

    pub fn resolvent_step(&self, tau: S, v: &HVector<S>) -> Result<HVector<S>> {
        self.resolvent_power(1, tau, v)
    }

    pub fn resolvent_power(&self, power: usize, tau: S, v: &HVector<S>) -> Result<HVector<S>> {
        self.check(v)?;
        if power == 0 {
            return Err(Error::Domain("resolvent power must be at least 1".into()));
        }
        if !(tau > S::zero()) {
            return Err(Error::Domain(format!("resolvent step must be positive, got {tau}")));
        }
        let mut coeffs = v.coeffs().to_vec();
        self.scale_resolvent(power, tau, &mut coeffs);
        Ok(HVector { coeffs })
    }

    /// In-place `(I - tau A)^{-power}` on a coefficient row.
    pub fn scale_resolvent(&self, power: usize, tau: S, coeffs: &mut [S]) {
        for (m, c) in coeffs.iter_mut().enumerate() {
            *c = *c * self.resolvent_factor(m, tau, power);
        }
    }

    /// In-place `e^{tA}` on a coefficient row.
    pub fn scale_semigroup(&self, t: S, coeffs: &mut [S]) {
        for (m, c) in coeffs.iter_mut().enumerate() {
            *c = *c * self.semigroup_factor(m, t);
        }
    }
}

/// `(1 + tau lambda)^{-power}`.
///
/// The single step is a plain reciprocal; powers go through `ln_1p` so large
/// `tau lambda` underflows to zero instead of overflowing the base.
#[inline]
pub fn resolvent_multiplier<S: Real>(lambda: S, tau: S, power: usize) -> S {
    let x = tau * lambda;
    if power == 1 && x <= S::of(700.0) {
        S::one() / (S::one() + x)
    } else {
        (-S::of_usize(power) * x.ln_1p()).exp()
    }
}

/// Uniform grid `t_j = j T / J`, `j = 0..=J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<S> {
    horizon: S,
    steps: usize,
}

impl<S: Real> TimeGrid<S> {
    pub fn new(horizon: S, steps: usize) -> Result<Self> {
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> S {
        self.horizon / S::of_usize(self.steps)
    }

    /// `t_j`; the last node is the horizon exactly.
    pub fn node(&self, j: usize) -> S {
        if j >= self.steps {
            self.horizon
        } else {
            S::of_usize(j) * self.tau()
        }
    }

    pub fn nodes(&self) -> Vec<S> {
        (0..=self.steps).map(|j| self.node(j)).collect()
    }

    /// Grid with every step split into `factor` equal sub-steps.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidGrid("refinement factor must be at least 1".into()));
        }
        Self::new(self.horizon, self.steps * factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn op(eigs: &[f64]) -> SpectralOperator<f64> {
        SpectralOperator::new(eigs.to_vec()).unwrap()
    }

    fn hv(c: &[f64]) -> HVector<f64> {
        HVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn norm_gamma_examples() {
        let a = op(&[1.0, 4.0]);
        let v = hv(&[3.0, 4.0]);
        assert_relative_eq!(a.norm_gamma(&v, 0.0).unwrap(), 5.0);
        assert_relative_eq!(a.norm_gamma(&hv(&[1.0, 0.0]), 0.5).unwrap(), 1.0);

        let b = op(&[PI * PI, 4.0 * PI * PI]);
        let expected = (PI.powi(4) + 16.0 * PI.powi(4)).sqrt();
        assert_relative_eq!(b.norm_gamma(&hv(&[1.0, 1.0]), 1.0).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn norm_gamma_rejects_bad_input() {
        let a = op(&[1.0, 4.0]);
        assert!(matches!(
            a.norm_gamma(&hv(&[1.0]), 0.5),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(a.norm_gamma(&hv(&[1.0, 1.0]), 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn semigroup_examples() {
        let a = op(&[1.0]);
        let v = hv(&[1.0]);
        assert_eq!(a.apply_semigroup(0.0, &v).unwrap(), v);
        assert_relative_eq!(a.apply_semigroup(2f64.ln(), &v).unwrap().coeffs()[0], 0.5, max_relative = 1e-15);
        assert!(matches!(a.apply_semigroup(-1.0, &v), Err(Error::Domain(_))));
    }

    #[test]
    fn semigroup_smoothing_bound_holds_uniformly() {
        // ||e^{tA} v||_{H^1} <= c t^{-1/2} ||v||_{H^{1/2}}; on a diagonal operator the
        // best constant is sup_x sqrt(x) e^{-x} = (2e)^{-1/2} with x = t lambda.
        let a = SpectralOperator::<f64>::laplacian_1d(32).unwrap();
        let bound = (2.0 * std::f64::consts::E).powf(-0.5);
        let mut worst: f64 = 0.0;
        for m in 0..a.modes() {
            let mut c = vec![0.0; a.modes()];
            c[m] = 1.0;
            let v = hv(&c);
            for k in 0..200 {
                let t = 1e-5 * 1.07f64.powi(k);
                let lhs = a.norm_gamma(&a.apply_semigroup(t, &v).unwrap(), 1.0).unwrap();
                let rhs = t.powf(-0.5) * a.norm_gamma(&v, 0.5).unwrap();
                worst = worst.max(lhs / rhs);
            }
        }
        assert!(worst <= bound * (1.0 + 1e-12), "{worst} > {bound}");
        assert!(worst > 0.9 * bound);
    }

    #[test]
    fn resolvent_examples() {
        let a = op(&[1.0]);
        let v = hv(&[1.0]);
        assert_relative_eq!(a.resolvent_step(1.0, &v).unwrap().coeffs()[0], 0.5);
        assert_relative_eq!(a.resolvent_power(2, 1.0, &v).unwrap().coeffs()[0], 0.25, max_relative = 1e-15);
        assert_eq!(a.resolvent_power(1, 0.3, &v).unwrap(), a.resolvent_step(0.3, &v).unwrap());
        let tiny = a.resolvent_step(1e-14, &hv(&[2.0])).unwrap();
        assert_relative_eq!(tiny.coeffs()[0], 2.0, max_relative = 1e-13);
        assert!(a.resolvent_power(0, 1.0, &v).is_err());
        assert!(a.resolvent_step(0.0, &v).is_err());
    }

    #[test]
    fn huge_resolvent_arguments_do_not_overflow() {
        let a = op(&[1e300]);
        let r = a.resolvent_power(128, 1e10, &hv(&[1.0])).unwrap();
        assert_eq!(r.coeffs()[0], 0.0);
        let s = a.resolvent_step(1e10, &hv(&[1.0])).unwrap();
        assert!(s.coeffs()[0] >= 0.0 && s.coeffs()[0] < 1e-300);
    }

    #[test]
    fn operator_validation() {
        assert!(SpectralOperator::<f64>::new(vec![]).is_err());
        assert!(SpectralOperator::<f64>::new(vec![0.0, 1.0]).is_err());
        assert!(SpectralOperator::<f64>::new(vec![2.0, 1.0]).is_err());
        assert!(SpectralOperator::<f64>::with_coercivity(vec![1.0, 2.0], 1.5).is_err());
        let lap = SpectralOperator::<f64>::laplacian_1d(3).unwrap();
        assert_relative_eq!(lap.eigenvalues()[2], 9.0 * PI * PI);
    }

    #[test]
    fn grid_nodes_hit_horizon() {
        let g = TimeGrid::new(0.7f64, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 0.7);
        assert_relative_eq!(g.tau() * 3.0, 0.7, max_relative = 1e-15);
        assert!(TimeGrid::new(0.0f64, 3).is_err());
        assert!(TimeGrid::new(1.0f64, 0).is_err());
        assert_eq!(g.refine(4).unwrap().steps(), 12);
    }

    #[test]
    fn single_precision_works() {
        let a = SpectralOperator::<f32>::laplacian_1d(4).unwrap();
        let v = HVector::new(vec![1.0f32; 4]).unwrap();
        let r = a.resolvent_power(3, 0.01, &v).unwrap();
        let composed = a
            .resolvent_step(0.01, &a.resolvent_step(0.01, &a.resolvent_step(0.01, &v).unwrap()).unwrap())
            .unwrap();
        for (x, y) in r.coeffs().iter().zip(composed.coeffs()) {
            assert!((x - y).abs() <= 1e-6 * y.abs());
        }
    }
}
