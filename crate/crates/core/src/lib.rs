//! Time discretization of backward semilinear stochastic evolution equations
//! driven by one Brownian motion, on a spectrally diagonal operator, plus a
//! stochastic linear-quadratic control solver built on the same machinery.
//!
//! Everything is generic over the scalar ([`Real`], implemented for `f32`
//! and `f64`); the aliases below fix the common `f64` instantiations.

// `!(x > 0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forward;
pub mod lq;
pub mod rates;
pub mod reference;
pub mod scalar;
pub mod schemes;
pub mod spectral;
pub mod stochastic;

pub use error::{Error, Result};
pub use forward::{solve_state, state_map_adjoint, Coefficient, CoefficientPreset, CoefficientSet, ForwardModel};
pub use lq::{bilinear_s, cost, rate_study_lq, solve_adjoint, solve_lq, LqProblem, LqRateReport, LqSolution, LqSolver, TargetPreset};
pub use rates::{err_p_inf, err_z, fit_rate, ptau_gap, ExactOracle, RateFit};
pub use reference::{exact_linear_solution, get_case, ReferenceCase, CASE_IDS};
pub use scalar::Real;
pub use schemes::{
    closed_form_linear, solve_scheme1, solve_scheme2, solve_scheme3, BseeProblem, BseeSolution, Driver, MarkovFn,
    Scheme, TerminalFn,
};
pub use spectral::{HVector, OperatorPreset, SpectralOperator, TimeGrid};
pub use stochastic::{
    AdaptedField, BackendSpec, LatticeBackend, LatticeConfig, PiecewiseProcess, RegressionBackend, RegressionConfig,
    StochasticBackend,
};

pub type Operator = SpectralOperator<f64>;
pub type Grid = TimeGrid<f64>;
pub type Field = AdaptedField<f64>;
pub type Process = PiecewiseProcess<f64>;
pub type Lattice = LatticeBackend<f64>;
pub type Regression = RegressionBackend<f64>;
pub type Problem = BseeProblem<f64>;
pub type Solution = BseeSolution<f64>;
pub type Control = LqProblem<f64>;

pub type Operator32 = SpectralOperator<f32>;
pub type Grid32 = TimeGrid<f32>;
pub type Lattice32 = LatticeBackend<f32>;
