//! Catalog of test problems with known solutions.
//!
//! All cases use the datum vector `v_m = m^{-3}` (in `H^1` for the
//! Dirichlet Laplacian) and `s = T - t` below.
//!
//! | id | `p_T` | driver | `p(t)` | `z(t)` |
//! |----|-------|--------|--------|--------|
//! | L0 | `v` | 0 | `e^{sA} v` | 0 |
//! | L1 | `W_T v` | 0 | `W_t e^{sA} v` | `e^{sA} v` |
//! | L2 | `sin(W_T) v` | 0 | `e^{-s/2} sin(W_t) e^{sA} v` | `e^{-s/2} cos(W_t) e^{sA} v` |
//! | G1 | `W_T v` | `t v` | L1 plus `(t (1 - e^{-ls})/l + (1 - e^{-ls}(1 + ls))/l^2) v_m` | as L1 |
//! | N1 | `sin(W_T) v` | `sin(p)/2 + cos(z)/2` | fine-grid reference | |

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::schemes::{BseeProblem, Driver, MarkovFn, SineCosineDriver, SourceDriver, TerminalFn, ZeroDriver};
use crate::spectral::{HVector, SpectralOperator, TimeGrid};
use crate::stochastic::{AdaptedField, StochasticBackend};

pub const CASE_IDS: [&str; 5] = ["L0", "L1", "L2", "G1", "N1"];

/// How errors for a case are measured.
#[derive(Clone)]
pub enum Solution<S> {
    Exact { p: MarkovFn<S>, z: MarkovFn<S> },
    /// Self-convergence against the same scheme at `multiplier` times the
    /// finest step count of the study.
    FineGrid { multiplier: usize },
}

#[derive(Clone)]
pub struct ReferenceCase<S: Real> {
    pub id: &'static str,
    pub description: &'static str,
    pub terminal: TerminalFn<S>,
    pub driver: Arc<dyn Driver<S>>,
    /// Source term when the driver does not depend on `(p, z)`.
    pub source: Option<MarkovFn<S>>,
    pub solution: Solution<S>,
    /// `E ||p_T||^2_{H^{1/2}} < infinity`.
    pub terminal_in_h_half: bool,
    pub tags: &'static [&'static str],
}

impl<S: Real> std::fmt::Debug for ReferenceCase<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReferenceCase")
            .field("id", &self.id)
            .field("description", &self.description)
            .field("tags", &self.tags)
            .finish()
    }
}

impl<S: Real> ReferenceCase<S> {
    pub fn is_exact(&self) -> bool {
        matches!(self.solution, Solution::Exact { .. })
    }

    /// Driver independent of `(p, z)`, so the closed form applies.
    pub fn is_linear(&self) -> bool {
        self.id != "N1"
    }

    pub fn problem(&self, operator: &SpectralOperator<S>, grid: TimeGrid<S>) -> BseeProblem<S> {
        BseeProblem::new(operator.clone(), grid, self.terminal.clone(), self.driver.clone())
    }
}

/// `v_m = m^{-3}`, `m = 1..=modes`.
pub fn default_vector<S: Real>(modes: usize) -> Vec<S> {
    (1..=modes).map(|m| S::one() / S::of_usize(m).powi(3)).collect()
}

/// Look up a case and bind its formulas to an operator and horizon.
pub fn get_case<S: Real>(id: &str, operator: &SpectralOperator<S>, horizon: S) -> Result<ReferenceCase<S>> {
    let v = Arc::new(default_vector::<S>(operator.modes()));
    let lambda = Arc::new(operator.eigenvalues().to_vec());
    let half = S::of(0.5);
    let decay = {
        let (v, lambda) = (v.clone(), lambda.clone());
        move |t: S, m: usize| v[m] * (-lambda[m] * (horizon - t)).exp()
    };
    let in_h_half = operator
        .norm_gamma(&HVector::new(v.to_vec())?, half)
        .map(|n| n.is_finite())
        .unwrap_or(false);

    let case = match id {
        "L0" => {
            let (vt, d) = (v.clone(), decay.clone());
            ReferenceCase {
                id: "L0",
                description: "deterministic terminal datum, heat-semigroup decay",
                terminal: Arc::new(move |_x, out: &mut [S]| out.copy_from_slice(&vt)),
                driver: Arc::new(ZeroDriver),
                source: None,
                solution: Solution::Exact {
                    p: Arc::new(move |t, _x, out: &mut [S]| {
                        out.iter_mut().enumerate().for_each(|(m, o)| *o = d(t, m))
                    }),
                    z: Arc::new(|_t, _x, out: &mut [S]| out.fill(S::zero())),
                },
                terminal_in_h_half: in_h_half,
                tags: &["deterministic", "p_T in H^1", "linear"],
            }
        }
        "L1" | "G1" => {
            let vt = v.clone();
            let (dp, dz) = (decay.clone(), decay.clone());
            let gv = v.clone();
            let lam = lambda.clone();
            let with_source = id == "G1";
            ReferenceCase {
                id: if with_source { "G1" } else { "L1" },
                description: if with_source {
                    "terminal W(T) v with deterministic source t v"
                } else {
                    "terminal W(T) v, martingale case with deterministic z"
                },
                terminal: Arc::new(move |x, out: &mut [S]| {
                    out.iter_mut().zip(vt.iter()).for_each(|(o, &c)| *o = x * c)
                }),
                driver: if with_source {
                    let g = gv.clone();
                    Arc::new(SourceDriver {
                        g: Arc::new(move |t, _x, out: &mut [S]| {
                            out.iter_mut().zip(g.iter()).for_each(|(o, &c)| *o = t * c)
                        }),
                    })
                } else {
                    Arc::new(ZeroDriver)
                },
                source: with_source.then(|| -> MarkovFn<S> {
                    let g = gv.clone();
                    Arc::new(move |t, _x, out: &mut [S]| {
                        out.iter_mut().zip(g.iter()).for_each(|(o, &c)| *o = t * c)
                    })
                }),
                solution: Solution::Exact {
                    p: Arc::new(move |t, x, out: &mut [S]| {
                        let s = horizon - t;
                        for (m, o) in out.iter_mut().enumerate() {
                            *o = x * dp(t, m);
                            if with_source {
                                let l = lam[m];
                                let e = (-l * s).exp();
                                *o = *o
                                    + gv[m] * (t * (S::one() - e) / l + (S::one() - e * (S::one() + l * s)) / (l * l));
                            }
                        }
                    }),
                    z: Arc::new(move |t, _x, out: &mut [S]| {
                        out.iter_mut().enumerate().for_each(|(m, o)| *o = dz(t, m))
                    }),
                },
                terminal_in_h_half: in_h_half,
                tags: if with_source {
                    &["p_T in L2(H^1)", "linear", "source"]
                } else {
                    &["p_T in L2(H^1)", "linear", "z deterministic"]
                },
            }
        }
        "L2" => {
            let vt = v.clone();
            let (dp, dz) = (decay.clone(), decay.clone());
            ReferenceCase {
                id: "L2",
                description: "terminal sin(W(T)) v, heat-kernel smoothing",
                terminal: Arc::new(move |x, out: &mut [S]| {
                    let s = x.sin();
                    out.iter_mut().zip(vt.iter()).for_each(|(o, &c)| *o = s * c)
                }),
                driver: Arc::new(ZeroDriver),
                source: None,
                solution: Solution::Exact {
                    p: Arc::new(move |t, x, out: &mut [S]| {
                        let a = (-(horizon - t) * half).exp() * x.sin();
                        out.iter_mut().enumerate().for_each(|(m, o)| *o = a * dp(t, m))
                    }),
                    z: Arc::new(move |t, x, out: &mut [S]| {
                        let a = (-(horizon - t) * half).exp() * x.cos();
                        out.iter_mut().enumerate().for_each(|(m, o)| *o = a * dz(t, m))
                    }),
                },
                terminal_in_h_half: in_h_half,
                tags: &["p_T in L2(H^1)", "linear", "z random"],
            }
        }
        "N1" => {
            let vt = v.clone();
            ReferenceCase {
                id: "N1",
                description: "nonlinear driver sin(p)/2 + cos(z)/2 with terminal sin(W(T)) v",
                terminal: Arc::new(move |x, out: &mut [S]| {
                    let s = x.sin();
                    out.iter_mut().zip(vt.iter()).for_each(|(o, &c)| *o = s * c)
                }),
                driver: Arc::new(SineCosineDriver {
                    a: half,
                    b: half,
                    lipschitz: S::one(),
                }),
                source: None,
                solution: Solution::FineGrid { multiplier: 4 },
                terminal_in_h_half: in_h_half,
                tags: &["p_T in L2(H^1)", "nonlinear", "C_L = 1"],
            }
        }
        other => return Err(Error::UnknownCase(other.to_string())),
    };
    Ok(case)
}

/// Exact `(p(t), z(t))` on the backend's sample points at `t`.
pub fn exact_linear_solution<S: Real, B: StochasticBackend<S> + ?Sized>(
    case: &ReferenceCase<S>,
    t: S,
    time_index: usize,
    modes: usize,
    backend: &B,
) -> Result<(AdaptedField<S>, AdaptedField<S>)> {
    let Solution::Exact { p, z } = &case.solution else {
        return Err(Error::UnknownCase(format!("{} has no closed-form solution", case.id)));
    };
    let xs = backend.coordinates(t)?;
    Ok((
        AdaptedField::from_fn(time_index, &xs, modes, |x, out| p(t, x, out)),
        AdaptedField::from_fn(time_index, &xs, modes, |x, out| z(t, x, out)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::fit_rate;
    use crate::stochastic::gauss::GaussHermite;

    fn op() -> SpectralOperator<f64> {
        SpectralOperator::laplacian_1d(4).unwrap()
    }

    #[test]
    fn unknown_case_is_an_error() {
        assert!(matches!(get_case::<f64>("X9", &op(), 1.0), Err(Error::UnknownCase(_))));
        for id in CASE_IDS {
            let c = get_case::<f64>(id, &op(), 1.0).unwrap();
            assert!(c.terminal_in_h_half);
            assert_eq!(c.is_exact(), id != "N1");
        }
    }

    #[test]
    fn terminal_matches_solution_at_t() {
        let a = op();
        for id in ["L0", "L1", "L2", "G1"] {
            let c = get_case::<f64>(id, &a, 1.0).unwrap();
            let Solution::Exact { p, .. } = &c.solution else { unreachable!() };
            let (mut u, mut w) = (vec![0.0; 4], vec![0.0; 4]);
            for x in [-1.3, 0.0, 0.7] {
                (c.terminal)(x, &mut u);
                p(1.0, x, &mut w);
                for (a, b) in u.iter().zip(&w) {
                    assert!((a - b).abs() < 1e-15, "{id}");
                }
            }
        }
    }

    /// One-step residuals of `dp = -(Ap + g) dt + z dW` decay linearly in
    /// the step, which pins down every formula in the table.
    #[test]
    fn formulas_solve_the_equation() {
        let a = op();
        let gh = GaussHermite::new(30).unwrap();
        for id in ["L0", "L1", "L2", "G1"] {
            let c = get_case::<f64>(id, &a, 1.0).unwrap();
            let Solution::Exact { p, z } = &c.solution else { unreachable!() };
            let t = 0.4;
            let mut res_p = Vec::new();
            let mut res_z = Vec::new();
            for h in [1e-3f64, 5e-4, 2.5e-4, 1.25e-4] {
                let (mut rp, mut rz) = (0.0f64, 0.0f64);
                for x in [-0.8, 0.1, 1.2] {
                    let mut now = vec![0.0; 4];
                    let mut zn = vec![0.0; 4];
                    p(t, x, &mut now);
                    z(t, x, &mut zn);
                    let mut g = vec![0.0; 4];
                    if let Some(src) = &c.source {
                        src(t, x, &mut g);
                    }
                    let (mut ep, mut ez) = (vec![0.0; 4], vec![0.0; 4]);
                    let mut buf = vec![0.0; 4];
                    for (&e, &w) in gh.nodes.iter().zip(&gh.weights) {
                        let dw = h.sqrt() * e;
                        p(t + h, x + dw, &mut buf);
                        for m in 0..4 {
                            ep[m] += w * buf[m];
                            ez[m] += w * buf[m] * dw / h;
                        }
                    }
                    for m in 0..4 {
                        let ap = -a.eigenvalues()[m] * now[m];
                        rp = rp.max(((now[m] - ep[m]) / h - (ap + g[m])).abs());
                        rz = rz.max((zn[m] - ez[m]).abs());
                    }
                }
                res_p.push((h, rp.max(1e-300)));
                res_z.push((h, rz.max(1e-300)));
            }
            for (name, res) in [("p", &res_p), ("z", &res_z)] {
                if res.iter().all(|r| r.1 < 1e-9) {
                    continue; // exactly satisfied (e.g. z = 0)
                }
                let s = fit_rate(res).unwrap().slope;
                assert!(s >= 0.9, "{id} {name} residual rate {s}: {res:?}");
            }
        }
    }
}
