//! One refinement series: a case solved by one scheme on one backend over a
//! list of step counts, with errors measured against the exact solution or
//! a fine-grid reference.

use std::time::Instant;

use bsee_core::rates::{asymptotic_start, PiecewiseOracle, ProcessOracle};
use bsee_core::reference::Solution as CaseSolution;
use bsee_core::{
    err_p_inf, err_z, fit_rate, get_case, ptau_gap, BackendSpec, BseeSolution, ExactOracle, RateFit, Scheme,
    SpectralOperator, StochasticBackend, TimeGrid,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Metric;
use crate::error::HarnessError;

/// One CSV row; the field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub case: String,
    pub scheme: u8,
    pub backend: String,
    #[serde(rename = "J")]
    pub steps: usize,
    pub tau: f64,
    #[serde(rename = "errP_inf")]
    pub err_p: f64,
    #[serde(rename = "errZ")]
    pub err_z: f64,
    pub fp_iters_max: usize,
    pub wall_ms: f64,
}

impl Row {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Combined => self.err_p + self.err_z,
            Metric::P => self.err_p,
            Metric::Z => self.err_z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Series {
    pub rows: Vec<Row>,
    /// `||(I - P_tau) z||` per step count, for cases with an exact `z`.
    pub gaps: Option<Vec<f64>>,
}

pub struct SeriesSpec<'a> {
    pub case: &'a str,
    pub scheme: Scheme,
    pub backend: &'a BackendSpec,
    pub operator: &'a SpectralOperator<f64>,
    pub horizon: f64,
    pub steps: &'a [usize],
    pub substeps: usize,
    pub quad_order: usize,
    pub reference_multiplier: usize,
    pub record_wall_time: bool,
}

impl SeriesSpec<'_> {
    fn cell_error(&self, steps: usize, source: bsee_core::Error) -> HarnessError {
        HarnessError::Cell {
            case: self.case.to_string(),
            scheme: self.scheme.number(),
            backend: self.backend.label().to_string(),
            steps,
            source,
        }
    }
}

type Backend = Box<dyn StochasticBackend<f64>>;

/// Backends that depend on the grid are built per step count; the others
/// are shared so every step count sees the same nodes or the same paths.
enum Backends {
    Shared(Backend),
    PerGrid,
}

fn solve(
    spec: &SeriesSpec,
    case: &bsee_core::ReferenceCase<f64>,
    grid: TimeGrid<f64>,
    backend: &dyn StochasticBackend<f64>,
) -> bsee_core::Result<BseeSolution<f64>> {
    let problem = case.problem(spec.operator, grid).with_quad_order(spec.quad_order);
    spec.scheme.solve(&problem, backend, spec.substeps)
}

pub fn run_series(spec: &SeriesSpec) -> Result<Series, HarnessError> {
    let max_steps = *spec.steps.last().ok_or_else(|| HarnessError::Config("empty step list".into()))?;
    let first = spec.steps[0];
    let case = get_case(spec.case, spec.operator, spec.horizon).map_err(|e| spec.cell_error(first, e))?;
    let s = spec.scheme.effective_substeps(spec.substeps);
    let ref_steps = match case.solution {
        CaseSolution::FineGrid { .. } => Some(max_steps * spec.reference_multiplier),
        CaseSolution::Exact { .. } => None,
    };
    let finest = ref_steps.unwrap_or(max_steps);
    let grid_of = |steps: usize| TimeGrid::new(spec.horizon, steps).map_err(|e| spec.cell_error(steps, e));

    let backends = match spec.backend {
        BackendSpec::AlignedLattice { .. } => Backends::PerGrid,
        other => Backends::Shared(other.build(&grid_of(finest)?, s).map_err(|e| spec.cell_error(finest, e))?),
    };
    let backend_for = |steps: usize| -> Result<Option<Backend>, HarnessError> {
        match &backends {
            Backends::Shared(_) => Ok(None),
            Backends::PerGrid => {
                let fine = grid_of(steps)?.refine(s).map_err(|e| spec.cell_error(steps, e))?;
                Ok(Some(spec.backend.build(&fine, 1).map_err(|e| spec.cell_error(steps, e))?))
            }
        }
    };

    let reference = match ref_steps {
        Some(n) => {
            let own = backend_for(n)?;
            let b: &dyn StochasticBackend<f64> = match (&backends, &own) {
                (Backends::Shared(b), _) => b.as_ref(),
                (_, Some(b)) => b.as_ref(),
                _ => unreachable!(),
            };
            let sol = solve(spec, &case, grid_of(n)?, b).map_err(|e| spec.cell_error(n, e))?;
            Some((sol, own))
        }
        None => None,
    };
    let stiffness = spec.operator.eigenvalues().iter().copied().fold(0.0, f64::max);
    let modes = spec.operator.modes();

    let cells: Vec<Result<(Row, Option<f64>), HarnessError>> = spec
        .steps
        .par_iter()
        .map(|&steps| {
            let grid = grid_of(steps)?;
            let own = backend_for(steps)?;
            let backend: &dyn StochasticBackend<f64> = match (&backends, &own) {
                (Backends::Shared(b), _) => b.as_ref(),
                (_, Some(b)) => b.as_ref(),
                _ => unreachable!(),
            };
            let fail = |e| spec.cell_error(steps, e);
            let start = Instant::now();
            let sol = solve(spec, &case, grid, backend).map_err(fail)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let (err_p, err_z_val, gap) = match (&case.solution, &reference) {
                (CaseSolution::Exact { p, z }, _) => {
                    let po = ExactOracle::new(p.clone(), modes, stiffness);
                    let zo = ExactOracle::new(z.clone(), modes, stiffness);
                    let ep = err_p_inf(backend, &sol.p, &po).map_err(fail)?;
                    let ez = err_z(backend, &sol.z, &zo).map_err(fail)?;
                    (ep, ez, Some(ptau_gap(&grid, &zo).map_err(fail)?))
                }
                (CaseSolution::FineGrid { .. }, Some((r, own_ref))) => {
                    let rb: &dyn StochasticBackend<f64> = match (&backends, own_ref) {
                        (Backends::Shared(b), _) => b.as_ref(),
                        (_, Some(b)) => b.as_ref(),
                        _ => unreachable!(),
                    };
                    let po = PiecewiseOracle { backend: rb, process: &r.p };
                    let zo = PiecewiseOracle { backend: rb, process: &r.z };
                    let ep = err_p_inf(backend, &sol.p, &po as &dyn ProcessOracle<f64>).map_err(fail)?;
                    let ez = err_z(backend, &sol.z, &zo as &dyn ProcessOracle<f64>).map_err(fail)?;
                    (ep, ez, None)
                }
                _ => unreachable!("fine-grid cases always carry a reference"),
            };
            let row = Row {
                case: spec.case.to_string(),
                scheme: spec.scheme.number(),
                backend: spec.backend.label().to_string(),
                steps,
                tau: grid.tau(),
                err_p,
                err_z: err_z_val,
                fp_iters_max: sol.fp_iters_max(),
                wall_ms: if spec.record_wall_time { wall_ms } else { 0.0 },
            };
            Ok((row, gap))
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    let mut gaps = Vec::new();
    for cell in cells {
        let (row, gap) = cell?;
        rows.push(row);
        gaps.extend(gap);
    }
    let gaps = (gaps.len() == rows.len()).then_some(gaps);
    Ok(Series { rows, gaps })
}

/// Rate fitted over the asymptotic tail of a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub fit: Option<RateFit>,
    /// First step count included in the fit.
    pub from_steps: usize,
    pub note: Option<String>,
}

/// Fit `log err` against `log tau` over the longest tail where the error
/// decreases monotonically. Rows must be ordered by increasing `J`.
pub fn fit_tail(rows: &[Row], metric: Metric) -> TailFit {
    let errors: Vec<f64> = rows.iter().map(|r| r.metric(metric)).collect();
    let start = asymptotic_start(&errors);
    let points: Vec<(f64, f64)> = rows[start..].iter().map(|r| (r.tau, r.metric(metric))).collect();
    let from_steps = rows.get(start).map_or(0, |r| r.steps);
    match fit_rate(&points) {
        Ok(fit) => TailFit {
            fit: Some(fit),
            from_steps,
            note: None,
        },
        Err(e) => TailFit {
            fit: None,
            from_steps,
            note: Some(e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(steps: usize, err: f64) -> Row {
        Row {
            case: "L2".into(),
            scheme: 1,
            backend: "lattice".into(),
            steps,
            tau: 1.0 / steps as f64,
            err_p: err,
            err_z: 0.0,
            fp_iters_max: 1,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn tail_skips_the_pre_asymptotic_head() {
        // first point is below the second: not yet asymptotic
        let rows = vec![row(4, 0.1), row(8, 0.2), row(16, 0.1), row(32, 0.05)];
        let t = fit_tail(&rows, Metric::Combined);
        assert_eq!(t.from_steps, 8);
        assert!((t.fit.unwrap().slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_point_tail_has_a_note() {
        let rows = vec![row(4, 0.1), row(8, 0.2)];
        let t = fit_tail(&rows, Metric::P);
        assert!(t.fit.is_none());
        assert!(t.note.is_some());
    }

    #[test]
    fn deterministic_case_superconverges() {
        let op = SpectralOperator::laplacian_1d(4).unwrap();
        let backend = BackendSpec::default();
        let spec = SeriesSpec {
            case: "L0",
            scheme: Scheme::Two,
            backend: &backend,
            operator: &op,
            horizon: 1.0,
            steps: &[8, 16, 32, 64],
            substeps: 1,
            quad_order: 2,
            reference_multiplier: 4,
            record_wall_time: false,
        };
        let s = run_series(&spec).unwrap();
        assert!(s.rows.iter().all(|r| r.err_z < 1e-12));
        // order one, approached from below: the stiff modes have lambda tau >> 1 on coarse grids
        let fit = fit_tail(&s.rows, Metric::P).fit.unwrap();
        assert!(fit.slope >= 0.8, "{fit:?}");
        let local = (s.rows[2].err_p / s.rows[3].err_p).log2();
        assert!(local >= 0.9, "{local}");
        assert!(s.gaps.unwrap().iter().all(|&g| g < 1e-12));
    }
}
