use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bsee_core::lq::{rate_study_lq, LqProblem, LqRateReport};
use bsee_core::{TimeGrid, CASE_IDS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LqConfig, Metric};
use crate::error::HarnessError;
use crate::study::{fit_tail, run_series, Row, SeriesSpec, TailFit};

pub const CSV_NAME: &str = "results.csv";
pub const SUMMARY_NAME: &str = "summary.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub case: String,
    pub scheme: u8,
    pub backend: String,
    pub metric: Metric,
    #[serde(flatten)]
    pub tail: TailFit,
    /// `||(I - P_tau) z||` per step count (exact cases only).
    pub gaps: Option<Vec<f64>>,
    /// `gap / tau^{1/2}`; bounded when the gap has order one half.
    pub gap_ratios: Option<Vec<f64>>,
    /// `errZ / (tau^{1/2} + gap)`; one constant should cover all step counts.
    pub z_constants: Option<Vec<f64>>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LqSummary {
    #[serde(flatten)]
    pub report: LqRateReport,
    pub min_slope: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    /// The configuration as run, with every default filled in.
    pub config: ExperimentConfig,
    pub series: Vec<SeriesSummary>,
    pub lq: Option<LqSummary>,
    pub all_pass: bool,
}

pub struct RunOutput {
    pub summary: Summary,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Decide pass/fail for one series.
pub fn summarize(rows: &[Row], gaps: Option<Vec<f64>>, cfg: &ExperimentConfig) -> SeriesSummary {
    let th = &cfg.thresholds;
    let tail = fit_tail(rows, th.metric);
    let slope_ok = tail.fit.is_some_and(|f| f.slope >= th.min_slope);
    let error_ok = match (th.max_error, rows.last()) {
        (Some(max), Some(r)) => r.metric(th.metric) <= max,
        _ => true,
    };
    let gap_ratios = gaps
        .as_ref()
        .map(|g| g.iter().zip(rows).map(|(&g, r)| g / r.tau.sqrt()).collect::<Vec<_>>());
    let z_constants = gaps.as_ref().map(|g| {
        g.iter()
            .zip(rows)
            .map(|(&g, r)| r.err_z / (r.tau.sqrt() + g))
            .collect::<Vec<_>>()
    });
    let first = &rows[0];
    SeriesSummary {
        case: first.case.clone(),
        scheme: first.scheme,
        backend: first.backend.clone(),
        metric: th.metric,
        tail,
        gaps,
        gap_ratios,
        z_constants,
        pass: slope_ok && error_ok,
    }
}

pub fn run_lq(cfg: &LqConfig, cfg_all: &ExperimentConfig) -> Result<LqSummary, HarnessError> {
    let operator = cfg_all
        .operator
        .build::<f64>()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let modes = operator.modes();
    let grid = TimeGrid::new(cfg_all.horizon, cfg.steps[0]).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut problem = LqProblem::new(cfg.nu, cfg.coefficients, operator, grid, cfg.target.function(modes))
        .map_err(|e| HarnessError::Config(e.to_string()))?
        .with_tolerance(cfg.cg_tol);
    problem.quad_order = cfg_all.quad_order;
    let backend = match (&cfg.backend, cfg_all.seed) {
        (bsee_core::BackendSpec::Regression(r), Some(seed)) => {
            let mut r = r.clone();
            r.seed = seed;
            bsee_core::BackendSpec::Regression(r)
        }
        (b, _) => b.clone(),
    };
    let report =
        rate_study_lq(&problem, &cfg.steps, cfg.reference_factor, &backend).map_err(HarnessError::Control)?;
    let pass = report.fit.is_some_and(|f| f.slope >= cfg.min_slope);
    Ok(LqSummary {
        report,
        min_slope: cfg.min_slope,
        pass,
    })
}

/// Run the whole matrix, write the CSV and the JSON summary.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let operator = cfg.operator.build::<f64>().map_err(|e| HarnessError::Config(e.to_string()))?;
    let schemes = cfg.schemes()?;
    let backends = cfg.seeded_backends();
    let mut jobs = Vec::new();
    for case in &cfg.cases {
        for &scheme in &schemes {
            for backend in &backends {
                jobs.push((case.as_str(), scheme, backend));
            }
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(case, scheme, backend)| {
            run_series(&SeriesSpec {
                case,
                scheme,
                backend,
                operator: &operator,
                horizon: cfg.horizon,
                steps: &cfg.steps,
                substeps: cfg.substeps,
                quad_order: cfg.quad_order,
                reference_multiplier: cfg.reference_multiplier,
                record_wall_time: cfg.record_wall_time,
            })
        })
        .collect();

    let mut all_rows = Vec::new();
    let mut series = Vec::new();
    for r in results {
        let s = r?;
        series.push(summarize(&s.rows, s.gaps, cfg));
        all_rows.extend(s.rows);
    }
    let lq = cfg.lq.as_ref().map(|l| run_lq(l, cfg)).transpose()?;
    let all_pass = series.iter().all(|s| s.pass) && lq.as_ref().is_none_or(|l| l.pass);

    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(CSV_NAME);
    write_csv(&csv_path, &all_rows)?;
    let summary = Summary {
        config: cfg.clone(),
        series,
        lq,
        all_pass,
    };
    let summary_path = out_dir.join(SUMMARY_NAME);
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunOutput {
        summary,
        csv_path,
        summary_path,
    })
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<Row>, _>>()?;
    Ok(rows)
}

/// Refit every `(case, scheme, backend)` series found in a results file.
pub fn fit_csv(path: &Path, metric: Metric) -> Result<Vec<(String, u8, String, TailFit)>, HarnessError> {
    let rows = read_csv(path)?;
    let mut groups: BTreeMap<(String, u8, String), Vec<Row>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.case.clone(), r.scheme, r.backend.clone()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((case, scheme, backend), mut rows)| {
            rows.sort_by_key(|r| r.steps);
            (case, scheme, backend, fit_tail(&rows, metric))
        })
        .collect())
}

/// `id  tags  description` for every catalog case.
pub fn case_listing() -> Vec<String> {
    let op = bsee_core::SpectralOperator::<f64>::laplacian_1d(1).expect("valid operator");
    let cases: Vec<_> = CASE_IDS
        .iter()
        .map(|id| bsee_core::get_case(id, &op, 1.0).expect("catalog case"))
        .collect();
    let tags: Vec<String> = cases.iter().map(|c| c.tags.join(",")).collect();
    let width = tags.iter().map(String::len).max().unwrap_or(0);
    cases
        .iter()
        .zip(&tags)
        .map(|(c, t)| format!("{:<4}{t:<width$}  {}", c.id, c.description))
        .collect()
}
