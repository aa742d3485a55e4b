use std::path::Path;

use bsee_core::lq::TargetPreset;
use bsee_core::{BackendSpec, CoefficientSet, OperatorPreset, Scheme, CASE_IDS};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Which error the pass threshold looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `errP_inf + errZ`
    #[default]
    Combined,
    P,
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub min_slope: f64,
    /// Upper bound on the metric at the finest step count, if set.
    pub max_error: Option<f64>,
    pub metric: Metric,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_slope: 0.45,
            max_error: None,
            metric: Metric::Combined,
        }
    }
}

/// Optional control-problem rate study run after the scheme matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqConfig {
    pub nu: f64,
    pub coefficients: CoefficientSet,
    pub target: TargetPreset,
    pub steps: Vec<usize>,
    /// The reference solution uses `reference_factor * max(steps)` steps.
    pub reference_factor: usize,
    pub backend: BackendSpec,
    pub cg_tol: f64,
    pub min_slope: f64,
}

impl Default for LqConfig {
    fn default() -> Self {
        Self {
            nu: 1.0,
            coefficients: CoefficientSet::constant(0.2, 1.0, 0.5, 0.3),
            target: TargetPreset::Smooth,
            steps: vec![8, 16, 32, 64],
            reference_factor: 4,
            backend: BackendSpec::AlignedLattice { extent: 6.0 },
            cg_tol: bsee_core::lq::DEFAULT_CG_TOL,
            min_slope: 0.45,
        }
    }
}

/// One experiment: the full matrix `cases x schemes x backends`, each run
/// over the same list of step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cases: Vec<String>,
    pub schemes: Vec<u8>,
    pub backends: Vec<BackendSpec>,
    pub operator: OperatorPreset,
    pub horizon: f64,
    pub steps: Vec<usize>,
    /// Sub-steps per step for scheme 3.
    pub substeps: usize,
    /// Gauss-Legendre order for time integrals of the driver.
    pub quad_order: usize,
    /// Overrides the seed of every regression backend.
    pub seed: Option<u64>,
    /// Fine-grid references use `reference_multiplier * max(steps)` steps.
    pub reference_multiplier: usize,
    pub thresholds: Thresholds,
    /// Write measured wall-clock times; off gives byte-reproducible CSVs.
    pub record_wall_time: bool,
    pub lq: Option<LqConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cases: vec!["L2".into()],
            schemes: vec![1, 2, 3],
            backends: vec![BackendSpec::default()],
            operator: OperatorPreset::default(),
            horizon: 1.0,
            steps: vec![8, 16, 32, 64, 128],
            substeps: 2,
            quad_order: 2,
            seed: None,
            reference_multiplier: 4,
            thresholds: Thresholds::default(),
            record_wall_time: true,
            lq: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schemes(&self) -> Result<Vec<Scheme>, HarnessError> {
        self.schemes
            .iter()
            .map(|&n| Scheme::from_number(n).map_err(|e| HarnessError::Config(e.to_string())))
            .collect()
    }

    /// Apply the `--seed` override to every regression backend.
    pub fn seeded_backends(&self) -> Vec<BackendSpec> {
        self.backends
            .iter()
            .map(|b| match (b, self.seed) {
                (BackendSpec::Regression(cfg), Some(seed)) => {
                    let mut cfg = cfg.clone();
                    cfg.seed = seed;
                    BackendSpec::Regression(cfg)
                }
                _ => b.clone(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.cases.is_empty() || self.schemes.is_empty() || self.backends.is_empty() {
            return bad("cases, schemes and backends must be non-empty".into());
        }
        for c in &self.cases {
            if !CASE_IDS.contains(&c.as_str()) {
                return bad(format!("unknown case `{c}` (known: {})", CASE_IDS.join(", ")));
            }
        }
        self.schemes()?;
        check_steps(&self.steps)?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.substeps == 0 || self.quad_order == 0 || self.reference_multiplier == 0 {
            return bad("substeps, quad_order and reference_multiplier must be at least 1".into());
        }
        self.operator
            .build::<f64>()
            .map_err(|e| HarnessError::Config(format!("operator: {e}")))?;
        if let Some(lq) = &self.lq {
            check_steps(&lq.steps)?;
            if lq.nu.is_nan() || lq.nu <= 0.0 || lq.reference_factor == 0 {
                return bad("lq: nu must be positive and reference_factor at least 1".into());
            }
        }
        Ok(())
    }
}

/// Step counts must increase strictly and each must divide the next, so the
/// piecewise-constant spaces are nested.
pub fn check_steps(steps: &[usize]) -> Result<(), HarnessError> {
    if steps.is_empty() {
        return Err(HarnessError::Config("step list is empty".into()));
    }
    if steps[0] == 0 {
        return Err(HarnessError::Config("step counts must be positive".into()));
    }
    for w in steps.windows(2) {
        if w[1] <= w[0] || w[1] % w[0] != 0 {
            return Err(HarnessError::Config(format!(
                "step list must be strictly increasing and nested; {} does not refine {}",
                w[1], w[0]
            )));
        }
    }
    Ok(())
}
