//! Bundled experiments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::jobs::{execute_optimize, execute_weak_error, weak_error_names, GeneralWeights, OptimizeJob, SchemeSpec, WeakErrorJob};
use super::{CliError, CliResult};
use crate::model::{make_test_equation_2d, Problem, ScalarLinearSDE};
use crate::montecarlo::{Observable, ReferenceSpec, REFERENCE_SEED_OFFSET};
use crate::schemes::StabilizerParams;
use crate::weights::OptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Optimized weights for the 2×2 test system at dt = 1/2 … 1/64.
    Table1,
    /// Weak errors of E log(1+‖X_T‖²), T ∈ {1, 3}, four schemes, dt = 1/2 … 1/64.
    Table2,
    /// E sin(X_t/5) on [0, 2] for the scalar equation μ = 0, λ = 4.
    Fig1,
    /// E log(1+‖X_t‖²) on [0, 10] for the 2×2 test system.
    Fig2,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Table1, Preset::Table2, Preset::Fig1, Preset::Fig2];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
        }
    }

    pub fn default_seed(self) -> u64 {
        20_130_101
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            CliError::Usage(format!("unknown preset '{s}' (available: {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceJob {
    pub preset: Preset,
    pub samples: usize,
    pub seed: u64,
}

/// Step sizes 1/2 … 1/64.
pub fn table_steps() -> Vec<f64> {
    (1..=6).map(|k| 0.5f64.powi(k)).collect()
}

/// Step sizes 1/8 … 1/64.
pub fn figure_steps() -> Vec<f64> {
    (3..=6).map(|k| 0.5f64.powi(k)).collect()
}

pub const REFERENCE_DT: f64 = 1.0 / 8192.0;

fn test_system() -> Problem {
    Problem::Bilinear(make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]))
}

fn general(seed: u64) -> SchemeSpec {
    SchemeSpec::General(GeneralWeights {
        given: Vec::new(),
        optimizer: OptConfig {
            seed,
            ..OptConfig::for_dim(2)
        },
    })
}

/// The weak-error job behind `table2`, `fig1` or `fig2` (`None` for `table1`).
pub fn preset_weak_error_job(job: &ReproduceJob) -> Option<WeakErrorJob> {
    let fine_euler = ReferenceSpec::FineEuler {
        dt_fine: REFERENCE_DT,
        n_samples: job.samples,
        seed: job.seed ^ REFERENCE_SEED_OFFSET,
    };
    match job.preset {
        Preset::Table1 => None,
        Preset::Table2 => Some(WeakErrorJob {
            problem: test_system().to_json(),
            schemes: vec![SchemeSpec::Euler, SchemeSpec::Schurz, SchemeSpec::Heuristic { alpha: None }, general(job.seed)],
            observable: Observable::Log1pNorm2,
            t_list: vec![1.0, 3.0],
            dt_list: table_steps(),
            samples: job.samples,
            seed: job.seed,
            reference: fine_euler,
            curve_grid: None,
        }),
        Preset::Fig1 => Some(WeakErrorJob {
            problem: Problem::Scalar(ScalarLinearSDE::new(0.0, 4.0, 1.0)).to_json(),
            schemes: vec![
                SchemeSpec::Implicit,
                SchemeSpec::MilsteinBalanced,
                SchemeSpec::Stabilized {
                    alpha1: StabilizerParams::DEFAULT_ALPHA1,
                    alpha2: None,
                    beta: StabilizerParams::DEFAULT_BETA,
                },
            ],
            observable: Observable::SinScaled { c: 0.2 },
            t_list: vec![2.0],
            dt_list: figure_steps(),
            samples: job.samples,
            seed: job.seed,
            reference: ReferenceSpec::Quadrature { nodes: 200 },
            curve_grid: Some(16),
        }),
        Preset::Fig2 => Some(WeakErrorJob {
            problem: test_system().to_json(),
            schemes: vec![general(job.seed), SchemeSpec::Schurz, SchemeSpec::Heuristic { alpha: None }],
            observable: Observable::Log1pNorm2,
            t_list: vec![10.0],
            dt_list: figure_steps(),
            samples: job.samples,
            seed: job.seed,
            reference: fine_euler,
            curve_grid: Some(80),
        }),
    }
}

pub(super) fn execute_reproduce(job: &ReproduceJob, out: &Path) -> CliResult<Vec<String>> {
    let prefix = job.preset.name();
    match preset_weak_error_job(job) {
        None => {
            let opt = OptimizeJob {
                problem: test_system().to_json(),
                dts: table_steps(),
                config: OptConfig {
                    seed: job.seed,
                    ..OptConfig::for_dim(2)
                },
            };
            execute_optimize(&opt, out, prefix)
        }
        Some(w) => execute_weak_error(&w, out, &weak_error_names(prefix, job.preset == Preset::Table2)),
    }
}
