use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::jobs::{
    execute, GeneralWeights, Job, OptimizeJob, SchemeSpec, StabilityJob, StabilityWeights, WeakErrorJob,
};
use super::presets::{Preset, ReproduceJob};
use super::{CliError, CliResult, RunManifest};
use crate::model::Problem;
use crate::montecarlo::{parse_number, worker_pool, Observable, ReferenceSpec, REFERENCE_SEED_OFFSET};
use crate::schemes::{SchemeId, StabilizerParams};
use crate::weights::{OptConfig, StartSpec, WeightOptResult};

/// Fine step of the Euler reference when none is given.
pub const DEFAULT_REFERENCE_DT: f64 = 1.0 / 8192.0;

#[derive(Debug, Parser)]
#[command(name = "balanced-sde", version, about = "Weak balanced schemes for linear SDEs: stability, weight selection, weak-error tables")]
pub struct Cli {
    /// Worker threads (default: $BALANCED_SDE_WORKERS, else all cores). Never changes results.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stability report of a scalar problem (admissible weights, chosen a, E log multiplier) or a
    /// bilinear problem (ℓ, worst-direction growth, objective) per step size.
    Stability(StabilityArgs),
    /// Search the weight matrix M per step size; writes a weight table and one JSON per step.
    Optimize(OptimizeArgs),
    /// Weak-error table (and optional time curves) of schemes against a reference.
    WeakError(WeakErrorArgs),
    /// Run a bundled experiment: table1, table2, fig1, fig2.
    Reproduce(ReproduceArgs),
    /// Re-run the job recorded in a manifest and compare the outputs with the recorded ones.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct ProblemArgs {
    /// Problem JSON file.
    #[arg(long)]
    pub problem: PathBuf,
    /// Override the initial state (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
}

impl ProblemArgs {
    fn load(&self) -> CliResult<Problem> {
        let p = Problem::load(&self.problem)?;
        Ok(match &self.x0 {
            Some(x0) => p.with_x0(x0)?,
            None => p,
        })
    }
}

#[derive(Debug, Args)]
pub struct StabilizerArgs {
    #[arg(long, default_value_t = StabilizerParams::DEFAULT_ALPHA1)]
    pub alpha1: f64,
    /// Default: 1/4 + min(1/100, allowed width).
    #[arg(long)]
    pub alpha2: Option<f64>,
    #[arg(long, default_value_t = StabilizerParams::DEFAULT_BETA)]
    pub beta: f64,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Step sizes; fractions such as 1/64 are accepted.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_real)]
    pub dt: Vec<f64>,
    #[command(flatten)]
    pub stabilizer: StabilizerArgs,
    /// Scalar problems: use this stabilizing weight instead of choosing one.
    #[arg(long, allow_hyphen_values = true)]
    pub a: Option<f64>,
    /// Bilinear problems: weight JSON written by `optimize` (one per step size).
    #[arg(long)]
    pub weights: Vec<PathBuf>,
    /// Bilinear problems: use the heuristic weight M(H) with this α for every noise.
    #[arg(long, conflicts_with = "weights")]
    pub heuristic_alpha: Option<f64>,
    /// Also write stability.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizerArgs {
    /// Entrywise bound K on M.
    #[arg(long = "box", default_value_t = 20.0)]
    pub box_bound: f64,
    /// `grid` (values −2..2 per entry), `grid:v1:v2:…`, or `random:N`.
    #[arg(long, default_value = "grid")]
    pub starts: String,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub obj_tol: f64,
}

impl OptimizerArgs {
    fn config(&self, d: usize, seed: u64) -> CliResult<OptConfig> {
        let starts = parse_starts(&self.starts, d)?;
        Ok(OptConfig {
            box_bound: self.box_bound,
            starts,
            obj_tol: self.obj_tol,
            max_iters_per_start: self.max_iters,
            seed,
            ..OptConfig::for_dim(d)
        })
    }
}

fn parse_starts(s: &str, d: usize) -> CliResult<StartSpec> {
    let bad = || CliError::Usage(format!("bad --starts '{s}' (expected grid, grid:v1:v2:..., or random:N)"));
    if s == "grid" {
        return Ok(StartSpec::default_for(d));
    }
    if let Some(rest) = s.strip_prefix("grid:") {
        let values = rest.split(':').map(parse_number).collect::<Result<Vec<_>, _>>().map_err(|_| bad())?;
        return Ok(StartSpec::Grid { values });
    }
    if let Some(n) = s.strip_prefix("random:") {
        let count = n.parse().map_err(|_| bad())?;
        return Ok(StartSpec::Random { count, half_width: 2.0 });
    }
    Err(bad())
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_real)]
    pub dt: Vec<f64>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    /// Seed for random starts (recorded; a fresh one is drawn when absent).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WeakErrorArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Schemes: euler, implicit, milstein-balanced, stabilized, heuristic, general, schurz.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scheme: Vec<String>,
    /// `sin:<c>` or `log1p-norm2` (default: sin:1/5 for scalar, log1p-norm2 otherwise).
    #[arg(long)]
    pub observable: Option<String>,
    #[arg(long = "T", value_delimiter = ',', required = true, value_parser = parse_real)]
    pub t: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_real)]
    pub dt: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `quadrature` (scalar), `fine-euler`, or `values:v1:v2:...` (one per horizon).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, value_parser = parse_real)]
    pub ref_dt: Option<f64>,
    #[arg(long)]
    pub ref_samples: Option<usize>,
    /// Gauss–Hermite nodes for the quadrature reference.
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    /// Also write curves at T·j/N, j = 1..N, for the largest horizon.
    #[arg(long)]
    pub curve_grid: Option<usize>,
    #[command(flatten)]
    pub stabilizer: StabilizerArgs,
    /// Heuristic scheme α (same for every noise).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight JSON files for `general`; missing step sizes are optimized.
    #[arg(long)]
    pub weights: Vec<PathBuf>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// table1, table2, fig1 or fig2.
    pub name: String,
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 1e6)]
    pub scale: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Directory for the regenerated outputs.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_real(s: &str) -> Result<f64, String> {
    parse_number(s).map_err(|e| e.to_string())
}

fn fresh_seed() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

fn load_weights(paths: &[PathBuf]) -> CliResult<Vec<WeightOptResult>> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            WeightOptResult::from_json(&text).map_err(CliError::from)
        })
        .collect()
}

pub(super) fn dispatch(cli: Cli) -> CliResult<()> {
    let pool = worker_pool(cli.workers)?;
    pool.install(|| match cli.command {
        Command::Stability(a) => {
            let problem = a.problem.load()?;
            let weights = if !a.weights.is_empty() {
                StabilityWeights::Given(load_weights(&a.weights)?)
            } else if let Some(alpha) = a.heuristic_alpha {
                StabilityWeights::Heuristic { alpha }
            } else {
                StabilityWeights::Zero
            };
            let job = Job::Stability(StabilityJob {
                problem: problem.to_json(),
                dts: a.dt,
                alpha1: a.stabilizer.alpha1,
                alpha2: a.stabilizer.alpha2,
                beta: a.stabilizer.beta,
                a: a.a,
                weights,
            });
            let text = super::jobs::stability_json(&job)?;
            println!("{text}");
            if let Some(out) = a.out {
                run_job(job, &out)?;
            }
            Ok(())
        }
        Command::Optimize(a) => {
            let problem = a.problem.load()?;
            let seed = a.seed.unwrap_or_else(fresh_seed);
            let job = Job::Optimize(OptimizeJob {
                problem: problem.to_json(),
                dts: a.dt,
                config: a.optimizer.config(problem.dim(), seed)?,
            });
            run_job(job, &a.out)
        }
        Command::WeakError(a) => {
            let problem = a.problem.load()?;
            let job = weak_error_job(&a, &problem)?;
            run_job(job, &a.out)
        }
        Command::Reproduce(a) => {
            let preset: Preset = a.name.parse()?;
            if !(a.scale >= 2.0) || a.scale.fract() != 0.0 {
                return Err(CliError::Usage(format!("--scale must be an integer sample count ≥ 2, got {}", a.scale)));
            }
            let job = Job::Reproduce(ReproduceJob {
                preset,
                samples: a.scale as usize,
                seed: a.seed.unwrap_or(preset.default_seed()),
            });
            run_job(job, &a.out)
        }
        Command::Replay(a) => replay(&a.manifest, &a.out),
    })
}

fn weak_error_job(a: &WeakErrorArgs, problem: &Problem) -> CliResult<Job> {
    if a.samples < 2 {
        return Err(CliError::Usage(format!("--samples must be at least 2, got {}", a.samples)));
    }
    let seed = a.seed.unwrap_or_else(fresh_seed);
    let observable: Observable = match &a.observable {
        Some(s) => s.parse()?,
        None => match problem {
            Problem::Scalar(_) => Observable::SinScaled { c: 0.2 },
            Problem::Bilinear(_) => Observable::Log1pNorm2,
        },
    };
    let reference = match a.reference.as_deref() {
        None if matches!(problem, Problem::Scalar(_)) => ReferenceSpec::Quadrature { nodes: a.nodes },
        Some("quadrature") => ReferenceSpec::Quadrature { nodes: a.nodes },
        None | Some("fine-euler") => ReferenceSpec::FineEuler {
            dt_fine: a.ref_dt.unwrap_or(DEFAULT_REFERENCE_DT),
            n_samples: a.ref_samples.unwrap_or(a.samples),
            seed: seed ^ REFERENCE_SEED_OFFSET,
        },
        Some(s) => match s.strip_prefix("values:") {
            Some(v) => ReferenceSpec::Fixed {
                values: v.split(':').map(parse_number).collect::<Result<_, _>>()?,
            },
            None => return Err(CliError::Usage(format!("unknown --reference '{s}'"))),
        },
    };
    let given = load_weights(&a.weights)?;
    let mut schemes = Vec::new();
    for name in &a.scheme {
        let id: SchemeId = name.parse()?;
        schemes.push(match id {
            SchemeId::Euler => SchemeSpec::Euler,
            SchemeId::Implicit => SchemeSpec::Implicit,
            SchemeId::MilsteinBalanced => SchemeSpec::MilsteinBalanced,
            SchemeId::Stabilized => SchemeSpec::Stabilized {
                alpha1: a.stabilizer.alpha1,
                alpha2: a.stabilizer.alpha2,
                beta: a.stabilizer.beta,
            },
            SchemeId::Heuristic => SchemeSpec::Heuristic { alpha: a.alpha },
            SchemeId::Schurz => SchemeSpec::Schurz,
            SchemeId::General => SchemeSpec::General(GeneralWeights {
                given: given.clone(),
                optimizer: a.optimizer.config(problem.dim(), seed)?,
            }),
        });
    }
    Ok(Job::WeakError(WeakErrorJob {
        problem: problem.to_json(),
        schemes,
        observable,
        t_list: a.t.clone(),
        dt_list: a.dt.clone(),
        samples: a.samples,
        seed,
        reference,
        curve_grid: a.curve_grid,
    }))
}

fn run_job(job: Job, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let outputs = execute(&job, out)?;
    let manifest = RunManifest::new(job, outputs.clone());
    manifest.write(out)?;
    for o in &outputs {
        eprintln!("wrote {}", out.join(o).display());
    }
    Ok(())
}

fn replay(manifest_path: &Path, out: &Path) -> CliResult<()> {
    let manifest = RunManifest::load(manifest_path)?;
    let source_dir = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let outputs = execute(&manifest.job, out)?;
    RunManifest::new(manifest.job.clone(), outputs.clone()).write(out)?;
    let mut differing = Vec::new();
    for name in &manifest.outputs {
        let old = std::fs::read(source_dir.join(name)).ok();
        let new = std::fs::read(out.join(name)).ok();
        let same = old.is_some() && old == new;
        println!("{name}: {}", if same { "identical" } else { "DIFFERS" });
        if !same {
            differing.push(name.clone());
        }
    }
    if differing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Internal(format!("replay differs in {}", differing.join(", "))))
    }
}
