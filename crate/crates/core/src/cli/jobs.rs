use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::presets::{execute_reproduce, ReproduceJob};
use super::{CliError, CliResult};
use crate::model::Problem;
use crate::montecarlo::{error_table, fmt_real, time_grid, ErrorTable, Observable, ReferenceSpec, SchemeEntry};
use crate::schemes::{Scheme, StabilizerParams, WeightMatrix};
use crate::stability::StabilityReport;
use crate::weights::{heuristic_h, m_from_h, optimize_weights, OptConfig, WeightOptResult};

/// A fully resolved command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Stability(StabilityJob),
    Optimize(OptimizeJob),
    WeakError(WeakErrorJob),
    Reproduce(ReproduceJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Stability(_) => "stability",
            Job::Optimize(_) => "optimize",
            Job::WeakError(_) => "weak-error",
            Job::Reproduce(_) => "reproduce",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Stability(_) => None,
            Job::Optimize(j) => Some(j.config.seed),
            Job::WeakError(j) => Some(j.seed),
            Job::Reproduce(j) => Some(j.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StabilityWeights {
    Zero,
    Heuristic { alpha: f64 },
    Given(Vec<WeightOptResult>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityJob {
    pub problem: serde_json::Value,
    pub dts: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: Option<f64>,
    pub beta: f64,
    pub a: Option<f64>,
    pub weights: StabilityWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeJob {
    pub problem: serde_json::Value,
    pub dts: Vec<f64>,
    pub config: OptConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralWeights {
    /// Used for matching step sizes.
    pub given: Vec<WeightOptResult>,
    /// Used for the others.
    pub optimizer: OptConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum SchemeSpec {
    Euler,
    Implicit,
    MilsteinBalanced,
    Stabilized { alpha1: f64, alpha2: Option<f64>, beta: f64 },
    Heuristic { alpha: Option<f64> },
    Schurz,
    General(GeneralWeights),
}

impl SchemeSpec {
    pub fn label(&self) -> &'static str {
        match self {
            SchemeSpec::Euler => "euler",
            SchemeSpec::Implicit => "implicit",
            SchemeSpec::MilsteinBalanced => "milstein-balanced",
            SchemeSpec::Stabilized { .. } => "stabilized",
            SchemeSpec::Heuristic { .. } => "heuristic",
            SchemeSpec::Schurz => "schurz",
            SchemeSpec::General(_) => "general",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorJob {
    pub problem: serde_json::Value,
    pub schemes: Vec<SchemeSpec>,
    pub observable: Observable,
    pub t_list: Vec<f64>,
    pub dt_list: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub reference: ReferenceSpec,
    pub curve_grid: Option<usize>,
}

/// Output file names of a weak-error run.
pub(super) struct WeakErrorNames {
    pub errors: String,
    pub curves: String,
    pub layout: Option<String>,
    pub weights_prefix: String,
}

impl WeakErrorNames {
    fn plain() -> Self {
        Self {
            errors: "errors.csv".into(),
            curves: "curves.csv".into(),
            layout: None,
            weights_prefix: "weights".into(),
        }
    }
}

pub(super) fn problem_of(value: &serde_json::Value) -> CliResult<Problem> {
    Ok(Problem::from_json_str(&value.to_string())?)
}

/// Runs `job`, writing into `out`; returns the written file names.
pub fn execute(job: &Job, out: &Path) -> CliResult<Vec<String>> {
    match job {
        Job::Stability(_) => {
            let name = "stability.json";
            write(out, name, &(stability_json(job)? + "\n"))?;
            Ok(vec![name.into()])
        }
        Job::Optimize(j) => execute_optimize(j, out, "weights"),
        Job::WeakError(j) => execute_weak_error(j, out, &WeakErrorNames::plain()),
        Job::Reproduce(j) => execute_reproduce(j, out),
    }
}

pub(super) fn write(out: &Path, name: &str, text: &str) -> CliResult<()> {
    let path = out.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

#[derive(Serialize)]
struct StabilityEntry {
    dt: f64,
    #[serde(flatten)]
    report: StabilityReport,
}

fn find_weight(list: &[WeightOptResult], dt: f64) -> Option<&WeightOptResult> {
    list.iter().find(|w| (w.dt - dt).abs() <= 1e-12 * dt)
}

/// The report(s) as pretty JSON: one object for one step size, else an array.
pub fn stability_json(job: &Job) -> CliResult<String> {
    let Job::Stability(j) = job else {
        return Err(CliError::Internal("not a stability job".into()));
    };
    let problem = problem_of(&j.problem)?;
    let mut entries = Vec::new();
    for &dt in &j.dts {
        let report = match &problem {
            Problem::Scalar(s) => {
                let params = match j.a {
                    Some(a) => StabilizerParams::with_a(a),
                    None => StabilizerParams::chosen(s, dt, j.alpha1, j.alpha2, j.beta)?,
                };
                StabilityReport::scalar(s, dt, &params)?
            }
            Problem::Bilinear(b) => {
                let m = match &j.weights {
                    StabilityWeights::Zero => WeightMatrix::zeros(b.d),
                    StabilityWeights::Heuristic { alpha } => m_from_h(&heuristic_h(b, &vec![*alpha; b.m])?, dt)?,
                    StabilityWeights::Given(list) => find_weight(list, dt)
                        .ok_or_else(|| CliError::Usage(format!("no weight file for dt = {dt}")))?
                        .weight(),
                };
                StabilityReport::bilinear(b, dt, &m)?
            }
        };
        entries.push(StabilityEntry { dt, report });
    }
    let text = if entries.len() == 1 {
        serde_json::to_string_pretty(&entries[0])
    } else {
        serde_json::to_string_pretty(&entries)
    };
    text.map_err(|e| CliError::Internal(e.to_string()))
}

/// `1_64` for 1/64, else the decimal value.
pub(super) fn dt_tag(dt: f64) -> String {
    let inv = 1.0 / dt;
    if inv.fract() == 0.0 && inv >= 1.0 {
        format!("1_{inv}")
    } else {
        format!("{dt}")
    }
}

/// `1/64` for 1/64, else the decimal value.
fn dt_label(dt: f64) -> String {
    dt_tag(dt).replacen('_', "/", 1)
}

pub(super) fn execute_optimize(job: &OptimizeJob, out: &Path, prefix: &str) -> CliResult<Vec<String>> {
    let problem = problem_of(&job.problem)?;
    let Problem::Bilinear(sde) = &problem else {
        return Err(CliError::Usage("optimize needs a bilinear problem".into()));
    };
    let mut outputs = Vec::new();
    let mut results = Vec::new();
    for &dt in &job.dts {
        let r = optimize_weights(sde, dt, &job.config)?;
        let name = format!("{prefix}_M_{}.json", dt_tag(dt));
        write(out, &name, &(r.to_json() + "\n"))?;
        outputs.push(name);
        results.push(r);
    }
    let (rows, layout) = weight_tables(&results);
    let rows_name = format!("{prefix}_rows.csv");
    let layout_name = format!("{prefix}.csv");
    write(out, &rows_name, &rows)?;
    write(out, &layout_name, &layout)?;
    outputs.push(rows_name);
    outputs.push(layout_name);
    Ok(outputs)
}

/// Row-per-step CSV and the transposed layout (one column per step, entries in column-major
/// order, four decimals).
pub(super) fn weight_tables(results: &[WeightOptResult]) -> (String, String) {
    let d = results.first().map_or(0, |r| r.m.nrows());
    let names: Vec<String> = (0..d).flat_map(|j| (0..d).map(move |i| format!("M{}{}", i + 1, j + 1))).collect();
    let order = |r: &WeightOptResult| r.order.map_or(String::new(), |o| o.to_string());

    let mut rows = format!("delta,{},objective,order\n", names.join(","));
    for r in results {
        let entries: Vec<String> = r.m.iter().map(|v| format!("{v:.4}")).collect();
        rows += &format!("{},{},{},{}\n", fmt_real(r.dt), entries.join(","), fmt_real(r.objective), order(r));
    }

    let mut layout = format!("entry,{}\n", results.iter().map(|r| dt_label(r.dt)).collect::<Vec<_>>().join(","));
    for (k, name) in names.iter().enumerate() {
        let vals: Vec<String> = results.iter().map(|r| format!("{:.4}", r.m.as_slice()[k])).collect();
        layout += &format!("{name},{}\n", vals.join(","));
    }
    layout += &format!("objective,{}\n", results.iter().map(|r| fmt_real(r.objective)).collect::<Vec<_>>().join(","));
    layout += &format!("order,{}\n", results.iter().map(order).collect::<Vec<_>>().join(","));
    (rows, layout)
}

pub(super) fn execute_weak_error(job: &WeakErrorJob, out: &Path, names: &WeakErrorNames) -> CliResult<Vec<String>> {
    let problem = problem_of(&job.problem)?;
    let mut outputs = Vec::new();

    // general-scheme weights, resolved once per step size
    let mut general: BTreeMap<u64, WeightOptResult> = BTreeMap::new();
    for spec in &job.schemes {
        if let SchemeSpec::General(gw) = spec {
            let Problem::Bilinear(sde) = &problem else {
                return Err(CliError::Usage("general scheme needs a bilinear problem".into()));
            };
            for &dt in &job.dt_list {
                let r = match find_weight(&gw.given, dt) {
                    Some(w) => w.clone(),
                    None => {
                        let r = optimize_weights(sde, dt, &gw.optimizer)?;
                        let name = format!("{}_M_{}.json", names.weights_prefix, dt_tag(dt));
                        write(out, &name, &(r.to_json() + "\n"))?;
                        outputs.push(name);
                        r
                    }
                };
                general.insert(dt.to_bits(), r);
            }
        }
    }

    let entries: Vec<SchemeEntry> = job
        .schemes
        .iter()
        .map(|spec| {
            let problem = &problem;
            let general = &general;
            let spec = spec.clone();
            SchemeEntry {
                label: spec.label().into(),
                prepare: Box::new(move |dt| {
                    let scheme = match &spec {
                        SchemeSpec::Euler => Scheme::Euler,
                        SchemeSpec::Implicit => Scheme::Implicit,
                        SchemeSpec::MilsteinBalanced => Scheme::MilsteinBalanced,
                        SchemeSpec::Stabilized { alpha1, alpha2, beta } => Scheme::Stabilized {
                            alpha1: *alpha1,
                            alpha2: *alpha2,
                            beta: *beta,
                            fixed_a: None,
                        },
                        SchemeSpec::Heuristic { alpha } => Scheme::Heuristic {
                            alpha: alpha.map(|a| vec![a; problem.as_bilinear().m]),
                        },
                        SchemeSpec::Schurz => Scheme::Schurz,
                        SchemeSpec::General(_) => Scheme::General(general[&dt.to_bits()].weight()),
                    };
                    scheme.prepare(problem, dt)
                }),
            }
        })
        .collect();

    // one simulation per (scheme, dt) covers both the horizons and the curve grid
    let curve_times = match job.curve_grid {
        Some(0) => return Err(CliError::Usage("--curve-grid must be positive".into())),
        Some(n) => time_grid(job.t_list.iter().copied().fold(f64::NAN, f64::max), n),
        None => Vec::new(),
    };
    let mut all_times = job.t_list.clone();
    for t in &curve_times {
        if !all_times.contains(t) {
            all_times.push(*t);
        }
    }
    let table = error_table(
        &entries,
        &problem,
        &job.observable,
        &all_times,
        &job.dt_list,
        job.samples,
        job.seed,
        &job.reference,
    )?;
    let pick = |times: &[f64]| ErrorTable {
        rows: table.rows.iter().filter(|r| times.contains(&r.t)).cloned().collect(),
        references: table.references.iter().filter(|r| times.contains(&r.t)).cloned().collect(),
    };
    let mut errors = pick(&job.t_list);
    // rows in scheme, dt, then the given horizon order
    errors.rows.sort_by_key(|r| {
        (
            job.schemes.iter().position(|s| s.label() == r.scheme),
            job.dt_list.iter().position(|d| *d == r.dt),
            job.t_list.iter().position(|t| *t == r.t),
        )
    });
    write(out, &names.errors, &errors.to_csv_string())?;
    outputs.push(names.errors.clone());
    if let Some(layout) = &names.layout {
        write(out, layout, &error_layout(&errors, &job.dt_list, &job.t_list))?;
        outputs.push(layout.clone());
    }
    if !curve_times.is_empty() {
        let mut curves = pick(&curve_times);
        curves.rows.sort_by(|a, b| {
            let ka = (job.schemes.iter().position(|s| s.label() == a.scheme), job.dt_list.iter().position(|d| *d == a.dt));
            let kb = (job.schemes.iter().position(|s| s.label() == b.scheme), job.dt_list.iter().position(|d| *d == b.dt));
            ka.cmp(&kb).then(a.t.total_cmp(&b.t))
        });
        write(out, &names.curves, &curves.to_csv_string())?;
        outputs.push(names.curves.clone());
    }
    Ok(outputs)
}

/// One row per (scheme, T), one absolute-error column per step size.
fn error_layout(table: &ErrorTable, dts: &[f64], ts: &[f64]) -> String {
    let mut s = format!("scheme,T,{}\n", dts.iter().map(|d| dt_label(*d)).collect::<Vec<_>>().join(","));
    let mut schemes: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !schemes.contains(&r.scheme.as_str()) {
            schemes.push(&r.scheme);
        }
    }
    for scheme in schemes {
        for &t in ts {
            let vals: Vec<String> = dts
                .iter()
                .map(|&dt| table.row(scheme, dt, t).map_or(String::new(), |r| fmt_real(r.abs_error)))
                .collect();
            s += &format!("{scheme},{},{}\n", fmt_real(t), vals.join(","));
        }
    }
    s
}

pub(super) fn weak_error_names(prefix: &str, layout: bool) -> WeakErrorNames {
    WeakErrorNames {
        errors: if layout { format!("{prefix}.csv") } else { format!("{prefix}_errors.csv") },
        curves: format!("{prefix}_curves.csv"),
        layout: layout.then(|| format!("{prefix}_layout.csv")),
        weights_prefix: prefix.into(),
    }
}
