//! Weak-error estimation: Monte Carlo means of `f(X_T)`, reference values, error tables
//! and order fits.
//!
//! Results depend only on `(seed, n_samples, scheme, problem, dt, T)`: trajectory `i`
//! always reads noise stream `(seed, i)`, trajectories are grouped into fixed-size leaves,
//! and leaf statistics are merged along a fixed binary tree. The number of worker
//! threads changes only the wall time.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dt, Error, Result};
use crate::model::{BilinearSDE, Problem};
use crate::quadrature::{composite, GaussRule};
use crate::rng::NoiseStream;
use crate::schemes::{Scheme, Stepper};

/// Trajectories per leaf of the reduction tree.
pub const LEAF_SIZE: usize = 1024;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "BALANCED_SDE_WORKERS";

/// Mixed into the master seed for fine-step reference runs so they do not share streams
/// with the schemes under test.
pub const REFERENCE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    /// `sin(c·x₁)` (first component)
    SinScaled { c: f64 },
    /// `log(1 + ‖x‖²)`
    Log1pNorm2,
}

impl Observable {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Observable::SinScaled { c } => (c * x[0]).sin(),
            Observable::Log1pNorm2 => x.iter().map(|v| v * v).sum::<f64>().ln_1p(),
        }
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::SinScaled { c } => write!(f, "sin:{c}"),
            Observable::Log1pNorm2 => f.write_str("log1p-norm2"),
        }
    }
}

impl FromStr for Observable {
    type Err = Error;

    /// `sin:<c>` or `log1p-norm2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "log1p-norm2" {
            return Ok(Observable::Log1pNorm2);
        }
        if let Some(c) = s.strip_prefix("sin:") {
            let c = parse_number(c)?;
            if !c.is_finite() {
                return Err(Error::InvalidArgument(format!("observable scale must be finite, got {c}")));
            }
            return Ok(Observable::SinScaled { c });
        }
        Err(Error::InvalidArgument(format!(
            "unknown observable '{s}' (expected 'sin:<c>' or 'log1p-norm2')"
        )))
    }
}

/// Parses a decimal or a fraction such as `1/64`.
pub fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::InvalidArgument(format!("not a number: '{s}'"));
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            Ok(a / b)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Trajectories whose `f` value was not finite; they are excluded from `mean` and `stderr`.
    pub n_nonfinite: usize,
}

/// Number of steps of size `dt` that land exactly on `t`.
pub fn steps_for(t: f64, dt: f64) -> Result<usize> {
    check_dt(dt)?;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t}")));
    }
    let n = (t / dt).round();
    if n < 1.0 || (n * dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {t} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

/// Count, mean and sum of squared deviations of the finite values.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
    nonfinite: usize,
}

impl Moments {
    const EMPTY: Self = Self {
        n: 0,
        mean: 0.0,
        m2: 0.0,
        nonfinite: 0,
    };

    /// Two-pass statistics of one leaf, shifted by its first finite value so that a constant
    /// leaf has exactly zero spread.
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let Some(shift) = values.clone().find(|v| v.is_finite()) else {
            return Self {
                nonfinite: values.count(),
                ..Self::EMPTY
            };
        };
        let (mut n, mut sum, mut nonfinite) = (0usize, 0.0, 0usize);
        for v in values.clone() {
            if v.is_finite() {
                n += 1;
                sum += v - shift;
            } else {
                nonfinite += 1;
            }
        }
        let mean_d = sum / n as f64;
        let m2 = values
            .filter(|v| v.is_finite())
            .map(|v| (v - shift - mean_d) * (v - shift - mean_d))
            .sum();
        Self {
            n,
            mean: shift + mean_d,
            m2,
            nonfinite,
        }
    }

    /// Chan et al. parallel combination.
    fn merge(a: Self, b: Self) -> Self {
        let nonfinite = a.nonfinite + b.nonfinite;
        if a.n == 0 {
            return Self { nonfinite, ..b };
        }
        if b.n == 0 {
            return Self { nonfinite, ..a };
        }
        let n = a.n + b.n;
        let delta = b.mean - a.mean;
        let fb = b.n as f64 / n as f64;
        Self {
            n,
            mean: a.mean + delta * fb,
            m2: a.m2 + b.m2 + delta * delta * a.n as f64 * fb,
            nonfinite,
        }
    }

    /// Fixed-shape binary tree over the leaves.
    fn tree(leaves: &[Self]) -> Self {
        match leaves.len() {
            0 => Self::EMPTY,
            1 => leaves[0],
            n => Self::merge(Self::tree(&leaves[..n / 2]), Self::tree(&leaves[n / 2..])),
        }
    }

    fn estimate(self, n_samples: usize, seed: u64) -> MCEstimate {
        let (mean, stderr) = match self.n {
            0 => (f64::NAN, f64::NAN),
            1 => (self.mean, f64::NAN),
            n => (self.mean, (self.m2 / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt()),
        };
        MCEstimate {
            mean,
            stderr,
            n_samples,
            seed,
            n_nonfinite: self.nonfinite,
        }
    }
}

/// Trajectories advanced together in the fixed-dimension loop; independent chains hide
/// the latency of the dependent multiply-adds.
const LANES: usize = 8;

/// Fills `values` (row `i − lo` holds the checkpoint values of trajectory `i`) for `lo..hi`.
fn run_leaf(stepper: &Stepper, x0: &[f64], f: &Observable, checkpoints: &[usize], seed: u64, lo: usize, values: &mut [f64]) {
    fn fixed<const D: usize>(stepper: &Stepper, x0: &[f64], f: &Observable, cps: &[usize], seed: u64, lo: usize, values: &mut [f64]) {
        let blocks = blocks::<D>(stepper);
        let m = stepper.noises();
        let k = cps.len();
        let mut groups = values.chunks_exact_mut(LANES * k);
        let mut first = lo;
        for g in &mut groups {
            run_lanes::<D, LANES>(&blocks, m, x0, f, cps, seed, first, g);
            first += LANES;
        }
        for row in groups.into_remainder().chunks_mut(k) {
            run_lanes::<D, 1>(&blocks, m, x0, f, cps, seed, first, row);
            first += 1;
        }
    }
    match stepper.dim() {
        _ if !stepper.is_tabulated() => {
            for (j, row) in values.chunks_mut(checkpoints.len()).enumerate() {
                let mut stream = NoiseStream::new(seed, (lo + j) as u64);
                run_dynamic(stepper, x0, f, checkpoints, &mut stream, row);
            }
        }
        1 => fixed::<1>(stepper, x0, f, checkpoints, seed, lo, values),
        2 => fixed::<2>(stepper, x0, f, checkpoints, seed, lo, values),
        3 => fixed::<3>(stepper, x0, f, checkpoints, seed, lo, values),
        _ => {
            for (j, row) in values.chunks_mut(checkpoints.len()).enumerate() {
                let mut stream = NoiseStream::new(seed, (lo + j) as u64);
                run_dynamic(stepper, x0, f, checkpoints, &mut stream, row);
            }
        }
    }
}

/// The tabulated one-step matrices as fixed-size arrays.
fn blocks<const D: usize>(stepper: &Stepper) -> Vec<[[f64; D]; D]> {
    (0..1usize << stepper.noises())
        .map(|p| {
            let b = stepper.table_block(p).expect("tabulated");
            std::array::from_fn(|i| std::array::from_fn(|j| b[i * D + j]))
        })
        .collect()
}

/// `L` consecutive trajectories starting at index `first`, stepped in lockstep. A state that
/// overflows stays non-finite (any product with `±∞` or NaN is non-finite), so finiteness is
/// only checked at checkpoints.
#[allow(clippy::too_many_arguments)]
fn run_lanes<const D: usize, const L: usize>(
    blocks: &[[[f64; D]; D]],
    m: usize,
    x0: &[f64],
    f: &Observable,
    checkpoints: &[usize],
    seed: u64,
    first: usize,
    out: &mut [f64],
) {
    let k = checkpoints.len();
    let mut streams: [NoiseStream; L] = std::array::from_fn(|l| NoiseStream::new(seed, (first + l) as u64));
    let mut ys = [[0.0; D]; L];
    for y in ys.iter_mut() {
        y.copy_from_slice(x0);
    }
    let mut done = 0;
    for (c, &target) in checkpoints.iter().enumerate() {
        while done < target {
            for l in 0..L {
                let a = &blocks[streams[l].next_pattern(m)];
                let y = ys[l];
                ys[l] = std::array::from_fn(|i| (0..D).map(|j| a[i][j] * y[j]).sum());
            }
            done += 1;
        }
        for l in 0..L {
            let y = &ys[l];
            out[l * k + c] = if y.iter().all(|v| v.is_finite()) { f.eval(y) } else { f64::NAN };
        }
    }
}

fn run_dynamic(stepper: &Stepper, x0: &[f64], f: &Observable, checkpoints: &[usize], stream: &mut NoiseStream, out: &mut [f64]) {
    let mut y = DVector::from_row_slice(x0);
    let mut done = 0;
    let mut alive = true;
    for (slot, &target) in out.iter_mut().zip(checkpoints) {
        while done < target {
            let xi = stream.next_draw(stepper.noises());
            if alive {
                y = stepper.matrix(&xi) * &y;
                alive = y.iter().all(|v| v.is_finite());
            }
            done += 1;
        }
        *slot = if alive { f.eval(y.as_slice()) } else { f64::NAN };
    }
}

/// Monte Carlo means of `f` at each checkpoint step count (strictly increasing, ≥ 1).
pub fn simulate_checkpoints(
    stepper: &Stepper,
    x0: &[f64],
    f: &Observable,
    checkpoints: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<MCEstimate>> {
    if x0.len() != stepper.dim() {
        return Err(Error::mismatch("x0", stepper.dim(), x0.len()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n_samples}")));
    }
    if checkpoints.is_empty() || checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing and positive".into()));
    }
    let k = checkpoints.len();
    let n_leaves = n_samples.div_ceil(LEAF_SIZE);
    let leaves: Vec<Vec<Moments>> = (0..n_leaves)
        .into_par_iter()
        .map(|leaf| {
            let lo = leaf * LEAF_SIZE;
            let hi = (lo + LEAF_SIZE).min(n_samples);
            let mut values = vec![0.0; (hi - lo) * k];
            run_leaf(stepper, x0, f, checkpoints, seed, lo, &mut values);
            (0..k)
                .map(|c| Moments::of(values.iter().skip(c).step_by(k).copied()))
                .collect()
        })
        .collect();
    Ok((0..k)
        .map(|c| {
            let per_leaf: Vec<Moments> = leaves.iter().map(|l| l[c]).collect();
            Moments::tree(&per_leaf).estimate(n_samples, seed)
        })
        .collect())
}

/// `E f(X_T)` by `n_samples` independent trajectories of `stepper` from `x0`.
pub fn weak_estimate(stepper: &Stepper, x0: &[f64], f: &Observable, t: f64, dt: f64, n_samples: usize, seed: u64) -> Result<MCEstimate> {
    let n = steps_for(t, dt)?;
    Ok(simulate_checkpoints(stepper, x0, f, &[n], n_samples, seed)?[0])
}

/// Estimates at every time in `times` (ascending, each a multiple of `dt`) from one set of trajectories.
pub fn weak_curve(stepper: &Stepper, x0: &[f64], f: &Observable, times: &[f64], dt: f64, n_samples: usize, seed: u64) -> Result<Vec<MCEstimate>> {
    let steps = times.iter().map(|t| steps_for(*t, dt)).collect::<Result<Vec<_>>>()?;
    simulate_checkpoints(stepper, x0, f, &steps, n_samples, seed)
}

/// `T·j/n` for `j = 1..=n`.
pub fn time_grid(t: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|j| t * j as f64 / n as f64).collect()
}

/// Weak Euler at a fine step, used where no closed form exists.
pub fn reference_fine_euler(sde: &BilinearSDE, f: &Observable, t: f64, dt_fine: f64, n_samples: usize, seed: u64) -> Result<MCEstimate> {
    Ok(reference_fine_euler_curve(sde, f, &[t], dt_fine, n_samples, seed)?[0])
}

pub fn reference_fine_euler_curve(
    sde: &BilinearSDE,
    f: &Observable,
    times: &[f64],
    dt_fine: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<MCEstimate>> {
    let stepper = Scheme::Euler.prepare(&Problem::Bilinear(sde.clone()), dt_fine)?;
    weak_curve(&stepper, sde.x0.as_slice(), f, times, dt_fine, n_samples, seed)
}

/// How a scalar reference value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureMethod {
    /// No randomness (`t = 0` or `λ = 0`).
    Exact,
    /// Gauss–Hermite with the requested nodes, confirmed by doubling them.
    GaussHermite,
    /// Oscillation-resolving composite Gauss–Legendre with an asymptotic tail term,
    /// confirmed by a second, finer resolution.
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarReference {
    pub value: f64,
    pub method: QuadratureMethod,
    /// Difference between the two resolutions used to validate `value`.
    pub self_check: f64,
    /// Gauss–Hermite values at `nodes` and `2·nodes` (also when rejected).
    pub hermite: Option<(f64, f64)>,
}

/// Agreement required between Gauss–Hermite at `n` and `2n` nodes.
pub const HERMITE_AGREEMENT: f64 = 1e-10;

/// `E f(x0·exp((μ − λ²/2)t + λ√t Z))`, `Z ~ N(0,1)`.
pub fn reference_scalar_gbm(f: &Observable, mu: f64, lambda: f64, x0: f64, t: f64, nodes: usize) -> f64 {
    reference_scalar_gbm_detailed(f, mu, lambda, x0, t, nodes).value
}

/// Gauss–Hermite with `nodes` nodes when a `2·nodes` rule agrees to [`HERMITE_AGREEMENT`];
/// otherwise (rapidly oscillating integrands such as `sin(c·x)` with a wide lognormal) the
/// composite rule.
pub fn reference_scalar_gbm_detailed(f: &Observable, mu: f64, lambda: f64, x0: f64, t: f64, nodes: usize) -> ScalarReference {
    let nodes = nodes.max(1);
    let drift = (mu - 0.5 * lambda * lambda) * t;
    let vol = lambda.abs() * t.max(0.0).sqrt();
    if t <= 0.0 || vol == 0.0 {
        let x = if t <= 0.0 { x0 } else { x0 * drift.exp() };
        return ScalarReference {
            value: f.eval(&[x]),
            method: QuadratureMethod::Exact,
            self_check: 0.0,
            hermite: None,
        };
    }
    let g = |z: f64| f.eval(&[x0 * (drift + vol * z).exp()]);
    let hermite = |n: usize| {
        let rule = GaussRule::hermite(n);
        let s: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| w * g(std::f64::consts::SQRT_2 * x))
            .sum();
        s / std::f64::consts::PI.sqrt()
    };
    let (h1, h2) = (hermite(nodes), hermite(2 * nodes));
    if (h1 - h2).abs() <= HERMITE_AGREEMENT {
        return ScalarReference {
            value: h1,
            method: QuadratureMethod::GaussHermite,
            self_check: (h1 - h2).abs(),
            hermite: Some((h1, h2)),
        };
    }
    let coarse = composite_lognormal(f, x0, drift, vol, 20, 1);
    let fine = composite_lognormal(f, x0, drift, vol, 30, 2);
    ScalarReference {
        value: fine,
        method: QuadratureMethod::Composite,
        self_check: (fine - coarse).abs(),
        hermite: Some((h1, h2)),
    }
}

/// Lower cut in standard-normal units; the mass below is `Φ(−12) ≈ 2e−33`.
const Z_CUT: f64 = 12.0;

/// `E f(x0 e^{drift + vol Z})` by panels in `z` where the integrand is slowly varying and, for
/// `sin(c·x)`, by half-period panels in `u = e^{drift + vol z}` beyond the first half period,
/// closed by the leading integration-by-parts tail term.
fn composite_lognormal(f: &Observable, x0: f64, drift: f64, vol: f64, order: usize, refine: usize) -> f64 {
    let rule = GaussRule::legendre(order);
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let k = match f {
        Observable::SinScaled { c } => (c * x0).abs(),
        Observable::Log1pNorm2 => 0.0,
    };
    let sign = match f {
        Observable::SinScaled { c } => (c * x0).signum(),
        Observable::Log1pNorm2 => 1.0,
    };
    let z_panel = 0.125 / refine as f64;
    let in_z = |a: f64, b: f64| {
        let panels = ((b - a) / z_panel).ceil().max(1.0) as usize;
        composite(&rule, a, b, panels, |z| f.eval(&[x0 * (drift + vol * z).exp()]) * phi(z))
    };
    if k == 0.0 {
        return in_z(-Z_CUT, Z_CUT);
    }

    // z where the phase k·u reaches π
    let z1 = ((std::f64::consts::PI / k).ln() - drift) / vol;
    let mut total = if z1 > -Z_CUT { in_z(-Z_CUT, z1.min(Z_CUT)) } else { 0.0 };
    if z1 >= Z_CUT {
        return total;
    }
    let lognormal_pdf = |u: f64| {
        let z = (u.ln() - drift) / vol;
        phi(z) / (u * vol)
    };
    let half = std::f64::consts::PI / k;
    let sub_rule = rule.clone();
    // p''(u) = p (g² + g'), g = (ln p)' = −(z/vol + 1)/u
    let pdf_second = |u: f64| {
        let z = (u.ln() - drift) / vol;
        let g = -(z / vol + 1.0) / u;
        let dg = (z / vol + 1.0) / (u * u) - 1.0 / (vol * vol * u * u);
        lognormal_pdf(u) * (g * g + dg)
    };
    let mut j: usize = 1;
    let max_panels = 50_000_000usize;
    loop {
        let a = j as f64 * half;
        let b = a + half;
        total += sign * composite(&sub_rule, a, b, refine, |u| (k * u).sin() * lognormal_pdf(u));
        j += 1;
        let p2 = pdf_second(b);
        if (p2 / k.powi(3)).abs() < 1e-18 || j > max_panels {
            // ∫_U^∞ sin(ku) p(u) du = cos(kU) (p(U)/k − p''(U)/k³ + …) with kU = jπ
            let cos_ku = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
            total += sign * cos_ku * (lognormal_pdf(b) / k - p2 / k.powi(3));
            break;
        }
    }
    total
}

/// Where the reference column of an error table comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// Scalar problems: quadrature against the exact lognormal law.
    Quadrature { nodes: usize },
    /// Weak Euler at `dt_fine`, with the stream family `seed`.
    FineEuler { dt_fine: f64, n_samples: usize, seed: u64 },
    /// Given values, one per horizon in the `T` list.
    Fixed { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub t: f64,
    pub value: f64,
    /// Monte Carlo standard error (zero for quadrature and fixed values).
    pub stderr: f64,
}

/// Reference values at each time of `times`.
pub fn reference_values(problem: &Problem, f: &Observable, times: &[f64], spec: &ReferenceSpec) -> Result<Vec<ReferenceValue>> {
    match spec {
        ReferenceSpec::Quadrature { nodes } => {
            let Problem::Scalar(s) = problem else {
                return Err(Error::InvalidArgument("quadrature reference needs a scalar problem".into()));
            };
            Ok(times
                .iter()
                .map(|&t| ReferenceValue {
                    t,
                    value: reference_scalar_gbm(f, s.mu, s.lambda, s.x0, t, *nodes),
                    stderr: 0.0,
                })
                .collect())
        }
        ReferenceSpec::FineEuler { dt_fine, n_samples, seed } => {
            let est = reference_fine_euler_curve(&problem.as_bilinear(), f, times, *dt_fine, *n_samples, *seed)?;
            Ok(times
                .iter()
                .zip(est)
                .map(|(&t, e)| ReferenceValue {
                    t,
                    value: e.mean,
                    stderr: e.stderr,
                })
                .collect())
        }
        ReferenceSpec::Fixed { values } => {
            if values.len() != times.len() {
                return Err(Error::mismatch("reference values", times.len(), values.len()));
            }
            Ok(times
                .iter()
                .zip(values)
                .map(|(&t, &value)| ReferenceValue { t, value, stderr: 0.0 })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub scheme: String,
    pub dt: f64,
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: f64,
    pub abs_error: f64,
    /// Trajectories that overflowed to a non-finite state.
    pub blowup: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub references: Vec<ReferenceValue>,
}

pub const ERROR_TABLE_HEADER: [&str; 8] = ["scheme", "delta", "T", "estimate", "stderr", "reference", "abs_error", "blowup"];

/// Seventeen significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

impl ErrorTable {
    pub fn row(&self, scheme: &str, dt: f64, t: f64) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.dt == dt && r.t == t)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidArgument(format!("writing CSV: {e}"));
        w.write_record(ERROR_TABLE_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.scheme.clone(),
                fmt_real(r.dt),
                fmt_real(r.t),
                fmt_real(r.estimate),
                fmt_real(r.stderr),
                fmt_real(r.reference),
                fmt_real(r.abs_error),
                r.blowup.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(format!("writing CSV: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ASCII output")
    }
}

/// A labelled scheme; `prepare(dt)` builds its stepper.
pub struct SchemeEntry<'a> {
    pub label: String,
    pub prepare: Box<dyn Fn(f64) -> Result<Stepper> + Sync + 'a>,
}

impl<'a> SchemeEntry<'a> {
    pub fn fixed(label: impl Into<String>, scheme: Scheme, problem: &'a Problem) -> Self {
        Self {
            label: label.into(),
            prepare: Box::new(move |dt| scheme.prepare(problem, dt)),
        }
    }
}

/// Every `(scheme, dt, T)` estimate against the reference, rows ordered by scheme, then dt,
/// then T as given. One simulation per `(scheme, dt)` covers all horizons.
pub fn error_table(
    schemes: &[SchemeEntry<'_>],
    problem: &Problem,
    f: &Observable,
    t_list: &[f64],
    dt_list: &[f64],
    n_samples: usize,
    seed: u64,
    reference: &ReferenceSpec,
) -> Result<ErrorTable> {
    if t_list.is_empty() || dt_list.is_empty() || schemes.is_empty() {
        return Err(Error::InvalidArgument("error table needs schemes, horizons and steps".into()));
    }
    let mut sorted_t = t_list.to_vec();
    sorted_t.sort_by(f64::total_cmp);
    sorted_t.dedup();
    for &dt in dt_list {
        for &t in &sorted_t {
            steps_for(t, dt)?;
        }
    }
    let refs = reference_values(problem, f, &sorted_t, reference)?;
    let x0 = problem.x0();
    let mut rows = Vec::new();
    for entry in schemes {
        for &dt in dt_list {
            let stepper = (entry.prepare)(dt)?;
            let steps: Vec<usize> = sorted_t.iter().map(|&t| steps_for(t, dt)).collect::<Result<_>>()?;
            let est = simulate_checkpoints(&stepper, &x0, f, &steps, n_samples, seed)?;
            for &t in t_list {
                let i = sorted_t.iter().position(|v| *v == t).expect("present");
                let e = est[i];
                let reference = refs[i].value;
                rows.push(ErrorRow {
                    scheme: entry.label.clone(),
                    dt,
                    t,
                    estimate: e.mean,
                    stderr: e.stderr,
                    reference,
                    abs_error: (e.mean - reference).abs(),
                    blowup: e.n_nonfinite,
                });
            }
        }
    }
    Ok(ErrorTable { rows, references: refs })
}

/// Least-squares slope of `log(error)` against `log(dt)`.
pub fn convergence_order(dts: &[f64], errors: &[f64]) -> Result<f64> {
    if dts.len() != errors.len() {
        return Err(Error::mismatch("errors", dts.len(), errors.len()));
    }
    if dts.len() < 2 {
        return Err(Error::InvalidArgument("order fit needs at least two points".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!("errors must be positive and finite, got {e}")));
    }
    if let Some(d) = dts.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument(format!("steps must be positive and finite, got {d}")));
    }
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("order fit needs at least two distinct steps".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Thread pool with an explicit worker count, else the environment default, else all cores.
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::InvalidArgument("worker count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_test_equation_2d, ScalarLinearSDE};
    use approx::assert_relative_eq;

    fn quiet() -> Problem {
        Problem::Bilinear(make_test_equation_2d(0.0, 0.0, 0.0, [1.0, 2.0]))
    }

    #[test]
    fn observable_parsing() {
        assert_eq!("sin:0.2".parse::<Observable>().unwrap(), Observable::SinScaled { c: 0.2 });
        assert_eq!("sin:1/5".parse::<Observable>().unwrap(), Observable::SinScaled { c: 0.2 });
        assert_eq!("log1p-norm2".parse::<Observable>().unwrap(), Observable::Log1pNorm2);
        assert!("cos:1".parse::<Observable>().is_err());
        assert_eq!(Observable::Log1pNorm2.eval(&[1.0, 2.0]), 6f64.ln());
    }

    #[test]
    fn deterministic_problem_has_zero_stderr() {
        for scheme in [Scheme::Euler, Scheme::Schurz, Scheme::Heuristic { alpha: None }] {
            let stepper = scheme.prepare(&quiet(), 0.25).unwrap();
            let e = weak_estimate(&stepper, &[1.0, 2.0], &Observable::Log1pNorm2, 1.0, 0.25, 3000, 5).unwrap();
            assert_relative_eq!(e.mean, 6f64.ln(), max_relative = 1e-15);
            assert_eq!(e.stderr, 0.0);
            assert_eq!(e.n_samples, 3000);
            assert_eq!(e.n_nonfinite, 0);
        }
    }

    #[test]
    fn steps_must_hit_the_horizon() {
        assert_eq!(steps_for(3.0, 0.125).unwrap(), 24);
        assert_eq!(steps_for(1.0, 1.0 / 3.0).unwrap(), 3);
        assert!(steps_for(1.0, 0.3).is_err());
        assert!(steps_for(0.0, 0.1).is_err());
        assert!(steps_for(1.0, 0.0).is_err());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let p = Problem::Bilinear(make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]));
        let stepper = Scheme::Schurz.prepare(&p, 1.0 / 8.0).unwrap();
        let run = |w| {
            worker_pool(Some(w))
                .unwrap()
                .install(|| weak_estimate(&stepper, &[1.0, 2.0], &Observable::Log1pNorm2, 1.0, 0.125, 5000, 11).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn checkpoints_agree_with_separate_runs() {
        let p = Problem::Bilinear(make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0]));
        let stepper = Scheme::Euler.prepare(&p, 0.25).unwrap();
        let f = Observable::Log1pNorm2;
        let curve = weak_curve(&stepper, &[1.0, 2.0], &f, &[0.5, 1.0], 0.25, 2000, 3).unwrap();
        let end = weak_estimate(&stepper, &[1.0, 2.0], &f, 1.0, 0.25, 2000, 3).unwrap();
        assert_eq!(curve[1], end);
    }

    #[test]
    fn moments_merge_matches_direct() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.3 - 4.0).collect();
        let leaves: Vec<Moments> = xs.chunks(64).map(|c| Moments::of(c.iter().copied())).collect();
        let merged = Moments::tree(&leaves);
        let direct = Moments::of(xs.iter().copied());
        assert_eq!(merged.n, direct.n);
        assert_relative_eq!(merged.mean, direct.mean, max_relative = 1e-13);
        assert_relative_eq!(merged.m2, direct.m2, max_relative = 1e-12);
        let with_nan = Moments::of([1.0, f64::NAN, 3.0, f64::INFINITY].into_iter());
        assert_eq!((with_nan.n, with_nan.nonfinite, with_nan.mean), (2, 2, 2.0));
    }

    #[test]
    fn blow_up_is_counted() {
        // scalar Euler multiplier 1 ± 40 overflows within a few hundred steps
        let p = Problem::Scalar(ScalarLinearSDE::new(0.0, 40.0, 1.0));
        let stepper = Scheme::Euler.prepare(&p, 1.0).unwrap();
        let e = weak_estimate(&stepper, &[1.0], &Observable::SinScaled { c: 0.2 }, 400.0, 1.0, 10, 0).unwrap();
        assert_eq!(e.n_nonfinite, 10);
        assert!(e.mean.is_nan());
    }

    #[test]
    fn gbm_reference_trivial_cases() {
        let f = Observable::SinScaled { c: 0.2 };
        assert_relative_eq!(reference_scalar_gbm(&f, 0.0, 4.0, 1.0, 0.0, 200), 0.2f64.sin());
        assert_relative_eq!(reference_scalar_gbm(&f, 0.0, 4.0, 1.0, 0.0, 200), 0.198669, epsilon = 1e-6);
        assert_relative_eq!(
            reference_scalar_gbm(&f, -0.7, 0.0, 3.0, 1.3, 200),
            (0.2 * 3.0 * (-0.91f64).exp()).sin(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn gbm_reference_matches_closed_form_moment() {
        // log1p(x²) has no closed form, but E log X does: use x ↦ sin(c x) with tiny c,
        // where sin(c x) ≈ c x and E X = x0 e^{μt}
        let c = 1e-6;
        let v = reference_scalar_gbm(&Observable::SinScaled { c }, 0.1, 0.3, 2.0, 1.5, 200);
        assert_relative_eq!(v / c, 2.0 * (0.15f64).exp(), max_relative = 1e-6);
    }

    #[test]
    fn gbm_reference_oscillatory_case_uses_composite_rule() {
        let r = reference_scalar_gbm_detailed(&Observable::SinScaled { c: 0.2 }, 0.0, 4.0, 1.0, 2.0, 200);
        assert_eq!(r.method, QuadratureMethod::Composite);
        assert!(r.self_check < 1e-12, "{:?}", r);
        // independent adaptive quadrature gives 0.0013734
        assert!((r.value - 0.0013734).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn order_fit_examples() {
        let dts = [0.5, 0.25, 0.125, 0.0625];
        let lin: Vec<f64> = dts.iter().map(|d| 3.0 * d).collect();
        assert_relative_eq!(convergence_order(&dts, &lin).unwrap(), 1.0, epsilon = 1e-14);
        let half: Vec<f64> = dts.iter().map(|d| 3.0 * d.sqrt()).collect();
        assert_relative_eq!(convergence_order(&dts, &half).unwrap(), 0.5, epsilon = 1e-14);
        let s = convergence_order(&[0.125, 0.0625, 0.03125, 0.015625], &[0.035366, 0.0065051, 0.00068084, 0.00031002]).unwrap();
        // numpy.polyfit on the same points: 2.3757757
        assert!((s - 2.3757757).abs() < 1e-6, "{s}");
        assert!(convergence_order(&dts, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(convergence_order(&[0.1], &[1.0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let table = ErrorTable {
            rows: vec![ErrorRow {
                scheme: "euler".into(),
                dt: 0.125,
                t: 3.0,
                estimate: 1.5,
                stderr: 0.01,
                reference: 1.0,
                abs_error: 0.5,
                blowup: 2,
            }],
            references: vec![],
        };
        let s = table.to_csv_string();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "scheme,delta,T,estimate,stderr,reference,abs_error,blowup");
        assert_eq!(
            lines.next().unwrap(),
            "euler,1.2500000000000000e-1,3.0000000000000000e0,1.5000000000000000e0,1.0000000000000000e-2,1.0000000000000000e0,5.0000000000000000e-1,2"
        );
    }

    #[test]
    fn deterministic_error_table_has_zero_errors() {
        let p = quiet();
        let schemes = [SchemeEntry::fixed("general", Scheme::Euler, &p)];
        let t = error_table(
            &schemes,
            &p,
            &Observable::Log1pNorm2,
            &[1.0, 2.0],
            &[0.5, 0.25],
            100,
            1,
            &ReferenceSpec::FineEuler {
                dt_fine: 1.0 / 64.0,
                n_samples: 100,
                seed: 2,
            },
        )
        .unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|r| r.abs_error < 1e-14));
        assert_eq!((t.rows[1].dt, t.rows[1].t), (0.5, 2.0));
    }
}
