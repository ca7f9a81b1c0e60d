//! Stability analysis of the weighted schemes.
//!
//! Scalar side: the admissible set of stabilizing weights `a` for which the
//! stabilized Euler iterate keeps its sign and tends to zero almost surely,
//! a concrete choice of `a(dt)` inside it, and the closed-form expected log
//! multiplier that decides almost-sure stability.
//!
//! Bilinear side: the random amplification matrix of the weighted explicit
//! step, the exact expectation `E log‖A(ξ)x‖` by enumerating all `2ᵐ` sign
//! vectors, its supremum over the unit sphere, and the sphere bound `ℓ` on
//! the top Lyapunov exponent of the exact solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dt, Error, Result};
use crate::linalg::{pairwise_sum, to_row_major};
use crate::model::{BilinearSDE, NoiseDraw, ScalarLinearSDE};
use crate::rng::NoiseStream;
use crate::schemes::{StabilizerParams, Stepper, WeightMatrix};
use crate::sphere::SphereSearch;

/// Largest noise count for which `E log‖A x‖` is enumerated exactly.
pub const MAX_ENUMERATED_NOISES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftRegime {
    MuNegative,
    MuZero,
    MuPositive,
}

/// Open interval; `None` stands for an infinite endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Interval {
    pub fn new(lower: Option<f64>, upper: Option<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower.is_none_or(|l| x > l) && self.upper.is_none_or(|u| x < u)
    }

    pub fn is_empty(&self) -> bool {
        matches!((self.lower, self.upper), (Some(l), Some(u)) if l >= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSet {
    pub p1: f64,
    pub p2: f64,
    pub p3: Option<f64>,
    /// Disjoint, ordered, nonempty.
    pub intervals: Vec<Interval>,
    pub regime: DriftRegime,
}

impl AdmissibleSet {
    pub fn contains(&self, a: f64) -> bool {
        self.intervals.iter().any(|i| i.contains(a))
    }
}

/// Weights `a` for which the stabilized scalar iterate both preserves sign and tends to zero a.s.
pub fn admissible_intervals(mu: f64, lambda: f64, dt: f64) -> Result<AdmissibleSet> {
    check_dt(dt)?;
    if !mu.is_finite() || !lambda.is_finite() {
        return Err(Error::NonFinite { what: "mu/lambda".into() });
    }
    if mu == 0.0 && lambda == 0.0 {
        return Err(Error::Regime("admissible set undefined for mu = 0 and lambda = 0".into()));
    }
    let spread = lambda.abs() * dt.sqrt();
    let p1 = f64::min(1.0, 1.0 - spread + mu * dt) / dt;
    let p2 = f64::max(1.0, 1.0 + spread + mu * dt) / dt;
    let p3 = (mu != 0.0).then(|| (mu * mu * dt + 2.0 * mu - lambda * lambda) / (2.0 * mu * dt));
    let (regime, candidates) = match p3 {
        Some(p3) if mu < 0.0 => (
            DriftRegime::MuNegative,
            vec![Interval::new(None, Some(p1.min(p3))), Interval::new(Some(p2), Some(p3))],
        ),
        Some(p3) => (
            DriftRegime::MuPositive,
            vec![Interval::new(Some(p3), Some(p1)), Interval::new(Some(p2.max(p3)), None)],
        ),
        None => (
            DriftRegime::MuZero,
            vec![Interval::new(None, Some(p1)), Interval::new(Some(p2), None)],
        ),
    };
    Ok(AdmissibleSet {
        p1,
        p2,
        p3,
        intervals: candidates.into_iter().filter(|i| !i.is_empty()).collect(),
        regime,
    })
}

/// Upper end of the allowed `α₂` range, `1/4 + (λ² − 2μ)(2 − μ dt)/(8λ²)`.
pub fn alpha2_upper(mu: f64, lambda: f64, dt: f64) -> f64 {
    0.25 + (lambda * lambda - 2.0 * mu) * (2.0 - mu * dt) / (8.0 * lambda * lambda)
}

/// Stabilizing weight `a(dt)` for the scalar equation, valid whenever `2μ − λ² < 0`.
///
/// `alpha2 = None` picks `1/4 + min(0.01, s)` with `s` the width of the allowed range.
pub fn choose_a(mu: f64, lambda: f64, dt: f64, alpha1: f64, alpha2: Option<f64>, beta: f64) -> Result<f64> {
    check_dt(dt)?;
    if !(2.0 * mu - lambda * lambda < 0.0) {
        return Err(Error::Regime(format!(
            "stability requires 2mu - lambda^2 < 0, got {}",
            2.0 * mu - lambda * lambda
        )));
    }
    if !(alpha1 > 0.25) || !alpha1.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha1 must exceed 1/4, got {alpha1}")));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let l2 = lambda * lambda;
    let a = if mu <= 0.0 {
        mu - alpha1 * l2
    } else if dt < 2.0 / mu {
        let upper = alpha2_upper(mu, lambda, dt);
        let alpha2 = match alpha2 {
            Some(v) if v > 0.25 && v <= upper => v,
            Some(v) => {
                return Err(Error::InvalidArgument(format!(
                    "alpha2 must lie in (1/4, {upper}], got {v}"
                )))
            }
            None => 0.25 + f64::min(0.01, upper - 0.25),
        };
        mu - alpha2 * l2
    } else {
        (1.0 + lambda.abs() * dt.sqrt() + mu * dt) / dt + beta
    };
    let set = admissible_intervals(mu, lambda, dt)?;
    if !set.contains(a) {
        return Err(Error::Regime(format!(
            "chosen a = {a} falls outside the admissible set at dt = {dt} (rounding at a boundary)"
        )));
    }
    Ok(a)
}

/// Both branch multipliers `1 + (μ dt ± λ√dt)/(1 − a dt)`.
pub fn branch_multipliers(mu: f64, lambda: f64, dt: f64, a: f64) -> [f64; 2] {
    let den = 1.0 - a * dt;
    let s = lambda * dt.sqrt();
    [1.0 + (mu * dt + s) / den, 1.0 + (mu * dt - s) / den]
}

/// `E log` of the stabilized multiplier: `½ log((1 + μdt/(1−a dt))² − λ²dt/(1−a dt)²)`.
pub fn expected_log_multiplier(mu: f64, lambda: f64, dt: f64, a: f64) -> Result<f64> {
    check_dt(dt)?;
    let den = 1.0 - a * dt;
    if den == 0.0 {
        return Err(Error::Singular {
            what: "stabilized update (a·dt = 1)".into(),
            rcond: 0.0,
        });
    }
    let lead = 1.0 + mu * dt / den;
    let arg = lead * lead - lambda * lambda * dt / (den * den);
    if !(arg > 0.0) {
        return Err(Error::SignViolation(format!(
            "branch multipliers have non-positive product {arg} (a = {a}, dt = {dt})"
        )));
    }
    Ok(0.5 * arg.ln())
}

/// `A(ξ) = I + (I + dt M)(dt B + Σₖ √dt ξᵏ σᵏ)`.
pub fn amplification_matrix(sde: &BilinearSDE, dt: f64, m: &WeightMatrix, xi: &NoiseDraw) -> Result<DMatrix<f64>> {
    check_dt(dt)?;
    check_weight(sde, m)?;
    if xi.len() != sde.m {
        return Err(Error::mismatch("noise draw", sde.m, xi.len()));
    }
    let d = sde.d;
    let mut k = &sde.drift * dt;
    for (s, e) in sde.sigmas.iter().zip(xi.signs()) {
        k += s * (dt.sqrt() * e);
    }
    Ok(DMatrix::identity(d, d) + (DMatrix::identity(d, d) + m.matrix() * dt) * k)
}

fn check_weight(sde: &BilinearSDE, m: &WeightMatrix) -> Result<()> {
    if m.matrix().nrows() != sde.d || m.matrix().ncols() != sde.d {
        return Err(Error::mismatch(
            "M",
            format!("{0}x{0}", sde.d),
            format!("{}x{}", m.matrix().nrows(), m.matrix().ncols()),
        ));
    }
    if m.matrix().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "M".into() });
    }
    Ok(())
}

/// Exact `x ↦ E log‖A(ξ)x‖` for fixed `(sde, dt, M)`.
///
/// Writes `A(ξ)x = u₀ + Σₖ ξᵏ uₖ` and sums over all sign patterns in a fixed order.
#[derive(Debug, Clone)]
pub struct GrowthEvaluator {
    d: usize,
    m: usize,
    /// `I + dt (I + dt M) B`, row-major
    base: Vec<f64>,
    /// `√dt (I + dt M) σᵏ`, row-major
    parts: Vec<Vec<f64>>,
}

impl GrowthEvaluator {
    pub fn new(sde: &BilinearSDE, dt: f64, m: &WeightMatrix) -> Result<Self> {
        check_dt(dt)?;
        check_weight(sde, m)?;
        if sde.m > MAX_ENUMERATED_NOISES {
            return Err(Error::InvalidArgument(format!(
                "exact enumeration supports at most {MAX_ENUMERATED_NOISES} noises, got {}",
                sde.m
            )));
        }
        let id = DMatrix::<f64>::identity(sde.d, sde.d);
        let left = &id + m.matrix() * dt;
        Ok(Self {
            d: sde.d,
            m: sde.m,
            base: to_row_major(&(&id + &left * &sde.drift * dt)),
            parts: sde
                .sigmas
                .iter()
                .map(|s| to_row_major(&(&left * s * dt.sqrt())))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn expected_log_growth(&self, x: &[f64]) -> Result<f64> {
        let d = self.d;
        let matvec = |a: &[f64], out: &mut Vec<f64>| {
            out.clear();
            out.extend((0..d).map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>()));
        };
        let mut u0 = Vec::with_capacity(d);
        matvec(&self.base, &mut u0);
        let us: Vec<Vec<f64>> = self
            .parts
            .iter()
            .map(|p| {
                let mut u = Vec::with_capacity(d);
                matvec(p, &mut u);
                u
            })
            .collect();
        let n_patterns = 1usize << self.m;
        let mut logs = Vec::with_capacity(n_patterns);
        let mut y = vec![0.0; d];
        for pattern in 0..n_patterns {
            y.copy_from_slice(&u0);
            for (k, u) in us.iter().enumerate() {
                if (pattern >> k) & 1 == 1 {
                    y.iter_mut().zip(u).for_each(|(a, b)| *a -= b);
                } else {
                    y.iter_mut().zip(u).for_each(|(a, b)| *a += b);
                }
            }
            let norm2: f64 = y.iter().map(|v| v * v).sum();
            if norm2 == 0.0 {
                return Err(Error::DegenerateDirection);
            }
            logs.push(0.5 * norm2.ln());
        }
        Ok(pairwise_sum(&logs) / n_patterns as f64)
    }

    /// `sup_{‖x‖=1} E log‖A x‖` and an attaining direction (not divided by `dt`).
    pub fn sup(&self, search: &SphereSearch) -> Result<(f64, Vec<f64>)> {
        search.maximize(self.d, |x| self.expected_log_growth(x))
    }
}

fn check_unit(x: &DVector<f64>, d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::mismatch("direction", d, x.len()));
    }
    if (x.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("direction must have unit norm, got {}", x.norm())));
    }
    Ok(())
}

/// `E log‖A(ξ)x‖` for a unit vector `x`.
pub fn expected_log_growth(sde: &BilinearSDE, dt: f64, m: &WeightMatrix, x: &DVector<f64>) -> Result<f64> {
    check_unit(x, sde.d)?;
    GrowthEvaluator::new(sde, dt, m)?.expected_log_growth(x.as_slice())
}

/// Supremum of `E log‖A(ξ)x‖` over the unit sphere and an attaining direction.
pub fn sup_expected_log_growth(sde: &BilinearSDE, dt: f64, m: &WeightMatrix) -> Result<(f64, DVector<f64>)> {
    let (v, x) = GrowthEvaluator::new(sde, dt, m)?.sup(&SphereSearch::default())?;
    Ok((v, DVector::from_vec(x)))
}

/// `x ↦ ⟨x,Bx⟩ + ½Σ‖σᵏx‖² − Σ⟨x,σᵏx⟩²`
pub fn lyapunov_integrand(sde: &BilinearSDE, x: &DVector<f64>) -> f64 {
    let mut h = x.dot(&(&sde.drift * x));
    for s in &sde.sigmas {
        let sx = s * x;
        let q = x.dot(&sx);
        h += 0.5 * sx.norm_squared() - q * q;
    }
    h
}

/// Sphere bound `ℓ` on the top Lyapunov exponent, with an attaining direction.
pub fn lyapunov_bound_ell(sde: &BilinearSDE) -> Result<(f64, DVector<f64>)> {
    let (v, x) = SphereSearch::default().maximize(sde.d, |x| Ok(lyapunov_integrand(sde, &DVector::from_row_slice(x))))?;
    Ok((v, DVector::from_vec(x)))
}

/// Closed form `ℓ = (ε² − σ₂²)/2` of the 2×2 test system, valid for `0 < σ₂ < σ₁ < 3σ₂`.
pub fn lyapunov_bound_exact_2d(sigma1: f64, sigma2: f64, eps: f64) -> Result<f64> {
    if !(0.0 < sigma2 && sigma2 < sigma1 && sigma1 < 3.0 * sigma2) {
        return Err(Error::Regime(format!(
            "closed-form bound needs 0 < sigma2 < sigma1 < 3 sigma2, got sigma1 = {sigma1}, sigma2 = {sigma2}"
        )));
    }
    Ok((eps * eps - sigma2 * sigma2) / 2.0)
}

/// Empirical exponential rate of a path; a path that reached exactly zero has no finite rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrowthRate {
    Rate(f64),
    CollapsedToZero,
}

impl GrowthRate {
    pub fn value(self) -> Option<f64> {
        match self {
            GrowthRate::Rate(r) => Some(r),
            GrowthRate::CollapsedToZero => None,
        }
    }
}

/// `(1/(n dt)) log(‖Vₙ‖/‖V₀‖)` over a stored path.
pub fn growth_rate_estimate(path: &[DVector<f64>], dt: f64) -> Result<GrowthRate> {
    check_dt(dt)?;
    if path.len() < 2 {
        return Err(Error::InvalidArgument("growth rate needs at least two states".into()));
    }
    let start = path[0].norm();
    if start == 0.0 || !start.is_finite() {
        return Err(Error::InvalidArgument("initial state must be nonzero and finite".into()));
    }
    let n = path.len() - 1;
    let end = path[n].norm();
    if end == 0.0 {
        return Ok(GrowthRate::CollapsedToZero);
    }
    Ok(GrowthRate::Rate((end.ln() - start.ln()) / (n as f64 * dt)))
}

/// Same quantity as [`growth_rate_estimate`] for a path simulated with `stepper`, but
/// renormalizing after every step so long runs neither underflow nor overflow.
pub fn simulate_growth_rate(
    stepper: &Stepper,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    stream: &mut NoiseStream,
) -> Result<GrowthRate> {
    check_dt(dt)?;
    if n_steps == 0 {
        return Err(Error::InvalidArgument("growth rate needs at least one step".into()));
    }
    let start = x0.norm();
    if start == 0.0 || !start.is_finite() {
        return Err(Error::InvalidArgument("initial state must be nonzero and finite".into()));
    }
    let mut y = x0 / start;
    let mut log_norm = 0.0;
    for _ in 0..n_steps {
        let xi = stream.next_draw(stepper.noises());
        y = stepper.step(&y, &xi)?;
        let n = y.norm();
        if n == 0.0 {
            return Ok(GrowthRate::CollapsedToZero);
        }
        log_norm += n.ln();
        y /= n;
    }
    Ok(GrowthRate::Rate(log_norm / (n_steps as f64 * dt)))
}

/// Summary of how well a weight matrix matches the sphere bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub ell: f64,
    /// `(1/dt) sup E log‖A x‖`
    pub sup_log_growth: f64,
    pub sup_direction: Vec<f64>,
    /// `(sup_log_growth − ell)²`
    pub objective: f64,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_log_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<Interval>>,
}

impl StabilityReport {
    pub fn bilinear(sde: &BilinearSDE, dt: f64, m: &WeightMatrix) -> Result<Self> {
        let (ell, _) = lyapunov_bound_ell(sde)?;
        let (sup, dir) = sup_expected_log_growth(sde, dt, m)?;
        let sup_log_growth = sup / dt;
        Ok(Self {
            ell,
            sup_log_growth,
            sup_direction: dir.iter().copied().collect(),
            objective: (sup_log_growth - ell).powi(2),
            p1: None,
            p2: None,
            p3: None,
            a: None,
            expected_log_multiplier: None,
            intervals: None,
        })
    }

    /// Scalar report for the stabilized scheme; `ell` is the exact exponent `μ − λ²/2`.
    pub fn scalar(sde: &ScalarLinearSDE, dt: f64, params: &StabilizerParams) -> Result<Self> {
        let set = admissible_intervals(sde.mu, sde.lambda, dt)?;
        let elog = expected_log_multiplier(sde.mu, sde.lambda, dt, params.a)?;
        let ell = sde.mu - sde.lambda * sde.lambda / 2.0;
        let sup_log_growth = elog / dt;
        Ok(Self {
            ell,
            sup_log_growth,
            sup_direction: vec![1.0],
            objective: (sup_log_growth - ell).powi(2),
            p1: Some(set.p1),
            p2: Some(set.p2),
            p3: set.p3,
            a: Some(params.a),
            expected_log_multiplier: Some(elog),
            intervals: Some(set.intervals),
        })
    }
}
