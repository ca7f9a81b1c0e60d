//! One-step maps of the weak schemes, all driven by two-point increments ξ = ±1.
//!
//! The free `step_*` functions evaluate each scheme straight from its defining
//! formula. [`Stepper`] is the prepared form used by the simulators: every
//! scheme here is linear in the state, so for a fixed `dt` one step is
//! `y ↦ A(ξ) y` with one of `2ᵐ` matrices, which are computed once.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dt, Error, Result};
use crate::linalg::{to_row_major, Factorized};
use crate::model::{BilinearSDE, NoiseDraw, Problem, ScalarLinearSDE};
use crate::rng::NoiseStream;
use crate::stability;

/// Default `αₖ` of the heuristic weight `H = B − Σ αₖ (σᵏ)ᵀσᵏ`.
pub const DEFAULT_ALPHA: f64 = 0.26;

/// Largest noise count for which a [`Stepper`] tabulates all `2ᵐ` one-step matrices.
pub const MAX_TABLE_NOISES: usize = 12;

/// Weights of the stabilized scalar scheme; `a` is the one actually used by the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizerParams {
    pub a: f64,
    pub alpha1: f64,
    pub alpha2: Option<f64>,
    pub beta: f64,
}

impl StabilizerParams {
    pub const DEFAULT_ALPHA1: f64 = 0.26;
    pub const DEFAULT_BETA: f64 = 1.0;

    /// Uses a given `a` directly.
    pub fn with_a(a: f64) -> Self {
        Self {
            a,
            alpha1: Self::DEFAULT_ALPHA1,
            alpha2: None,
            beta: Self::DEFAULT_BETA,
        }
    }

    /// Picks `a(dt)` with [`stability::choose_a`].
    pub fn chosen(sde: &ScalarLinearSDE, dt: f64, alpha1: f64, alpha2: Option<f64>, beta: f64) -> Result<Self> {
        let a = stability::choose_a(sde.mu, sde.lambda, dt, alpha1, alpha2, beta)?;
        Ok(Self { a, alpha1, alpha2, beta })
    }
}

/// Constant weights `c⁰, c¹…cᵐ` of the balanced method.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedWeights {
    pub c0: DMatrix<f64>,
    pub cks: Vec<DMatrix<f64>>,
}

impl BalancedWeights {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            c0: DMatrix::zeros(d, d),
            cks: vec![DMatrix::zeros(d, d); m],
        }
    }

    /// Single damping term `c¹ = diag(Σₖ Σⱼ |σᵏᵢⱼ|)`, all other weights zero.
    ///
    /// For the 2×2 test system this is `diag(|σ₁|+|ε|, |σ₂|+|ε|)`; for a scalar
    /// equation it is `|λ|`.
    pub fn row_abs_damping(sde: &BilinearSDE) -> Self {
        let mut w = Self::zeros(sde.d, sde.m);
        for i in 0..sde.d {
            w.cks[0][(i, i)] = sde
                .sigmas
                .iter()
                .map(|s| s.row(i).iter().map(|v| v.abs()).sum::<f64>())
                .sum();
        }
        w
    }

    fn check(&self, sde: &BilinearSDE) -> Result<()> {
        check_square(&self.c0, sde.d, "c0")?;
        if self.cks.len() != sde.m {
            return Err(Error::mismatch("balanced weights", format!("{} matrices", sde.m), self.cks.len()));
        }
        for (k, c) in self.cks.iter().enumerate() {
            check_square(c, sde.d, &format!("c{}", k + 1))?;
        }
        Ok(())
    }

    /// `D = I + c⁰dt + Σₖ cᵏ√dt` (with ξ = ±1 every `|ΔWᵏ|` equals `√dt`).
    fn damping_matrix(&self, dt: f64) -> DMatrix<f64> {
        let d = self.c0.nrows();
        let mut dmat = DMatrix::identity(d, d) + &self.c0 * dt;
        for c in &self.cks {
            dmat += c * dt.sqrt();
        }
        dmat
    }
}

/// A constant `d×d` weight such as `M(Δ)` or `H(Δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(pub DMatrix<f64>);

impl WeightMatrix {
    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

fn check_square(a: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::mismatch(what, format!("{d}x{d}"), format!("{}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: what.into() });
    }
    Ok(())
}

fn check_step_args(sde: &BilinearSDE, y: &DVector<f64>, dt: f64, xi: &NoiseDraw) -> Result<()> {
    check_dt(dt)?;
    if y.len() != sde.d {
        return Err(Error::mismatch("state", sde.d, y.len()));
    }
    if xi.len() != sde.m {
        return Err(Error::mismatch("noise draw", sde.m, xi.len()));
    }
    Ok(())
}

/// `Σₖ √dt ξᵏ σᵏ y`
fn noise_term(sde: &BilinearSDE, y: &DVector<f64>, dt: f64, xi: &NoiseDraw) -> DVector<f64> {
    let sq = dt.sqrt();
    let mut acc = DVector::zeros(sde.d);
    for (s, e) in sde.sigmas.iter().zip(xi.signs()) {
        acc += (s * y) * (sq * e);
    }
    acc
}

/// `Σₖ αₖ (σᵏ)ᵀσᵏ`
fn weighted_gram(sde: &BilinearSDE, alpha: &[f64]) -> Result<DMatrix<f64>> {
    if alpha.len() != sde.m {
        return Err(Error::mismatch("alpha", sde.m, alpha.len()));
    }
    let mut g = DMatrix::zeros(sde.d, sde.d);
    for (s, a) in sde.sigmas.iter().zip(alpha) {
        g += (s.transpose() * s) * *a;
    }
    Ok(g)
}

/// Weak Euler: `y + B y dt + Σₖ σᵏ y √dt ξᵏ`.
pub fn step_euler_weak(sde: &BilinearSDE, y: &DVector<f64>, dt: f64, xi: &NoiseDraw) -> Result<DVector<f64>> {
    check_step_args(sde, y, dt, xi)?;
    Ok(y + (&sde.drift * y) * dt + noise_term(sde, y, dt, xi))
}

fn require_zero_drift(sde: &ScalarLinearSDE, scheme: &str) -> Result<()> {
    if sde.mu != 0.0 {
        return Err(Error::InvalidArgument(format!("{scheme} scheme is defined for mu = 0, got {}", sde.mu)));
    }
    Ok(())
}

fn check_sign(xi: f64) -> Result<()> {
    if xi == 1.0 || xi == -1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("noise entries must be ±1, got {xi}")))
    }
}

/// Fully implicit scalar scheme: `y / (1 + λ²dt − λ√dt ξ)`.
pub fn step_implicit_scalar(sde: &ScalarLinearSDE, y: f64, dt: f64, xi: f64) -> Result<f64> {
    check_dt(dt)?;
    check_sign(xi)?;
    require_zero_drift(sde, "fully implicit")?;
    let l = sde.lambda;
    // bounded below by 3/4, never singular
    Ok(y / (1.0 + l * l * dt - l * dt.sqrt() * xi))
}

/// Weak balanced scheme with damping `λ√dt`: `y (1 + λ√dt ξ + λ√dt) / (1 + λ√dt)`.
pub fn step_milstein_balanced_scalar(sde: &ScalarLinearSDE, y: f64, dt: f64, xi: f64) -> Result<f64> {
    check_dt(dt)?;
    check_sign(xi)?;
    require_zero_drift(sde, "balanced")?;
    let c = sde.lambda * dt.sqrt();
    let den = 1.0 + c;
    if den == 0.0 {
        return Err(Error::Singular {
            what: "balanced denominator 1 + λ√dt".into(),
            rcond: 0.0,
        });
    }
    Ok(y * (1.0 + c * xi + c) / den)
}

/// Stabilized Euler: `y (1 + (μ dt + λ√dt ξ) / (1 − a dt))`.
pub fn step_stabilized_scalar(sde: &ScalarLinearSDE, y: f64, dt: f64, xi: f64, params: &StabilizerParams) -> Result<f64> {
    check_dt(dt)?;
    check_sign(xi)?;
    let den = 1.0 - params.a * dt;
    if den == 0.0 {
        return Err(Error::Singular {
            what: "stabilized update (a·dt = 1)".into(),
            rcond: 0.0,
        });
    }
    Ok(y * (1.0 + (sde.mu * dt + sde.lambda * dt.sqrt() * xi) / den))
}

/// Semi-implicit balanced step with `H = B − Σ αₖ(σᵏ)ᵀσᵏ`.
///
/// Solves `(I − dt B + dt S) y' = y + dt S y + Σₖ σᵏ y √dt ξᵏ` with `S = Σ αₖ(σᵏ)ᵀσᵏ`.
pub fn step_heuristic_balanced(
    sde: &BilinearSDE,
    y: &DVector<f64>,
    dt: f64,
    xi: &NoiseDraw,
    alpha: &[f64],
) -> Result<DVector<f64>> {
    check_step_args(sde, y, dt, xi)?;
    let s = weighted_gram(sde, alpha)?;
    let lhs = DMatrix::identity(sde.d, sde.d) - &sde.drift * dt + &s * dt;
    let rhs = y + (&s * y) * dt + noise_term(sde, y, dt, xi);
    Ok(Factorized::new(&lhs, "heuristic left-hand matrix")?.solve(&rhs))
}

/// Weighted explicit step `y + (I + dt M)(dt B + Σₖ √dt ξᵏ σᵏ) y`.
pub fn step_general_balanced(
    sde: &BilinearSDE,
    y: &DVector<f64>,
    dt: f64,
    xi: &NoiseDraw,
    m: &WeightMatrix,
) -> Result<DVector<f64>> {
    check_step_args(sde, y, dt, xi)?;
    check_square(m.matrix(), sde.d, "M")?;
    let increment = (&sde.drift * y) * dt + noise_term(sde, y, dt, xi);
    Ok(y + &increment + (m.matrix() * increment) * dt)
}

/// Balanced step with constant weights: solves `D (y' − y) = B y dt + Σₖ σᵏ y √dt ξᵏ`.
pub fn step_balanced_ck(
    sde: &BilinearSDE,
    y: &DVector<f64>,
    dt: f64,
    xi: &NoiseDraw,
    w: &BalancedWeights,
) -> Result<DVector<f64>> {
    check_step_args(sde, y, dt, xi)?;
    w.check(sde)?;
    let dmat = w.damping_matrix(dt);
    let rhs = (&sde.drift * y) * dt + noise_term(sde, y, dt, xi);
    Ok(y + Factorized::new(&dmat, "balanced damping matrix")?.solve(&rhs))
}

/// Scheme names as used on the command line and in tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeId {
    Euler,
    Implicit,
    MilsteinBalanced,
    Stabilized,
    Heuristic,
    General,
    Schurz,
}

impl SchemeId {
    pub const ALL: [SchemeId; 7] = [
        SchemeId::Euler,
        SchemeId::Implicit,
        SchemeId::MilsteinBalanced,
        SchemeId::Stabilized,
        SchemeId::Heuristic,
        SchemeId::General,
        SchemeId::Schurz,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::Euler => "euler",
            SchemeId::Implicit => "implicit",
            SchemeId::MilsteinBalanced => "milstein-balanced",
            SchemeId::Stabilized => "stabilized",
            SchemeId::Heuristic => "heuristic",
            SchemeId::General => "general",
            SchemeId::Schurz => "schurz",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeId::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SchemeId::ALL.iter().map(|id| id.as_str()).collect();
                Error::InvalidArgument(format!("unknown scheme '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// A scheme together with the weights it needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Euler,
    /// Scalar fully implicit (μ = 0 only).
    Implicit,
    /// Scalar weak balanced scheme (μ = 0 only).
    MilsteinBalanced,
    /// Scalar stabilized Euler; `a` is chosen per `dt` unless fixed.
    Stabilized {
        alpha1: f64,
        alpha2: Option<f64>,
        beta: f64,
        fixed_a: Option<f64>,
    },
    Heuristic { alpha: Option<Vec<f64>> },
    General(WeightMatrix),
    Balanced(BalancedWeights),
    /// Balanced scheme with [`BalancedWeights::row_abs_damping`].
    Schurz,
}

impl Scheme {
    pub fn stabilized_default() -> Self {
        Scheme::Stabilized {
            alpha1: StabilizerParams::DEFAULT_ALPHA1,
            alpha2: None,
            beta: StabilizerParams::DEFAULT_BETA,
            fixed_a: None,
        }
    }

    /// Resolves weights for `dt` and tabulates the one-step matrices.
    pub fn prepare(&self, problem: &Problem, dt: f64) -> Result<Stepper> {
        check_dt(dt)?;
        let scalar = |name: &str| match problem {
            Problem::Scalar(s) => Ok(*s),
            Problem::Bilinear(_) => Err(Error::InvalidArgument(format!("{name} scheme needs a scalar problem"))),
        };
        let sde = problem.as_bilinear();
        let d = sde.d;
        let id = DMatrix::<f64>::identity(d, d);
        let noise_parts = |left: &DMatrix<f64>| -> Vec<DMatrix<f64>> {
            sde.sigmas.iter().map(|s| left * s * dt.sqrt()).collect()
        };
        let affine = match self {
            Scheme::Euler => Affine {
                lhs: None,
                base: &id + &sde.drift * dt,
                per_noise: noise_parts(&id),
            },
            Scheme::Implicit => {
                let s = scalar("implicit")?;
                let mults = [
                    step_implicit_scalar(&s, 1.0, dt, 1.0)?,
                    step_implicit_scalar(&s, 1.0, dt, -1.0)?,
                ];
                return Ok(Stepper::from_table(1, 1, mults.to_vec()));
            }
            Scheme::MilsteinBalanced => {
                let s = scalar("milstein-balanced")?;
                let mults = [
                    step_milstein_balanced_scalar(&s, 1.0, dt, 1.0)?,
                    step_milstein_balanced_scalar(&s, 1.0, dt, -1.0)?,
                ];
                return Ok(Stepper::from_table(1, 1, mults.to_vec()));
            }
            Scheme::Stabilized {
                alpha1,
                alpha2,
                beta,
                fixed_a,
            } => {
                let s = scalar("stabilized")?;
                let params = match fixed_a {
                    Some(a) => StabilizerParams::with_a(*a),
                    None => StabilizerParams::chosen(&s, dt, *alpha1, *alpha2, *beta)?,
                };
                let mults = [
                    step_stabilized_scalar(&s, 1.0, dt, 1.0, &params)?,
                    step_stabilized_scalar(&s, 1.0, dt, -1.0, &params)?,
                ];
                return Ok(Stepper::from_table(1, 1, mults.to_vec()));
            }
            Scheme::Heuristic { alpha } => {
                let alpha = alpha.clone().unwrap_or_else(|| vec![DEFAULT_ALPHA; sde.m]);
                let g = weighted_gram(&sde, &alpha)?;
                let lhs = &id - &sde.drift * dt + &g * dt;
                Affine {
                    lhs: Some(Factorized::new(&lhs, "heuristic left-hand matrix")?),
                    base: &id + &g * dt,
                    per_noise: noise_parts(&id),
                }
            }
            Scheme::General(m) => {
                check_square(m.matrix(), d, "M")?;
                let left = &id + m.matrix() * dt;
                Affine {
                    lhs: None,
                    base: &id + &left * &sde.drift * dt,
                    per_noise: noise_parts(&left),
                }
            }
            Scheme::Balanced(w) => balanced_affine(&sde, w, dt)?,
            Scheme::Schurz => balanced_affine(&sde, &BalancedWeights::row_abs_damping(&sde), dt)?,
        };
        Ok(Stepper::from_affine(d, sde.m, affine))
    }
}

fn balanced_affine(sde: &BilinearSDE, w: &BalancedWeights, dt: f64) -> Result<Affine> {
    w.check(sde)?;
    let dmat = w.damping_matrix(dt);
    Ok(Affine {
        lhs: Some(Factorized::new(&dmat, "balanced damping matrix")?),
        base: &dmat + &sde.drift * dt,
        per_noise: sde.sigmas.iter().map(|s| s * dt.sqrt()).collect(),
    })
}

/// `y' = P⁻¹ (C + Σₖ ξᵏ Sₖ) y`
#[derive(Debug, Clone)]
struct Affine {
    lhs: Option<Factorized>,
    base: DMatrix<f64>,
    per_noise: Vec<DMatrix<f64>>,
}

impl Affine {
    fn matrix(&self, xi: &[f64]) -> DMatrix<f64> {
        let mut a = self.base.clone();
        for (s, e) in self.per_noise.iter().zip(xi) {
            a += s * *e;
        }
        match &self.lhs {
            Some(f) => f.solve_matrix(&a),
            None => a,
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    /// `2ᵐ` row-major `d×d` blocks indexed by noise pattern.
    Table(Vec<f64>),
    Direct(Affine),
}

/// A scheme prepared for one `(problem, dt)` pair.
#[derive(Debug, Clone)]
pub struct Stepper {
    d: usize,
    m: usize,
    repr: Repr,
}

impl Stepper {
    fn from_table(d: usize, m: usize, table: Vec<f64>) -> Self {
        debug_assert_eq!(table.len(), (1 << m) * d * d);
        Self {
            d,
            m,
            repr: Repr::Table(table),
        }
    }

    fn from_affine(d: usize, m: usize, affine: Affine) -> Self {
        if m <= MAX_TABLE_NOISES {
            let mut table = Vec::with_capacity((1 << m) * d * d);
            for p in 0..1usize << m {
                table.extend(to_row_major(&affine.matrix(NoiseDraw::from_pattern(p, m).signs())));
            }
            Self::from_table(d, m, table)
        } else {
            Self {
                d,
                m,
                repr: Repr::Direct(affine),
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noises(&self) -> usize {
        self.m
    }

    pub fn is_tabulated(&self) -> bool {
        matches!(self.repr, Repr::Table(_))
    }

    /// Row-major block for a noise pattern, when tabulated.
    #[inline]
    pub fn table_block(&self, pattern: usize) -> Option<&[f64]> {
        match &self.repr {
            Repr::Table(t) => {
                let n = self.d * self.d;
                Some(&t[pattern * n..(pattern + 1) * n])
            }
            Repr::Direct(_) => None,
        }
    }

    /// The one-step matrix `A(ξ)`.
    pub fn matrix(&self, xi: &NoiseDraw) -> DMatrix<f64> {
        match &self.repr {
            Repr::Table(_) => {
                let block = self.table_block(xi.pattern()).expect("tabulated");
                DMatrix::from_row_slice(self.d, self.d, block)
            }
            Repr::Direct(a) => a.matrix(xi.signs()),
        }
    }

    pub fn step(&self, y: &DVector<f64>, xi: &NoiseDraw) -> Result<DVector<f64>> {
        if y.len() != self.d {
            return Err(Error::mismatch("state", self.d, y.len()));
        }
        if xi.len() != self.m {
            return Err(Error::mismatch("noise draw", self.m, xi.len()));
        }
        Ok(self.matrix(xi) * y)
    }
}

/// Iterates `step` from `x0`, drawing one noise vector per step; returns all `n_steps + 1` states.
pub fn simulate_path<F>(
    x0: &DVector<f64>,
    m: usize,
    n_steps: usize,
    stream: &mut NoiseStream,
    mut step: F,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(&DVector<f64>, &NoiseDraw) -> Result<DVector<f64>>,
{
    let mut path = Vec::with_capacity(n_steps + 1);
    path.push(x0.clone());
    for n in 0..n_steps {
        let xi = stream.next_draw(m);
        let next = step(&path[n], &xi).map_err(|e| Error::StepFailed {
            step: n,
            source: Box::new(e),
        })?;
        path.push(next);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_test_equation_2d;
    use approx::assert_relative_eq;

    fn ede() -> BilinearSDE {
        make_test_equation_2d(7.0, 4.0, 1.0, [1.0, 2.0])
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn plus2() -> NoiseDraw {
        NoiseDraw::new(vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn euler_examples() {
        let zero = make_test_equation_2d(0.0, 0.0, 0.0, [1.0, 2.0]);
        assert_eq!(step_euler_weak(&zero, &v(&[1.0, 2.0]), 0.1, &plus2()).unwrap(), v(&[1.0, 2.0]));
        let y = step_euler_weak(&ede(), &v(&[1.0, 0.0]), 1.0 / 16.0, &plus2()).unwrap();
        assert_relative_eq!(y[0], 2.75, max_relative = 1e-15);
        assert_relative_eq!(y[1], 0.25, max_relative = 1e-15);
        let scalar = ScalarLinearSDE::new(0.0, 4.0, 1.0).to_bilinear();
        let y = step_euler_weak(&scalar, &v(&[1.0]), 1.0 / 16.0, &NoiseDraw::new(vec![1.0]).unwrap()).unwrap();
        assert_relative_eq!(y[0], 2.0, max_relative = 1e-15);
        assert!(matches!(
            step_euler_weak(&ede(), &v(&[1.0, 0.0]), 0.0, &plus2()),
            Err(Error::NonPositiveStep(_))
        ));
    }

    #[test]
    fn scalar_examples() {
        let s = ScalarLinearSDE::new(0.0, 4.0, 1.0);
        let dt = 1.0 / 16.0;
        assert_relative_eq!(step_implicit_scalar(&s, 1.0, dt, 1.0).unwrap(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(step_implicit_scalar(&s, 1.0, dt, -1.0).unwrap(), 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(step_milstein_balanced_scalar(&s, 1.0, dt, 1.0).unwrap(), 1.5, max_relative = 1e-15);
        assert_relative_eq!(step_milstein_balanced_scalar(&s, 1.0, dt, -1.0).unwrap(), 0.5, max_relative = 1e-15);
        let p = StabilizerParams::with_a(-4.16);
        assert_relative_eq!(
            step_stabilized_scalar(&s, 1.0, dt, 1.0, &p).unwrap(),
            1.0 + 1.0 / 1.26,
            max_relative = 1e-15
        );
        let minus = step_stabilized_scalar(&s, 1.0, dt, -1.0, &p).unwrap();
        assert_relative_eq!(minus, 1.0 - 1.0 / 1.26, max_relative = 1e-14);
        assert!(minus > 0.0);
        let decay = ScalarLinearSDE::new(-1.0, 0.0, 2.0);
        let p = StabilizerParams::with_a(-1.0);
        assert_relative_eq!(step_stabilized_scalar(&decay, 2.0, 1.0, 1.0, &p).unwrap(), 1.0);

        let quiet = ScalarLinearSDE::new(0.0, 0.0, 1.0);
        assert_eq!(step_implicit_scalar(&quiet, 3.0, dt, -1.0).unwrap(), 3.0);
        assert_eq!(step_milstein_balanced_scalar(&quiet, 3.0, dt, -1.0).unwrap(), 3.0);
    }

    #[test]
    fn scalar_errors() {
        let s = ScalarLinearSDE::new(0.0, -4.0, 1.0);
        // 1 + λ√dt = 0 at dt = 1/16
        assert!(matches!(
            step_milstein_balanced_scalar(&s, 1.0, 1.0 / 16.0, 1.0),
            Err(Error::Singular { .. })
        ));
        let p = StabilizerParams::with_a(2.0);
        assert!(matches!(
            step_stabilized_scalar(&s, 1.0, 0.5, 1.0, &p),
            Err(Error::Singular { .. })
        ));
        assert!(step_implicit_scalar(&ScalarLinearSDE::new(1.0, 1.0, 1.0), 1.0, 0.1, 1.0).is_err());
        assert!(step_implicit_scalar(&s, 1.0, -0.1, 1.0).is_err());
        assert!(step_implicit_scalar(&s, 1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn implicit_denominator_bound() {
        for &l in &[-10.0, -2.0, -0.3, 0.0, 0.7, 2.0, 4.0, 50.0] {
            for &dt in &[1e-6, 1e-3, 0.01, 1.0 / 16.0, 0.5, 1.0, 4.0] {
                for xi in [1.0, -1.0] {
                    let den = 1.0 + l * l * dt - l * f64::sqrt(dt) * xi;
                    assert!(den >= 0.75 - 1e-15, "{l} {dt} {xi}");
                }
            }
        }
    }

    #[test]
    fn heuristic_matches_independent_solve() {
        let dt = 1.0 / 16.0;
        let y = step_heuristic_balanced(&ede(), &v(&[1.0, 2.0]), dt, &plus2(), &[0.26, 0.26]).unwrap();
        // L = diag(1.8125, 1.27625), rhs = (3.0625, 4.8025)
        assert_relative_eq!(y[0], 3.0625 / 1.8125, max_relative = 1e-14);
        assert_relative_eq!(y[1], 4.8025 / 1.27625, max_relative = 1e-14);
        assert_relative_eq!(y[0], 1.689655, epsilon = 1e-6);
        assert_relative_eq!(y[1], 3.762977, epsilon = 1e-6);

        let zero = make_test_equation_2d(0.0, 0.0, 0.0, [1.0, 2.0]);
        let y0 = step_heuristic_balanced(&zero, &v(&[1.0, 2.0]), dt, &plus2(), &[0.26, 0.26]).unwrap();
        assert_eq!(y0, v(&[1.0, 2.0]));

        let scalar = ScalarLinearSDE::new(0.0, 4.0, 1.0);
        let one = NoiseDraw::new(vec![1.0]).unwrap();
        let y = step_heuristic_balanced(&scalar.to_bilinear(), &v(&[1.0]), dt, &one, &[0.26]).unwrap();
        let ys = step_stabilized_scalar(&scalar, 1.0, dt, 1.0, &StabilizerParams::with_a(-4.16)).unwrap();
        assert_relative_eq!(y[0], ys, max_relative = 1e-14);
        assert_relative_eq!(y[0], 1.793651, epsilon = 1e-6);
    }

    #[test]
    fn heuristic_reports_singular_lhs() {
        // I − dt B singular when B = I/dt
        let mut sde = make_test_equation_2d(0.0, 0.0, 0.0, [1.0, 1.0]);
        sde.drift = DMatrix::identity(2, 2) * 2.0;
        let r = step_heuristic_balanced(&sde, &v(&[1.0, 1.0]), 0.5, &plus2(), &[0.26, 0.26]);
        assert!(matches!(r, Err(Error::Singular { .. })));
    }

    #[test]
    fn general_reduces_to_euler() {
        let dt = 1.0 / 16.0;
        let y = step_general_balanced(&ede(), &v(&[1.0, 0.0]), dt, &plus2(), &WeightMatrix::zeros(2)).unwrap();
        assert_eq!(y, step_euler_weak(&ede(), &v(&[1.0, 0.0]), dt, &plus2()).unwrap());
        assert_relative_eq!(y[0], 2.75);
        assert_relative_eq!(y[1], 0.25);
    }

    #[test]
    fn balanced_ck_examples() {
        let dt = 1.0 / 16.0;
        let zero_w = BalancedWeights::zeros(2, 2);
        assert_eq!(
            step_balanced_ck(&ede(), &v(&[1.0, 0.0]), dt, &plus2(), &zero_w).unwrap(),
            step_euler_weak(&ede(), &v(&[1.0, 0.0]), dt, &plus2()).unwrap()
        );
        let w = BalancedWeights::row_abs_damping(&ede());
        assert_eq!(w.cks[0], DMatrix::from_row_slice(2, 2, &[8.0, 0.0, 0.0, 5.0]));
        let y = step_balanced_ck(&ede(), &v(&[1.0, 0.0]), dt, &plus2(), &w).unwrap();
        assert_relative_eq!(y[0], 1.0 + 1.75 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(y[1], 0.25 / 2.25, max_relative = 1e-15);

        let s = ScalarLinearSDE::new(0.0, 4.0, 1.0);
        let ws = BalancedWeights::row_abs_damping(&s.to_bilinear());
        for xi in [1.0, -1.0] {
            let y = step_balanced_ck(&s.to_bilinear(), &v(&[1.0]), dt, &NoiseDraw::new(vec![xi]).unwrap(), &ws).unwrap();
            let z = step_milstein_balanced_scalar(&s, 1.0, dt, xi).unwrap();
            assert_relative_eq!(y[0], z, max_relative = 1e-15);
        }
    }

    #[test]
    fn stepper_matches_direct_formulas() {
        let sde = ede();
        let problem = Problem::Bilinear(sde.clone());
        let dt = 1.0 / 8.0;
        let m = WeightMatrix(DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.5, -2.0]));
        let cases: Vec<(Scheme, Box<dyn Fn(&DVector<f64>, &NoiseDraw) -> DVector<f64>>)> = vec![
            (Scheme::Euler, Box::new(|y, xi| step_euler_weak(&sde, y, dt, xi).unwrap())),
            (
                Scheme::Heuristic { alpha: None },
                Box::new(|y, xi| step_heuristic_balanced(&sde, y, dt, xi, &[0.26, 0.26]).unwrap()),
            ),
            (Scheme::General(m.clone()), Box::new(|y, xi| step_general_balanced(&sde, y, dt, xi, &m).unwrap())),
            (
                Scheme::Schurz,
                Box::new(|y, xi| step_balanced_ck(&sde, y, dt, xi, &BalancedWeights::row_abs_damping(&sde)).unwrap()),
            ),
        ];
        let y = v(&[0.3, -1.7]);
        for (scheme, direct) in &cases {
            let stepper = scheme.prepare(&problem, dt).unwrap();
            assert!(stepper.is_tabulated());
            for p in 0..4 {
                let xi = NoiseDraw::from_pattern(p, 2);
                let a = stepper.step(&y, &xi).unwrap();
                let b = direct(&y, &xi);
                assert!((a - &b).norm() <= 1e-13 * b.norm(), "{scheme:?}");
            }
        }
    }

    #[test]
    fn scalar_only_schemes_reject_systems() {
        let problem = Problem::Bilinear(ede());
        assert!(Scheme::Implicit.prepare(&problem, 0.1).is_err());
        assert!(Scheme::stabilized_default().prepare(&problem, 0.1).is_err());
    }

    #[test]
    fn simulate_path_examples() {
        let sde = ScalarLinearSDE::new(-1.0, 0.0, 3.0).to_bilinear();
        let mut stream = NoiseStream::new(1, 0);
        let path = simulate_path(&sde.x0, 1, 0, &mut stream, |y, xi| step_euler_weak(&sde, y, 0.1, xi)).unwrap();
        assert_eq!(path, vec![sde.x0.clone()]);

        let path = simulate_path(&sde.x0, 1, 10, &mut stream, |y, xi| step_euler_weak(&sde, y, 0.1, xi)).unwrap();
        assert_eq!(path.len(), 11);
        for (n, x) in path.iter().enumerate() {
            assert_relative_eq!(x[0], 3.0 * 0.9f64.powi(n as i32), max_relative = 1e-14);
        }

        let run = |seed| {
            let e = ede();
            let mut s = NoiseStream::new(seed, 5);
            simulate_path(&e.x0, 2, 50, &mut s, |y, xi| step_euler_weak(&e, y, 0.01, xi)).unwrap()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn simulate_path_reports_failing_step() {
        // 1 − a·dt = 0 on every step
        let s = ScalarLinearSDE::new(0.0, 1.0, 1.0);
        let p = StabilizerParams::with_a(10.0);
        let x0 = DVector::from_element(1, 1.0);
        let mut stream = NoiseStream::new(0, 0);
        let err = simulate_path(&x0, 1, 5, &mut stream, |y, xi| {
            Ok(DVector::from_element(1, step_stabilized_scalar(&s, y[0], 0.1, xi.signs()[0], &p)?))
        })
        .unwrap_err();
        assert!(matches!(err, Error::StepFailed { step: 0, .. }));
    }
}
