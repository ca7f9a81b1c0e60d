//! Choice of the stabilizing weight matrix.
//!
//! Two routes: the closed-form heuristic `H = B − Σ αₖ (σᵏ)ᵀσᵏ` turned into an
//! explicit weight `M = ((I − dt H)⁻¹ − I)/dt`, and a direct search for `M`
//! making the scheme's worst-direction growth rate match the sphere bound `ℓ`
//! of the exact solution.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dt, Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows, Factorized};
use crate::model::BilinearSDE;
use crate::schemes::WeightMatrix;
use crate::sphere::SphereSearch;
use crate::stability::{lyapunov_bound_ell, GrowthEvaluator};

/// `B − Σₖ αₖ (σᵏ)ᵀσᵏ`
pub fn heuristic_h(sde: &BilinearSDE, alpha: &[f64]) -> Result<WeightMatrix> {
    if alpha.len() != sde.m {
        return Err(Error::mismatch("alpha", sde.m, alpha.len()));
    }
    let mut h = sde.drift.clone();
    for (s, a) in sde.sigmas.iter().zip(alpha) {
        h -= (s.transpose() * s) * *a;
    }
    Ok(WeightMatrix(h))
}

/// `((I − dt H)⁻¹ − I)/dt`, so that `(I − dt H)(I + dt M) = I`.
pub fn m_from_h(h: &WeightMatrix, dt: f64) -> Result<WeightMatrix> {
    check_dt(dt)?;
    let d = h.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let lu = Factorized::new(&(&id - h.matrix() * dt), "I - dt H")?;
    Ok(WeightMatrix((lu.inverse() - id) / dt))
}

/// `M ↦ ((1/dt) sup E log‖A x‖ − ℓ)²` for one `(sde, dt)`, with `ℓ` computed once.
#[derive(Debug, Clone)]
pub struct ObjectiveEvaluator {
    sde: BilinearSDE,
    dt: f64,
    ell: f64,
    search: SphereSearch,
}

impl ObjectiveEvaluator {
    pub fn new(sde: &BilinearSDE, dt: f64) -> Result<Self> {
        Self::with_search(sde, dt, SphereSearch::default())
    }

    pub fn with_search(sde: &BilinearSDE, dt: f64, search: SphereSearch) -> Result<Self> {
        check_dt(dt)?;
        let (ell, _) = lyapunov_bound_ell(sde)?;
        Ok(Self {
            sde: sde.clone(),
            dt,
            ell,
            search,
        })
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `(1/dt) sup E log‖A x‖`
    pub fn sup_log_growth(&self, m: &WeightMatrix) -> Result<f64> {
        let (sup, _) = GrowthEvaluator::new(&self.sde, self.dt, m)?.sup(&self.search)?;
        Ok(sup / self.dt)
    }

    pub fn eval(&self, m: &WeightMatrix) -> Result<f64> {
        Ok((self.sup_log_growth(m)? - self.ell).powi(2))
    }
}

pub fn objective(sde: &BilinearSDE, dt: f64, m: &WeightMatrix) -> Result<f64> {
    ObjectiveEvaluator::new(sde, dt)?.eval(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartSpec {
    /// Every matrix whose entries all come from `values` (`values.len()^(d²)` starts).
    Grid { values: Vec<f64> },
    /// Seeded uniform draws from `[−half_width, half_width]^(d²)`.
    Random { count: usize, half_width: f64 },
    /// Row-major `d×d` matrices.
    Explicit { matrices: Vec<Vec<Vec<f64>>> },
}

impl StartSpec {
    /// `{−2,−1,0,1,2}` on every entry for `d ≤ 2`, otherwise 625 random starts in `[−2,2]`.
    pub fn default_for(d: usize) -> Self {
        if d <= 2 {
            StartSpec::Grid {
                values: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            }
        } else {
            StartSpec::Random {
                count: 625,
                half_width: 2.0,
            }
        }
    }

    /// Starts as row-major entry vectors, in start-index order.
    pub fn points(&self, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let n = d * d;
        let pts: Vec<Vec<f64>> = match self {
            StartSpec::Grid { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidArgument("start grid has no values".into()));
                }
                let total = values
                    .len()
                    .checked_pow(n as u32)
                    .filter(|t| *t <= 1 << 24)
                    .ok_or_else(|| Error::InvalidArgument("start grid too large".into()))?;
                // odometer with the last entry varying fastest
                (0..total)
                    .map(|mut idx| {
                        let mut p = vec![0.0; n];
                        for slot in p.iter_mut().rev() {
                            *slot = values[idx % values.len()];
                            idx /= values.len();
                        }
                        p
                    })
                    .collect()
            }
            StartSpec::Random { count, half_width } => {
                if !(*half_width >= 0.0) {
                    return Err(Error::InvalidArgument("random start half-width must be non-negative".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..*count)
                    .map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0) * half_width).collect())
                    .collect()
            }
            StartSpec::Explicit { matrices } => matrices
                .iter()
                .map(|rows| {
                    let m = matrix_from_rows(rows, "start matrix")?;
                    if m.nrows() != d || m.ncols() != d {
                        return Err(Error::mismatch("start matrix", format!("{d}x{d}"), format!("{}x{}", m.nrows(), m.ncols())));
                    }
                    Ok(rows.iter().flatten().copied().collect())
                })
                .collect::<Result<_>>()?,
        };
        if pts.is_empty() {
            return Err(Error::InvalidArgument("at least one start is required".into()));
        }
        Ok(pts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub box_bound: f64,
    pub starts: StartSpec,
    pub obj_tol: f64,
    pub max_iters_per_start: usize,
    pub seed: u64,
    /// Angle grid used for the inner sphere supremum.
    pub sphere_grid: usize,
}

impl OptConfig {
    pub fn for_dim(d: usize) -> Self {
        Self {
            box_bound: 20.0,
            starts: StartSpec::default_for(d),
            obj_tol: 1e-12,
            max_iters_per_start: 2000,
            seed: 0,
            sphere_grid: 128,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.box_bound > 0.0) || !self.box_bound.is_finite() {
            return Err(Error::InvalidArgument(format!("box bound must be positive, got {}", self.box_bound)));
        }
        if !(self.obj_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("objective tolerance must be positive, got {}", self.obj_tol)));
        }
        if self.max_iters_per_start == 0 {
            return Err(Error::InvalidArgument("max_iters_per_start must be at least 1".into()));
        }
        if self.sphere_grid < 3 {
            return Err(Error::InvalidArgument("sphere grid needs at least 3 points".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOptResult {
    #[serde(rename = "M", with = "rows")]
    pub m: DMatrix<f64>,
    pub objective: f64,
    pub start_index: usize,
    pub iterations: usize,
    pub all_start_objectives: Vec<f64>,
    pub dt: f64,
    /// `floor(log10(objective))`; absent when the objective is exactly zero.
    pub order: Option<i32>,
    pub order_convention: String,
    /// The winner's objective recomputed with the default (finer) sphere search.
    pub objective_check: f64,
}

impl WeightOptResult {
    pub fn weight(&self) -> WeightMatrix {
        WeightMatrix(self.m.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("weight file: {e}")))
    }
}

mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        crate::linalg::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        crate::linalg::matrix_from_rows(&rows, "M").map_err(serde::de::Error::custom)
    }
}

pub fn order_of(objective: f64) -> Option<i32> {
    (objective > 0.0).then(|| objective.log10().floor() as i32)
}

/// Multistart box-clamped Nelder–Mead on the objective.
///
/// Starts run in parallel; the winner is the smallest final objective, ties going to the lowest
/// start index, so the result does not depend on the number of workers.
pub fn optimize_weights(sde: &BilinearSDE, dt: f64, cfg: &OptConfig) -> Result<WeightOptResult> {
    cfg.validate()?;
    let search = SphereSearch {
        grid_points: cfg.sphere_grid,
        ..SphereSearch::default()
    };
    let eval = ObjectiveEvaluator::with_search(sde, dt, search)?;
    let d = sde.d;
    let starts = cfg.starts.points(d, cfg.seed)?;
    let k = cfg.box_bound;
    let f = |x: &[f64]| -> f64 {
        let m = WeightMatrix(DMatrix::from_row_slice(d, d, x));
        match eval.eval(&m) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };
    let runs: Vec<NmOutcome> = starts
        .par_iter()
        .map(|s| {
            let s: Vec<f64> = s.iter().map(|v| v.clamp(-k, k)).collect();
            nelder_mead_box(&f, &s, k, 0.5, cfg.obj_tol, cfg.max_iters_per_start)
        })
        .collect();
    let fine = ObjectiveEvaluator::new(sde, dt)?;
    let (start_index, best) = runs
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.value.total_cmp(&b.value).then(i.cmp(j)))
        .expect("at least one start");
    Ok(WeightOptResult {
        m: DMatrix::from_row_slice(d, d, &best.point),
        objective: best.value,
        start_index,
        iterations: best.iterations,
        all_start_objectives: runs.iter().map(|r| r.value).collect(),
        dt,
        order: order_of(best.value),
        order_convention: "floor(log10(objective))".into(),
        objective_check: fine
            .eval(&WeightMatrix(DMatrix::from_row_slice(d, d, &best.point)))
            .unwrap_or(f64::INFINITY),
    })
}

#[derive(Debug, Clone)]
pub struct NmOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Nelder–Mead with every trial point clamped into `[−k, k]ⁿ`.
///
/// Stops when the spread of simplex values drops below `tol` or after `max_iters`.
/// The returned value never exceeds the value at `x0`.
pub fn nelder_mead_box<F>(f: &F, x0: &[f64], k: f64, edge: f64, tol: f64, max_iters: usize) -> NmOutcome
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let clamp = |mut x: Vec<f64>| {
        x.iter_mut().for_each(|v| *v = v.clamp(-k, k));
        x
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] + edge <= k { x[i] + edge } else { x[i] - edge };
        let x = clamp(x);
        let v = f(&x);
        simplex.push((x, v));
    }

    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    order(&mut simplex);
    let mut iterations = 0;
    while iterations < max_iters {
        let spread = simplex[n].1 - simplex[0].1;
        if spread < tol || (spread.is_nan() && simplex[0].1 == simplex[n].1) {
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            clamp(
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect(),
            )
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for (x, v) in simplex.iter_mut().skip(1) {
                    *x = clamp(best.iter().zip(x.iter()).map(|(b, xi)| b + 0.5 * (xi - b)).collect());
                    *v = f(x);
                }
            }
        }
        order(&mut simplex);
    }
    let (point, value) = simplex.swap_remove(0);
    NmOutcome {
        point,
        value,
        iterations,
    }
}

/// Entries in column-major order, as printed in the weight table: `(1,1), (2,1), (1,2), (2,2)` for `d = 2`.
pub fn column_major_entries(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

pub fn weight_rows(m: &WeightMatrix) -> Vec<Vec<f64>> {
    matrix_to_rows(m.matrix())
}
