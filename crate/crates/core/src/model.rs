//! Problem descriptions: the scalar linear SDE `dX = μX dt + λX dW` and the
//! bilinear system `dX = BX dt + Σₖ σᵏX dWᵏ`, plus their JSON interchange form.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarLinearSDE {
    pub mu: f64,
    pub lambda: f64,
    pub x0: f64,
}

impl ScalarLinearSDE {
    pub fn new(mu: f64, lambda: f64, x0: f64) -> Self {
        Self { mu, lambda, x0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda), ("x0", self.x0)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: name.into() });
            }
        }
        Ok(())
    }

    /// The same equation as a 1×1 bilinear system.
    pub fn to_bilinear(&self) -> BilinearSDE {
        BilinearSDE {
            d: 1,
            m: 1,
            drift: DMatrix::from_element(1, 1, self.mu),
            sigmas: vec![DMatrix::from_element(1, 1, self.lambda)],
            x0: DVector::from_element(1, self.x0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSDE {
    pub d: usize,
    pub m: usize,
    pub drift: DMatrix<f64>,
    pub sigmas: Vec<DMatrix<f64>>,
    pub x0: DVector<f64>,
}

impl BilinearSDE {
    /// Builds and validates a system; `d` and `m` are read off the inputs.
    pub fn new(drift: DMatrix<f64>, sigmas: Vec<DMatrix<f64>>, x0: DVector<f64>) -> Result<Self> {
        let sde = Self {
            d: drift.nrows(),
            m: sigmas.len(),
            drift,
            sigmas,
            x0,
        };
        validate_bilinear(&sde)?;
        Ok(sde)
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Result<Self> {
        self.x0 = x0;
        validate_bilinear(&self)?;
        Ok(self)
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigmas.iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

/// Checks shapes and finiteness; the error names the offending matrix.
pub fn validate_bilinear(sde: &BilinearSDE) -> Result<()> {
    let d = sde.d;
    if d == 0 {
        return Err(Error::mismatch("d", "positive dimension", 0));
    }
    if sde.m == 0 {
        return Err(Error::mismatch("m", "at least one noise", 0));
    }
    let check = |name: String, a: &DMatrix<f64>| -> Result<()> {
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::mismatch(name, format!("{d}x{d}"), format!("{}x{}", a.nrows(), a.ncols())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: name });
        }
        Ok(())
    };
    check("B".into(), &sde.drift)?;
    if sde.sigmas.len() != sde.m {
        return Err(Error::mismatch("sigmas", format!("{} matrices", sde.m), sde.sigmas.len()));
    }
    for (k, s) in sde.sigmas.iter().enumerate() {
        check(format!("sigmas[{k}]"), s)?;
    }
    if sde.x0.len() != d {
        return Err(Error::mismatch("x0", d, sde.x0.len()));
    }
    if sde.x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "x0".into() });
    }
    Ok(())
}

/// The non-commutative 2×2 test system with `σ¹ = diag(σ₁, σ₂)` and the rotation generator `σ² = ε·J`.
pub fn make_test_equation_2d(sigma1: f64, sigma2: f64, eps: f64, x0: [f64; 2]) -> BilinearSDE {
    BilinearSDE {
        d: 2,
        m: 2,
        drift: DMatrix::zeros(2, 2),
        sigmas: vec![
            DMatrix::from_row_slice(2, 2, &[sigma1, 0.0, 0.0, sigma2]),
            DMatrix::from_row_slice(2, 2, &[0.0, -eps, eps, 0.0]),
        ],
        x0: DVector::from_row_slice(&x0),
    }
}

/// One realization of the two-point increments, each entry exactly ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw(Vec<f64>);

impl NoiseDraw {
    pub fn new(signs: Vec<f64>) -> Result<Self> {
        if let Some(v) = signs.iter().find(|v| **v != 1.0 && **v != -1.0) {
            return Err(Error::InvalidArgument(format!("noise entries must be ±1, got {v}")));
        }
        Ok(Self(signs))
    }

    /// Bit `k` of `pattern` set means `ξᵏ = −1`.
    pub fn from_pattern(pattern: usize, m: usize) -> Self {
        Self((0..m).map(|k| if (pattern >> k) & 1 == 1 { -1.0 } else { 1.0 }).collect())
    }

    pub fn pattern(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (k, v)| if *v < 0.0 { acc | (1 << k) } else { acc })
    }

    pub fn signs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A loaded problem file.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Scalar(ScalarLinearSDE),
    Bilinear(BilinearSDE),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BilinearRecord {
    d: usize,
    m: usize,
    #[serde(rename = "B")]
    drift: Vec<Vec<f64>>,
    sigmas: Vec<Vec<Vec<f64>>>,
    x0: Vec<f64>,
}

impl Problem {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("problem JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("problem JSON must be an object".into()))?;
        let parse_err = |e: serde_json::Error| Error::InvalidArgument(format!("problem JSON: {e}"));
        if obj.contains_key("mu") || obj.contains_key("lambda") {
            let sde: ScalarLinearSDE = serde_json::from_value(value).map_err(parse_err)?;
            sde.validate()?;
            Ok(Problem::Scalar(sde))
        } else {
            let rec: BilinearRecord = serde_json::from_value(value).map_err(parse_err)?;
            let sde = BilinearSDE {
                d: rec.d,
                m: rec.m,
                drift: matrix_from_rows(&rec.drift, "B")?,
                sigmas: rec
                    .sigmas
                    .iter()
                    .enumerate()
                    .map(|(k, s)| matrix_from_rows(s, &format!("sigmas[{k}]")))
                    .collect::<Result<_>>()?,
                x0: DVector::from_vec(rec.x0),
            };
            validate_bilinear(&sde)?;
            Ok(Problem::Bilinear(sde))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Problem::Scalar(s) => serde_json::to_value(s).expect("plain struct"),
            Problem::Bilinear(b) => serde_json::to_value(BilinearRecord {
                d: b.d,
                m: b.m,
                drift: matrix_to_rows(&b.drift),
                sigmas: b.sigmas.iter().map(matrix_to_rows).collect(),
                x0: b.x0.iter().copied().collect(),
            })
            .expect("plain struct"),
        }
    }

    /// Bilinear view; scalar problems become 1×1 systems.
    pub fn as_bilinear(&self) -> BilinearSDE {
        match self {
            Problem::Scalar(s) => s.to_bilinear(),
            Problem::Bilinear(b) => b.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Scalar(_) => 1,
            Problem::Bilinear(b) => b.d,
        }
    }

    pub fn x0(&self) -> Vec<f64> {
        match self {
            Problem::Scalar(s) => vec![s.x0],
            Problem::Bilinear(b) => b.x0.iter().copied().collect(),
        }
    }

    pub fn with_x0(self, x0: &[f64]) -> Result<Self> {
        match self {
            Problem::Scalar(mut s) => {
                if x0.len() != 1 {
                    return Err(Error::mismatch("x0", 1, x0.len()));
                }
                s.x0 = x0[0];
                s.validate()?;
                Ok(Problem::Scalar(s))
            }
            Problem::Bilinear(b) => Ok(Problem::Bilinear(b.with_x0(DVector::from_row_slice(x0))?)),
        }
    }
}
