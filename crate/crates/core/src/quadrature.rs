//! Gauss rules from the Golub–Welsch eigenvalue method, and composite Gauss–Legendre.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes ascending, with matching weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Nodes and weights from the symmetric Jacobi matrix with the given off-diagonal and
    /// total mass `mu0`.
    fn golub_welsch(off: &[f64], mu0: f64) -> Self {
        let n = off.len() + 1;
        let mut j = DMatrix::<f64>::zeros(n, n);
        for (i, b) in off.iter().enumerate() {
            j[(i, i + 1)] = *b;
            j[(i + 1, i)] = *b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Physicists' Hermite rule: `∫ g(x) e^{−x²} dx ≈ Σ wᵢ g(xᵢ)`.
    pub fn hermite(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
        let mut rule = Self::golub_welsch(&off, std::f64::consts::PI.sqrt());
        symmetrize(&mut rule);
        rule
    }

    /// Legendre rule on `[−1, 1]`.
    pub fn legendre(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let off: Vec<f64> = (1..n)
            .map(|k| {
                let k = k as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            })
            .collect();
        let mut rule = Self::golub_welsch(&off, 2.0);
        symmetrize(&mut rule);
        rule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫ₐᵇ g` with this rule mapped from `[−1, 1]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut g: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * g(mid + half * x);
        }
        acc * half
    }
}

/// Both rules are symmetric about 0; averaging mirrored pairs removes eigen-solver asymmetry.
fn symmetrize(rule: &mut GaussRule) {
    let n = rule.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
        let w = 0.5 * (rule.weights[i] + rule.weights[j]);
        rule.nodes[i] = -x;
        rule.nodes[j] = x;
        rule.weights[i] = w;
        rule.weights[j] = w;
    }
    if n % 2 == 1 {
        rule.nodes[n / 2] = 0.0;
    }
}

/// `∫ₐᵇ g` split into `panels` equal pieces, each integrated with `rule`.
pub fn composite<F: FnMut(f64) -> f64>(rule: &GaussRule, a: f64, b: f64, panels: usize, mut g: F) -> f64 {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * h;
            rule.integrate(lo, lo + h, &mut g)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hermite_moments() {
        let r = GaussRule::hermite(20);
        let sp = std::f64::consts::PI.sqrt();
        assert_relative_eq!(r.weights.iter().sum::<f64>(), sp, max_relative = 1e-13);
        // ∫ x² e^{−x²} = √π/2, ∫ x⁴ e^{−x²} = 3√π/4
        let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
        let m4: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(m2, sp / 2.0, max_relative = 1e-12);
        assert_relative_eq!(m4, 3.0 * sp / 4.0, max_relative = 1e-12);
        // E cos(Z) for Z ~ N(0,1) is e^{−1/2}
        let e: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * (std::f64::consts::SQRT_2 * x).cos())
            .sum::<f64>()
            / sp;
        assert_relative_eq!(e, (-0.5f64).exp(), max_relative = 1e-13);
    }

    #[test]
    fn hermite_small_rules_match_tables() {
        let r = GaussRule::hermite(2);
        assert_relative_eq!(r.nodes[1], 0.5f64.sqrt(), max_relative = 1e-14);
        let r = GaussRule::hermite(3);
        assert_eq!(r.nodes[1], 0.0);
        assert_relative_eq!(r.nodes[2], 1.5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(r.weights[1], 2.0 * std::f64::consts::PI.sqrt() / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn legendre_is_exact_for_polynomials() {
        let r = GaussRule::legendre(5);
        // degree 9 exact
        assert_relative_eq!(r.integrate(0.0, 2.0, |x| x.powi(9)), 2f64.powi(10) / 10.0, max_relative = 1e-13);
        assert_relative_eq!(r.weights.iter().sum::<f64>(), 2.0, max_relative = 1e-14);
        let r3 = GaussRule::legendre(3);
        assert_relative_eq!(r3.nodes[2], 0.6f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(r3.weights[2], 5.0 / 9.0, max_relative = 1e-14);
    }

    #[test]
    fn composite_integrates_oscillation() {
        let r = GaussRule::legendre(20);
        let v = composite(&r, 0.0, 100.0, 100, |x| x.sin());
        assert_relative_eq!(v, 1.0 - 100f64.cos(), epsilon = 1e-12);
    }
}
