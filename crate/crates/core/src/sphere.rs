//! Maximization of even functions over the unit sphere.
//!
//! For `d = 2` the search is a dense angle grid on `[0, π)` followed by
//! golden-section refinement, which is deterministic and accurate. For
//! `d > 2` it is a seeded multistart coordinate ascent, so the result is a
//! lower estimate of the true supremum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct SphereSearch {
    pub grid_points: usize,
    pub golden_tol: f64,
    pub starts: usize,
    pub seed: u64,
}

impl Default for SphereSearch {
    fn default() -> Self {
        Self {
            grid_points: 1024,
            golden_tol: 1e-10,
            starts: 64,
            seed: 0x5eed_5a8e,
        }
    }
}

impl SphereSearch {
    /// Returns `(sup f, argmax)`. `f` must satisfy `f(x) = f(−x)`.
    pub fn maximize<F>(&self, d: usize, mut f: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        match d {
            0 => panic!("sphere search needs d ≥ 1"),
            1 => {
                let up = f(&[1.0])?;
                let down = f(&[-1.0])?;
                Ok(if down > up { (down, vec![-1.0]) } else { (up, vec![1.0]) })
            }
            2 => self.circle(&mut f),
            _ => self.multistart(d, &mut f),
        }
    }

    fn circle<F>(&self, f: &mut F) -> Result<(f64, Vec<f64>)>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let mut at = |theta: f64| f(&[theta.cos(), theta.sin()]);
        let n = self.grid_points.max(3);
        let h = std::f64::consts::PI / n as f64;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..n {
            let theta = i as f64 * h;
            let v = at(theta)?;
            if v > best.0 {
                best = (v, theta);
            }
        }

        // golden section on the bracketing cell pair
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (best.1 - h, best.1 + h);
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let mut f1 = at(x1)?;
        let mut f2 = at(x2)?;
        while hi - lo > self.golden_tol {
            if f1 >= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = at(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = at(x2)?;
            }
        }
        for (v, theta) in [(f1, x1), (f2, x2)] {
            if v > best.0 {
                best = (v, theta);
            }
        }
        Ok((best.0, vec![best.1.cos(), best.1.sin()]))
    }

    fn multistart<F>(&self, d: usize, f: &mut F) -> Result<(f64, Vec<f64>)>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut best = (f64::NEG_INFINITY, vec![0.0; d]);
        for _ in 0..self.starts.max(1) {
            let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if !normalize(&mut x) {
                x = vec![0.0; d];
                x[0] = 1.0;
            }
            let mut fx = f(&x)?;
            let mut step = 0.5;
            while step > 1e-9 {
                let mut improved = false;
                for i in 0..d {
                    for sign in [1.0, -1.0] {
                        let mut trial = x.clone();
                        trial[i] += sign * step;
                        if !normalize(&mut trial) {
                            continue;
                        }
                        let ft = f(&trial)?;
                        if ft > fx {
                            x = trial;
                            fx = ft;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
            if fx > best.0 {
                best = (fx, x);
            }
        }
        Ok(best)
    }
}

fn normalize(x: &mut [f64]) -> bool {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}
