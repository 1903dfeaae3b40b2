//! Least-squares projection onto polynomials in a cross-sectional state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One explanatory variable sampled across paths.
#[derive(Debug, Clone)]
pub struct StateVar<'a> {
    pub values: &'a [f64],
    /// Integer-valued variables get their degree capped at (well-populated
    /// levels - 1) so that the monomials stay linearly independent.
    pub discrete: bool,
}

/// Conditional-expectation operator fitted on one time step.
#[derive(Debug, Clone)]
pub struct Projector {
    n_paths: usize,
    n_basis: usize,
    features: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

/// Exponent vectors of total degree at most `degree`, respecting per-variable caps.
pub fn monomials(caps: &[u32], degree: u32) -> Vec<Vec<u32>> {
    fn rec(caps: &[u32], left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == caps.len() {
            out.push(cur.clone());
            return;
        }
        let cap = caps[cur.len()].min(left);
        for e in 0..=cap {
            cur.push(e);
            rec(caps, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(caps, degree, &mut Vec::with_capacity(caps.len()), &mut out);
    out.sort_by_key(|e| e.iter().sum::<u32>());
    out
}

/// Levels of an integer-valued variable seen on at least `MIN_LEVEL_SUPPORT` paths.
const MIN_LEVEL_SUPPORT: usize = 10;

fn distinct_upto(values: &[f64], limit: usize) -> usize {
    let mut seen: Vec<u64> = Vec::with_capacity(limit);
    for v in values {
        let b = v.to_bits();
        if !seen.contains(&b) {
            seen.push(b);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

fn supported_levels(values: &[f64]) -> usize {
    let mut levels: Vec<(u64, usize)> = Vec::new();
    for v in values {
        let b = v.to_bits();
        match levels.iter_mut().find(|(k, _)| *k == b) {
            Some(e) => e.1 += 1,
            None => levels.push((b, 1)),
        }
    }
    levels.iter().filter(|(_, c)| *c >= MIN_LEVEL_SUPPORT).count()
}

/// Number of basis functions the projector would use for this state.
pub fn basis_size(state: &[StateVar<'_>], degree: u32) -> usize {
    monomials(&caps(state, degree), degree).len()
}

fn caps(state: &[StateVar<'_>], degree: u32) -> Vec<u32> {
    state
        .iter()
        .map(|v| {
            if distinct_upto(v.values, 2) <= 1 {
                0
            } else if v.discrete {
                (supported_levels(v.values).max(1) as u32 - 1).min(degree)
            } else {
                degree
            }
        })
        .collect()
}

impl Projector {
    /// Fits the Gram system for polynomials of total degree `degree` in the
    /// standardized state. Constant variables are dropped.
    pub fn fit(state: &[StateVar<'_>], degree: u32, step: usize) -> Result<Self> {
        let n = state.first().map(|v| v.values.len()).unwrap_or(0);
        if n == 0 || state.iter().any(|v| v.values.len() != n) {
            return Err(Error::GridMismatch(format!("regression state at step {step} has ragged columns")));
        }
        let caps = caps(state, degree);
        let active: Vec<usize> = (0..state.len()).filter(|&i| caps[i] > 0).collect();
        if active.is_empty() {
            return Ok(Projector { n_paths: n, n_basis: 1, features: Vec::new(), chol: None });
        }
        let act_caps: Vec<u32> = active.iter().map(|&i| caps[i]).collect();
        let exps = monomials(&act_caps, degree);
        let p = exps.len();

        let stats: Vec<(f64, f64)> = active
            .iter()
            .map(|&i| {
                let xs = state[i].values;
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            })
            .collect();

        let maxdeg = degree as usize;
        let stride = maxdeg + 1;
        // each monomial as a list of offsets into the per-path power table
        let factors: Vec<Vec<usize>> = exps
            .iter()
            .map(|e| {
                e.iter()
                    .enumerate()
                    .filter(|(_, &ea)| ea > 0)
                    .map(|(a, &ea)| a * stride + ea as usize)
                    .collect()
            })
            .collect();
        let mut features = vec![0.0; n * p];
        let mut powers = vec![1.0; active.len() * stride];
        for path in 0..n {
            for (a, &i) in active.iter().enumerate() {
                let z = (state[i].values[path] - stats[a].0) / stats[a].1;
                let row = &mut powers[a * stride..(a + 1) * stride];
                for d in 1..=maxdeg {
                    row[d] = row[d - 1] * z;
                }
            }
            let out = &mut features[path * p..(path + 1) * p];
            for (o, f) in out.iter_mut().zip(&factors) {
                *o = f.iter().map(|&i| powers[i]).product();
            }
        }

        let mut acc = vec![0.0; p * p];
        for row in features.chunks_exact(p) {
            for (i, &ri) in row.iter().enumerate() {
                let dst = &mut acc[i * p..i * p + i + 1];
                for (a, &rj) in dst.iter_mut().zip(&row[..=i]) {
                    *a += ri * rj;
                }
            }
        }
        let gram = DMatrix::<f64>::from_fn(p, p, |i, j| {
            let (a, b) = if j <= i { (i, j) } else { (j, i) };
            acc[a * p + b] / n as f64
        });
        let diag: Vec<f64> = (0..p).map(|i| gram[(i, i)]).collect();
        let chol = gram.cholesky().ok_or(Error::SingularRegression { step })?;
        let l = chol.l_dirty();
        for i in 0..p {
            if !(l[(i, i)] * l[(i, i)] > 1e-12 * diag[i]) {
                return Err(Error::SingularRegression { step });
            }
        }
        Ok(Projector { n_paths: n, n_basis: p, features, chol: Some(chol) })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// Fitted values of the least-squares projection of `target`.
    pub fn project(&self, target: &[f64]) -> Vec<f64> {
        assert_eq!(target.len(), self.n_paths, "target length");
        let n = self.n_paths as f64;
        match &self.chol {
            None => {
                let m = target.iter().sum::<f64>() / n;
                vec![m; self.n_paths]
            }
            Some(chol) => {
                // constants lie in the span, so centring first keeps them exact
                let m = target.iter().sum::<f64>() / n;
                let p = self.n_basis;
                let mut rhs = vec![0.0; p];
                for (row, &y) in self.features.chunks_exact(p).zip(target) {
                    let yc = y - m;
                    for (r, &f) in rhs.iter_mut().zip(row) {
                        *r += f * yc;
                    }
                }
                let rhs = DVector::from_iterator(p, rhs.into_iter().map(|v| v / n));
                let coef: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
                self.features
                    .chunks_exact(p)
                    .map(|row| m + row.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(&[3], 3).len(), 4);
        assert_eq!(monomials(&[3, 3], 3).len(), 10);
        assert_eq!(monomials(&[3, 1], 3).len(), 7);
        assert_eq!(monomials(&[0, 0], 3).len(), 1);
    }

    #[test]
    fn reproduces_polynomials_exactly() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let n: Vec<f64> = (0..200).map(|i| (i % 3) as f64).collect();
        // a level seen once does not earn a degree
        let mut n2 = n.clone();
        n2[0] = 7.0;
        let st2 = [StateVar { values: &x, discrete: false }, StateVar { values: &n2, discrete: true }];
        assert_eq!(basis_size(&st2, 3), 9);
        let target: Vec<f64> = x.iter().zip(&n).map(|(a, b)| 1.0 - a + 0.5 * a * a * a + 2.0 * b * a).collect();
        let st = [StateVar { values: &x, discrete: false }, StateVar { values: &n, discrete: true }];
        let pr = Projector::fit(&st, 3, 0).unwrap();
        // counts take 3 values so their degree is capped at 2
        assert_eq!(pr.n_basis(), 9);
        for (f, t) in pr.project(&target).iter().zip(&target) {
            assert!((f - t).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_state_projects_to_the_mean() {
        let zeros = vec![0.0; 4];
        let pr = Projector::fit(&[StateVar { values: &zeros, discrete: false }], 3, 0).unwrap();
        assert_eq!(pr.project(&[1.0, 2.0, 3.0, 6.0]), vec![3.0; 4]);
    }

    #[test]
    fn collinear_state_is_singular() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let st = [StateVar { values: &x, discrete: false }, StateVar { values: &y, discrete: false }];
        assert!(matches!(Projector::fit(&st, 1, 7), Err(Error::SingularRegression { step: 7 })));
    }
}
