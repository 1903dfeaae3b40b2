use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::scheme::implicit_step;
use super::{ComparisonReport, Driver};
use crate::error::{Error, Result};

const MAX_DEPTH: usize = 12;
const MAX_NODES: usize = 1 << 24;

/// One branch of a uniform tree: probability, Brownian increment and
/// compensated jump increments per atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub prob: f64,
    pub db: f64,
    #[serde(default)]
    pub dn: Vec<f64>,
}

/// A non-recombining tree with the same branching at every node.
/// Node `i` at depth `d` has children `i * b + c` at depth `d + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub dt: f64,
    pub n_steps: usize,
    branches: Vec<Branch>,
    /// Maps centred children values to `(Z, K_1, ..., K_J)`.
    proj: DMatrix<f64>,
}

impl Tree {
    pub fn new(dt: f64, n_steps: usize, branches: Vec<Branch>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::InvalidArgument("tree needs at least one branch".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("tree step must be positive, got {dt}")));
        }
        if n_steps > MAX_DEPTH {
            return Err(Error::InvalidArgument(format!("tree depth {n_steps} exceeds {MAX_DEPTH}")));
        }
        let b = branches.len();
        if (b as f64).powi(n_steps as i32) > MAX_NODES as f64 {
            return Err(Error::InvalidArgument(format!("{b}^{n_steps} leaves is too many to enumerate")));
        }
        let sum: f64 = branches.iter().map(|br| br.prob).sum();
        if (sum - 1.0).abs() > 1e-12 || branches.iter().any(|br| !(br.prob >= 0.0)) {
            return Err(Error::BadProbabilities { sum });
        }
        let na = branches[0].dn.len();
        if branches.iter().any(|br| br.dn.len() != na) {
            return Err(Error::InvalidArgument("branches disagree on the number of atoms".into()));
        }

        // weighted least squares of Y on the centred increments (db, dn_1..dn_J)
        let q = 1 + na;
        let col = |br: &Branch, c: usize| if c == 0 { br.db } else { br.dn[c - 1] };
        let means: Vec<f64> = (0..q).map(|c| branches.iter().map(|br| br.prob * col(br, c)).sum()).collect();
        let mut x = DMatrix::<f64>::zeros(b, q);
        for (i, br) in branches.iter().enumerate() {
            for c in 0..q {
                x[(i, c)] = col(br, c) - means[c];
            }
        }
        let active: Vec<usize> = (0..q)
            .filter(|&c| (0..b).map(|i| branches[i].prob * x[(i, c)] * x[(i, c)]).sum::<f64>() > 0.0)
            .collect();
        let mut proj = DMatrix::<f64>::zeros(q, b);
        if !active.is_empty() {
            let xa = DMatrix::from_fn(b, active.len(), |i, c| x[(i, active[c])]);
            let w = DMatrix::from_fn(b, b, |i, j| if i == j { branches[i].prob } else { 0.0 });
            let xtw = xa.transpose() * &w;
            let gram = &xtw * &xa;
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("tree increments are linearly dependent".into()))?;
            let sol = chol.solve(&xtw);
            for (r, &c) in active.iter().enumerate() {
                proj.set_row(c, &sol.row(r));
            }
        }
        Ok(Tree { dt, n_steps, branches, proj })
    }

    /// Symmetric binomial Brownian tree, `db = +-sqrt(dt)`.
    pub fn binomial(dt: f64, n_steps: usize) -> Result<Self> {
        let s = dt.sqrt();
        Tree::new(
            dt,
            n_steps,
            vec![Branch { prob: 0.5, db: s, dn: vec![] }, Branch { prob: 0.5, db: -s, dn: vec![] }],
        )
    }

    /// Binomial Brownian part times a one-jump-or-none part with
    /// `P(jump) = lambda dt`, giving four branches and one atom.
    pub fn binomial_with_jump(dt: f64, n_steps: usize, lambda: f64) -> Result<Self> {
        let q = lambda * dt;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidArgument(format!("jump probability {q} must lie in (0, 1)")));
        }
        let s = dt.sqrt();
        let mut br = Vec::with_capacity(4);
        for db in [s, -s] {
            br.push(Branch { prob: 0.5 * q, db, dn: vec![1.0 - q] });
            br.push(Branch { prob: 0.5 * (1.0 - q), db, dn: vec![-q] });
        }
        Tree::new(dt, n_steps, br)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branching(&self) -> usize {
        self.branches.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.branches[0].dn.len()
    }

    pub fn n_nodes(&self, depth: usize) -> usize {
        self.branching().pow(depth as u32)
    }

    /// Branch indices leading to `node` at `depth`, root first.
    pub fn branch_path(&self, mut node: usize, depth: usize) -> Vec<usize> {
        let b = self.branching();
        let mut out = vec![0; depth];
        for d in (0..depth).rev() {
            out[d] = node % b;
            node /= b;
        }
        out
    }

    /// Ancestor at depth `to` of `node` at depth `from`.
    pub fn ancestor(&self, node: usize, from: usize, to: usize) -> usize {
        node / self.branching().pow((from - to) as u32)
    }

    /// Values at `depth` from a function of the branch sequence.
    pub fn values_from<F: Fn(&[usize]) -> f64>(&self, depth: usize, f: F) -> Vec<f64> {
        (0..self.n_nodes(depth)).map(|i| f(&self.branch_path(i, depth))).collect()
    }

    /// `W` at every node of `depth`.
    pub fn brownian(&self, depth: usize) -> Vec<f64> {
        self.values_from(depth, |bp| bp.iter().map(|&c| self.branches[c].db).sum())
    }

    /// Conditional expectation of values at depth `from` onto depth `to <= from`.
    pub fn conditional_expectation(&self, values: &[f64], from: usize, to: usize) -> Vec<f64> {
        let b = self.branching();
        let mut cur = values.to_vec();
        for _ in to..from {
            cur = cur
                .chunks_exact(b)
                .map(|ch| ch.iter().zip(&self.branches).map(|(v, br)| br.prob * v).sum())
                .collect();
        }
        cur
    }

    /// Exact backward induction of the discrete BSDE
    /// `Y_n = E_n[Y_{n+1}] + g(t_n, Y_n, Z_n, K_n) dt` from values at `depth`.
    pub fn solve(&self, driver: &Driver, terminal: &[f64], depth: usize) -> Result<TreeSolution> {
        if depth > self.n_steps {
            return Err(Error::GridMismatch(format!("depth {depth} beyond the tree's {} steps", self.n_steps)));
        }
        if terminal.len() != self.n_nodes(depth) {
            return Err(Error::GridMismatch(format!(
                "{} terminal values for {} nodes",
                terminal.len(),
                self.n_nodes(depth)
            )));
        }
        if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: format!("terminal value at node {i}"), step: depth });
        }
        let b = self.branching();
        let na = self.n_atoms();
        let mut y = vec![Vec::new(); depth + 1];
        let mut z = vec![Vec::new(); depth];
        let mut k = vec![Vec::new(); depth];
        y[depth] = terminal.to_vec();
        let mut resid: f64 = 0.0;
        let mut coefs = DVector::<f64>::zeros(1 + na);
        for step in (0..depth).rev() {
            let nodes = self.n_nodes(step);
            let t = step as f64 * self.dt;
            let mut ys = vec![0.0; nodes];
            let mut zs = vec![0.0; nodes];
            let mut ks = vec![0.0; nodes * na];
            for node in 0..nodes {
                let ch = &y[step + 1][node * b..(node + 1) * b];
                let ey: f64 = ch.iter().zip(&self.branches).map(|(v, br)| br.prob * v).sum();
                let centred = DVector::from_iterator(b, ch.iter().map(|v| v - ey));
                self.proj.mul_to(&centred, &mut coefs);
                zs[node] = coefs[0];
                for j in 0..na {
                    ks[node * na + j] = coefs[1 + j];
                }
                let (yn, _, r) = implicit_step(driver, t, step, node, ey, zs[node], &ks[node * na..(node + 1) * na], self.dt)?;
                resid = resid.max(r);
                ys[node] = yn;
            }
            y[step] = ys;
            z[step] = zs;
            k[step] = ks;
        }
        Ok(TreeSolution { y0: y[0][0], y, z, k, n_atoms: na, fixed_point_residual: resid })
    }

    /// [`Tree::solve`] from a function of the branch sequence at full depth.
    pub fn solve_fn<F: Fn(&[usize]) -> f64>(&self, driver: &Driver, terminal: F) -> Result<TreeSolution> {
        self.solve(driver, &self.values_from(self.n_steps, terminal), self.n_steps)
    }
}

/// Node values of a tree solve: `y[d][node]`, `z[d][node]`, `k[d][node * J + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSolution {
    pub y0: f64,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub n_atoms: usize,
    pub fixed_point_residual: f64,
}

/// Checks `Y1 <= Y2 + tolerance` at every node.
pub fn compare_trees(sol1: &TreeSolution, sol2: &TreeSolution, tolerance: f64) -> Result<ComparisonReport> {
    if sol1.y.len() != sol2.y.len() || sol1.y.iter().zip(&sol2.y).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::GridMismatch("tree solutions have different shapes".into()));
    }
    let mut rep = ComparisonReport::new(tolerance);
    for (d, (a, b)) in sol1.y.iter().zip(&sol2.y).enumerate() {
        for (i, (u, v)) in a.iter().zip(b).enumerate() {
            rep.record(u - v, i, d);
        }
    }
    Ok(rep)
}
