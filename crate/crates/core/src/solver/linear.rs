//! Sparse SPD solves: reverse Cuthill-McKee ordering with an envelope
//! Cholesky factorization, and Jacobi-preconditioned CG for large systems.

use std::collections::VecDeque;

use crate::assembly::SparseSymmetricOperator;
use crate::error::{Error, Result};

/// Envelope entries above which [`linear_solve`] switches to CG.
pub const DIRECT_ENVELOPE_LIMIT: usize = 40_000_000;

/// Relative residual target of the iterative fallback.
pub const PCG_RTOL: f64 = 1e-13;

/// Reverse Cuthill-McKee permutation: `perm[new] = old`.
pub fn rcm_ordering(a: &SparseSymmetricOperator) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).0.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs_levels = |start: usize, mark: &mut Vec<usize>, stamp: usize| -> (usize, usize) {
        // Returns (eccentricity, a minimum-degree vertex of the last level).
        let mut frontier = vec![start];
        mark[start] = stamp;
        let mut depth = 0;
        loop {
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in a.row(v).0 {
                    if mark[w] != stamp {
                        mark[w] = stamp;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                let last = *frontier.iter().min_by_key(|&&v| (degree[v], v)).expect("nonempty level");
                return (depth, last);
            }
            frontier = next;
            depth += 1;
        }
    };
    let mut mark = vec![usize::MAX; n];
    let mut stamp = 0;
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // Pseudo-peripheral start vertex.
        let mut start = seed;
        let (mut ecc, mut cand) = bfs_levels(start, &mut mark, stamp);
        stamp += 1;
        for _ in 0..8 {
            let (e, c) = bfs_levels(cand, &mut mark, stamp);
            stamp += 1;
            if e <= ecc {
                break;
            }
            start = cand;
            ecc = e;
            cand = c;
        }
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = a.row(v).0.iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    /// First column stored in each row of `L`.
    first: Vec<usize>,
    /// Offset of row `i` in `values`; row `i` holds columns `first[i]..=i`.
    start: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn envelope_size(a: &SparseSymmetricOperator, perm: &[usize]) -> usize {
        let mut inv = vec![0; perm.len()];
        for (k, &i) in perm.iter().enumerate() {
            inv[i] = k;
        }
        (0..perm.len()).map(|k| k - a.row(perm[k]).0.iter().map(|&j| inv[j]).min().unwrap_or(k).min(k) + 1).sum()
    }

    pub fn factor(a: &SparseSymmetricOperator) -> Result<Self> {
        Self::factor_with(a, rcm_ordering(a))
    }

    pub fn factor_with(a: &SparseSymmetricOperator, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        let mut inv = vec![0; n];
        for (k, &i) in perm.iter().enumerate() {
            inv[i] = k;
        }
        let mut first = vec![0; n];
        let mut start = vec![0; n + 1];
        for k in 0..n {
            first[k] = a.row(perm[k]).0.iter().map(|&j| inv[j]).min().unwrap_or(k).min(k);
            start[k + 1] = start[k] + (k - first[k] + 1);
        }
        let mut values = vec![0.0; start[n]];
        for k in 0..n {
            let (cols, vals) = a.row(perm[k]);
            for (&j, &v) in cols.iter().zip(vals) {
                let c = inv[j];
                if c <= k {
                    values[start[k] + c - first[k]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let row_i = start[i];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = values[row_i + j - fi];
                let (ri, rj) = (row_i + lo - fi, start[j] + lo - fj);
                let len = j - lo;
                for k in 0..len {
                    s -= values[ri + k] * values[rj + k];
                }
                values[row_i + j - fi] = s / values[start[j] + j - fj];
            }
            let mut d = values[row_i + i - fi];
            for k in fi..i {
                let l = values[row_i + k - fi];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotSpd { pivot: perm[i], value: d });
            }
            values[row_i + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky { perm, first, start, values })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.values[self.start[i]..self.start[i + 1]];
            let mut s = y[i];
            for (k, l) in row[..i - fi].iter().enumerate() {
                s -= l * y[fi + k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, l) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (k, &i) in self.perm.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn residual(a: &SparseSymmetricOperator, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.matvec(x);
    b.iter().zip(ax).map(|(b, ax)| b - ax).collect()
}

/// Jacobi-preconditioned conjugate gradients to `‖Ax - b‖ <= rtol ‖b‖`.
pub fn pcg(a: &SparseSymmetricOperator, b: &[f64], rtol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.dim();
    let diag = a.diagonal();
    if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::NotSpd { pivot: i, value: diag[i] });
    }
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        a.matvec_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::NotSpd { pivot: it, value: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= rtol * bn {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence { what: "preconditioned CG".into(), iterations: max_iter, residual: norm(&r) / bn })
}

/// Solves `A x = b` for SPD `A`: direct envelope Cholesky with one step of
/// iterative refinement, or CG when the envelope would be too large.
pub fn linear_solve(a: &SparseSymmetricOperator, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim() {
        return Err(Error::Parameter(format!("right-hand side has length {}, matrix is {}", b.len(), a.dim())));
    }
    let perm = rcm_ordering(a);
    if EnvelopeCholesky::envelope_size(a, &perm) > DIRECT_ENVELOPE_LIMIT {
        return pcg(a, b, PCG_RTOL, 20 * a.dim() + 100);
    }
    let chol = EnvelopeCholesky::factor_with(a, perm)?;
    let mut x = chol.solve(b);
    let r = residual(a, &x, b);
    let dx = chol.solve(&r);
    for (x, d) in x.iter_mut().zip(dx) {
        *x += d;
    }
    Ok(x)
}
