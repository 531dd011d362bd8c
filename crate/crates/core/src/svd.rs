//! Thin singular value decomposition by one-sided Jacobi rotations.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SvdError {
    #[error("Jacobi SVD did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix buffer has {actual} entries, expected {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("non-finite matrix entry")]
    NonFinite,
}

const MAX_SWEEPS: usize = 80;
const TOL: f64 = 1e-15;

/// `A = U diag(s) V^T` with `k = min(m, n)` singular values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub m: usize,
    pub n: usize,
    /// `m x k`, row-major.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// `k x n`, row-major.
    pub vt: Vec<f64>,
}

impl Svd {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    /// Best rank-`r` approximation, row-major `m x n`.
    pub fn reconstruct(&self, r: usize) -> Vec<f64> {
        let k = self.s.len();
        let r = r.min(k);
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            let row = &mut out[i * self.n..(i + 1) * self.n];
            for j in 0..r {
                let coef = self.u[i * k + j] * self.s[j];
                if coef == 0.0 {
                    continue;
                }
                let v = &self.vt[j * self.n..(j + 1) * self.n];
                for (o, &vv) in row.iter_mut().zip(v) {
                    *o += coef * vv;
                }
            }
        }
        out
    }
}

/// Decomposes the row-major `m x n` matrix `a`.
pub fn svd(a: &[f64], m: usize, n: usize) -> Result<Svd, SvdError> {
    if a.len() != m * n {
        return Err(SvdError::Shape {
            expected: m * n,
            actual: a.len(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SvdError::NonFinite);
    }
    if m >= n {
        // columns of A, each contiguous
        let cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
        let (u_cols, s, v_cols) = jacobi(cols, m)?;
        Ok(assemble(m, n, &u_cols, s, &v_cols))
    } else {
        // A^T = U' S V'^T, so A = V' S U'^T; columns of A^T are rows of A
        let cols: Vec<Vec<f64>> = (0..m).map(|i| a[i * n..(i + 1) * n].to_vec()).collect();
        let (u_cols, s, v_cols) = jacobi(cols, n)?;
        Ok(assemble(m, n, &v_cols, s, &u_cols))
    }
}

/// Orthogonalizes the `len`-long columns in place. Returns left singular
/// vectors, singular values and right singular vectors, as columns sorted by
/// descending singular value.
#[allow(clippy::type_complexity)]
fn jacobi(mut cols: Vec<Vec<f64>>, len: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>), SvdError> {
    let k = cols.len();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = norms[p];
                let beta = norms[q];
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * math::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + math::hypot(1.0, zeta));
                let c = 1.0 / math::hypot(1.0, t);
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
                let (left, right) = v.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
            }
        }
        // refresh to stop drift in the running norms
        for (nrm, c) in norms.iter_mut().zip(&cols) {
            *nrm = dot(c, c);
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SvdError::NoConvergence(MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..k).collect();
    let sv: Vec<f64> = norms.iter().map(|&x| math::sqrt(x)).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let mut u_out = Vec::with_capacity(k);
    let mut s_out = Vec::with_capacity(k);
    let mut v_out = Vec::with_capacity(k);
    for j in order {
        let sj = sv[j];
        let u = if sj > 0.0 {
            cols[j].iter().map(|x| x / sj).collect()
        } else {
            vec![0.0; len]
        };
        u_out.push(u);
        s_out.push(sj);
        v_out.push(core::mem::take(&mut v[j]));
    }
    Ok((u_out, s_out, v_out))
}

fn assemble(m: usize, n: usize, u_cols: &[Vec<f64>], s: Vec<f64>, v_cols: &[Vec<f64>]) -> Svd {
    let k = s.len();
    let mut u = vec![0.0; m * k];
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u[i * k + j] = x;
        }
    }
    let mut vt = Vec::with_capacity(k * n);
    for col in v_cols {
        vt.extend_from_slice(col);
    }
    Svd { m, n, u, s, vt }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Frobenius norm of `a - b`.
pub fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
