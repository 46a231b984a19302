//! Small dense symmetric linear algebra in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        SquareMatrix {
            n,
            data: rows.concat(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                for (o, b) in out.data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> SquareMatrix {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius distance to another matrix.
    pub fn frobenius_dist(&self, other: &SquareMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let tol = rel_tol * self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Eigen-decomposition `A = Q diag(values) Q^T` of a symmetric matrix.
/// Column `k` of `vectors` pairs with `values[k]`; values ascend.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: SquareMatrix,
}

/// Cyclic Jacobi rotations. Accurate to a few ulps of `||A||` for the small
/// matrices (tens of channels) handled here.
pub fn symmetric_eigen(a: &SquareMatrix) -> SymmetricEigen {
    let n = a.n;
    let mut m = a.clone();
    let mut v = SquareMatrix::identity(n);
    let scale: f64 = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = SquareMatrix::zeros(n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new, v.get(k, old));
        }
    }
    SymmetricEigen { values, vectors }
}

/// Inverse square root of a symmetric PSD matrix, with the number of
/// eigenvalues that were raised to the floor.
#[derive(Clone, Debug)]
pub struct InvSqrt {
    pub matrix: SquareMatrix,
    pub clamped: usize,
}

/// `Q diag(max(l, eps_rel * mean(l))^-1/2) Q^T`.
pub fn inv_sqrt_psd(r: &SquareMatrix, eps_rel: f64) -> Result<InvSqrt> {
    if r.n == 0 {
        return Err(Error::numeric("empty matrix"));
    }
    if r.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite covariance entry"));
    }
    if r.max_abs() == 0.0 {
        return Err(Error::numeric("covariance is all zero"));
    }
    if !r.is_symmetric(1e-10) {
        return Err(Error::numeric("covariance is not symmetric"));
    }
    let mut sym = r.clone();
    sym.symmetrize();
    let eig = symmetric_eigen(&sym);
    let mean = eig.values.iter().sum::<f64>() / r.n as f64;
    if !(mean > 0.0) {
        return Err(Error::numeric("covariance has no positive spectrum"));
    }
    let floor = eps_rel * mean;
    let mut clamped = 0;
    let scales: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| {
            if l < floor {
                clamped += 1;
                floor.powf(-0.5)
            } else {
                l.powf(-0.5)
            }
        })
        .collect();
    let n = r.n;
    let q = &eig.vectors;
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| q.get(i, k) * scales[k] * q.get(j, k)).sum();
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(InvSqrt {
        matrix: out,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let i3 = SquareMatrix::identity(3);
        let r = inv_sqrt_psd(&i3, 1e-10).unwrap();
        assert!(r.matrix.frobenius_dist(&i3) < 1e-15);
        let r = inv_sqrt_psd(&SquareMatrix::diag(&[4.0, 9.0]), 1e-10).unwrap();
        assert!(r.matrix.frobenius_dist(&SquareMatrix::diag(&[0.5, 1.0 / 3.0])) < 1e-15);
        assert_eq!(r.clamped, 0);
    }

    #[test]
    fn eigen_reconstructs() {
        let a = SquareMatrix::from_rows(&[&[2.0, 1.0, 0.0], &[1.0, 3.0, 1.0], &[0.0, 1.0, 4.0]]);
        let e = symmetric_eigen(&a);
        let d = SquareMatrix::diag(&e.values);
        let back = e.vectors.matmul(&d).matmul(&e.vectors.transpose());
        assert!(back.frobenius_dist(&a) < 1e-13);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        // trace preserved
        assert!((e.values.iter().sum::<f64>() - 9.0).abs() < 1e-13);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(inv_sqrt_psd(&SquareMatrix::zeros(2), 1e-10).is_err());
        let asym = SquareMatrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(inv_sqrt_psd(&asym, 1e-10).is_err());
    }

    #[test]
    fn rank_deficient_is_clamped() {
        // [[1,1],[1,1]] has eigenvalues 0 and 2
        let a = SquareMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let r = inv_sqrt_psd(&a, 1e-10).unwrap();
        assert_eq!(r.clamped, 1);
        assert!(r.matrix.data.iter().all(|v| v.is_finite()));
    }
}
