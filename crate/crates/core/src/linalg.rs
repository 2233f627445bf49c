//! Small dense and banded linear algebra kernels.

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, norm2, Scalar};

/// Symmetric banded matrix stored by its lower band.
///
/// Row `i` keeps the entries of columns `i - bw ..= i`; entries left of column 0 are unused.
#[derive(Debug, Clone)]
pub struct BandedSym<T> {
    n: usize,
    bw: usize,
    band: Vec<T>,
}

impl<T: Scalar> BandedSym<T> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![T::zero(); n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (self.bw + j - i)
    }

    /// Sets the symmetric pair `(i, j)`, `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        let s = self.slot(i, j);
        self.band[s] = v;
    }

    pub fn add_diag(&mut self, i: usize, v: T) {
        let s = self.slot(i, i);
        self.band[s] = self.band[s] + v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            T::zero()
        } else {
            self.band[self.slot(i, j)]
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.band[self.slot(i, j)];
                y[i] = y[i] + a * x[j];
                if j != i {
                    y[j] = y[j] + a * x[i];
                }
            }
        }
        y
    }

    /// Cholesky factorization `A = L Lᵀ`; fails when a pivot is not positive.
    pub fn cholesky(&self) -> Result<BandedCholesky<T>> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.clone();
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut sum = l.band[l.slot(i, j)];
                for k in lo..j {
                    sum = sum - l.band[l.slot(i, k)] * l.band[l.slot(j, k)];
                }
                if i == j {
                    if !(sum > T::zero()) {
                        return Err(Error::LinearSolver(format!(
                            "non-positive pivot {sum} at row {i}"
                        )));
                    }
                    let s = l.slot(i, i);
                    l.band[s] = sum.sqrt();
                } else {
                    let s = l.slot(i, j);
                    l.band[s] = sum / l.band[l.slot(j, j)];
                }
            }
        }
        Ok(BandedCholesky { l })
    }
}

/// Lower banded Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    l: BandedSym<T>,
}

impl<T: Scalar> BandedCholesky<T> {
    pub fn dim(&self) -> usize {
        self.l.n
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let l = &self.l;
        let (n, bw) = (l.n, l.bw);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s = s - l.band[l.slot(i, k)] * b[k];
            }
            b[i] = s / l.band[l.slot(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s = s - l.band[l.slot(k, i)] * b[k];
            }
            b[i] = s / l.band[l.slot(i, i)];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Outcome of a matrix-free Krylov solve.
#[derive(Debug, Clone)]
pub struct KrylovOutcome<T> {
    pub x: Vec<T>,
    pub applications: usize,
    pub relative_residual: T,
    pub converged: bool,
}

/// Unrestarted GMRES for `A x = b` with `x0 = 0`, stopping at `‖b - A x‖ ≤ rtol ‖b‖`.
pub fn gmres<T, F>(mut apply: F, b: &[T], rtol: T, max_apps: usize) -> Result<KrylovOutcome<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    let n = b.len();
    let beta = norm2(b);
    if beta == T::zero() || n == 0 {
        return Ok(KrylovOutcome {
            x: vec![T::zero(); n],
            applications: 0,
            relative_residual: T::zero(),
            converged: true,
        });
    }
    let max_k = max_apps.min(n).max(1);
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(max_k + 1);
    basis.push(b.iter().map(|&v| v / beta).collect());
    // Hessenberg columns after Givens rotation, i.e. upper triangular R.
    let mut r: Vec<Vec<T>> = Vec::with_capacity(max_k);
    let mut cs: Vec<(T, T)> = Vec::with_capacity(max_k);
    let mut g = vec![beta];
    let mut rel = T::one();
    let mut k = 0;
    while k < max_k {
        let mut w = apply(&basis[k])?;
        let mut h = vec![T::zero(); k + 2];
        for (j, v) in basis.iter().enumerate() {
            h[j] = dot(&w, v);
            axpy(-h[j], v, &mut w);
        }
        // one reorthogonalization pass keeps the basis clean for tight tolerances
        for (j, v) in basis.iter().enumerate() {
            let c = dot(&w, v);
            h[j] = h[j] + c;
            axpy(-c, v, &mut w);
        }
        h[k + 1] = norm2(&w);
        for (j, &(c, s)) in cs.iter().enumerate() {
            let (a, bb) = (h[j], h[j + 1]);
            h[j] = c * a + s * bb;
            h[j + 1] = -s * a + c * bb;
        }
        let denom = (h[k] * h[k] + h[k + 1] * h[k + 1]).sqrt();
        let (c, s) = if denom == T::zero() {
            (T::one(), T::zero())
        } else {
            (h[k] / denom, h[k + 1] / denom)
        };
        let hk1 = h[k + 1];
        h[k] = c * h[k] + s * hk1;
        h.truncate(k + 1);
        cs.push((c, s));
        g.push(-s * g[k]);
        g[k] = c * g[k];
        r.push(h);
        k += 1;
        rel = g[k].abs() / beta;
        if rel <= rtol || hk1 == T::zero() {
            break;
        }
        basis.push(w.iter().map(|&v| v / hk1).collect());
    }
    // back substitution on R y = g
    let mut y = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for j in (i + 1)..k {
            s = s - r[j][i] * y[j];
        }
        y[i] = s / r[i][i];
    }
    let mut x = vec![T::zero(); n];
    for (j, &yj) in y.iter().enumerate() {
        axpy(yj, &basis[j], &mut x);
    }
    Ok(KrylovOutcome {
        x,
        applications: k,
        relative_residual: rel,
        converged: rel <= rtol,
    })
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        self.data.chunks(self.n).map(|row| dot(row, x)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.n + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.n + j]
    }
}
