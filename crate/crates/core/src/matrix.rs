//! Dense symmetric matrices: cyclic Jacobi eigendecomposition, fractional
//! powers, eigenvalue bands and entrywise perturbation classes.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Off-diagonal Frobenius norm at which Jacobi sweeps stop.
pub const TOL_EIG: f64 = 1e-12;
/// Eigenvalues at or below this are treated as non-positive.
pub const TOL_PD: f64 = 1e-12;
/// Outward slack applied to band membership tests.
pub const TOL_BAND: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// A symmetric `dim x dim` matrix stored as its packed upper triangle.
#[derive(Clone, PartialEq)]
pub struct SymMatrix<T> {
    dim: usize,
    upper: Vec<T>,
}

#[inline]
fn packed_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * (2 * dim - i + 1) / 2 + (j - i)
}

impl<T: Real> SymMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be positive");
        SymMatrix { dim, upper: vec![T::zero(); dim * (dim + 1) / 2] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![T::one(); dim])
    }

    pub fn diagonal(values: &[T]) -> Self {
        let mut out = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            out.set(i, i, v);
        }
        out
    }

    /// Builds a matrix from `f(i, j)` evaluated on the upper triangle.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                out.set(i, j, f(i, j));
            }
        }
        out
    }

    /// Builds a matrix from full rows; the rows must be symmetric to within
    /// `1e-12` relative to the largest entry. The upper triangle is kept.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::Config("matrix must have at least one row".into()));
        }
        let scale = rows
            .iter()
            .flat_map(|r| r.iter())
            .fold(T::one(), |acc, &x| acc.max(x.abs()));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { left: dim, right: row.len() });
            }
            for j in 0..i {
                let gap = (row[j] - rows[j][i]).abs();
                if gap > T::tol(1e-12) * scale {
                    return Err(Error::NotSymmetric { i, j, gap: gap.to_f64().unwrap_or(f64::NAN) });
                }
            }
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j]))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.upper[packed_index(self.dim, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let k = packed_index(self.dim, i, j);
        self.upper[k] = v;
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j)).collect()).collect()
    }

    pub fn to_dense(&self) -> Vec<T> {
        let n = self.dim;
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    pub fn max_abs_entry(&self) -> T {
        self.upper.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn scale(&self, s: T) -> Self {
        SymMatrix { dim: self.dim, upper: self.upper.iter().map(|&x| x * s).collect() }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(SymMatrix {
            dim: self.dim,
            upper: self.upper.iter().zip(&other.upper).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(SymMatrix {
            dim: self.dim,
            upper: self.upper.iter().zip(&other.upper).map(|(&a, &b)| a - b).collect(),
        })
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, w: T, other: &Self) -> Result<()> {
        self.check_dim(other)?;
        for (a, &b) in self.upper.iter_mut().zip(&other.upper) {
            *a = *a + w * b;
        }
        Ok(())
    }

    /// Largest entrywise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_dim(other)?;
        Ok(self
            .upper
            .iter()
            .zip(&other.upper)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Quadratic form `x^t A x`.
    pub fn quad_form(&self, x: &[T]) -> T {
        let n = self.dim;
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..n {
                acc = acc + x[i] * self.get(i, j) * x[j];
            }
        }
        acc
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let n = self.dim;
        (0..n).map(|i| (0..n).fold(T::zero(), |acc, j| acc + self.get(i, j) * x[j])).collect()
    }

    /// The product `self * other`, symmetrized. Exact only when the two
    /// factors commute (powers of the same matrix, for instance).
    pub fn mul_sym(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        let n = self.dim;
        let half = T::lit(0.5);
        Ok(Self::from_fn(n, |i, j| {
            let mut ij = T::zero();
            let mut ji = T::zero();
            for k in 0..n {
                ij = ij + self.get(i, k) * other.get(k, j);
                ji = ji + self.get(j, k) * other.get(k, i);
            }
            half * (ij + ji)
        }))
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: other.dim });
        }
        Ok(())
    }
}

impl<T: Real> fmt::Debug for SymMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

impl<T: Real + Serialize> Serialize for SymMatrix<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for SymMatrix<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<T>>::deserialize(deserializer)?;
        SymMatrix::from_rows(&rows).map_err(de::Error::custom)
    }
}

/// `A = U diag(eigenvalues) U^t`, eigenvalues descending, eigenvectors in the
/// columns of `U` (row-major storage).
#[derive(Clone, Debug)]
pub struct EigenDecomp<T> {
    pub eigenvalues: Vec<T>,
    eigenvectors: Vec<T>,
    dim: usize,
}

impl<T: Real> EigenDecomp<T> {
    /// Column `k` of `U`.
    pub fn eigenvector(&self, k: usize) -> Vec<T> {
        (0..self.dim).map(|i| self.eigenvectors[i * self.dim + k]).collect()
    }

    /// Entry `(i, k)` of `U`.
    #[inline]
    pub fn u(&self, i: usize, k: usize) -> T {
        self.eigenvectors[i * self.dim + k]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rebuilds `U g(D) U^t` for a spectral function `g`.
    pub fn reconstruct_with(&self, g: impl Fn(T) -> T) -> SymMatrix<T> {
        let n = self.dim;
        let d: Vec<T> = self.eigenvalues.iter().map(|&x| g(x)).collect();
        SymMatrix::from_fn(n, |i, j| {
            (0..n).fold(T::zero(), |acc, k| acc + self.u(i, k) * d[k] * self.u(j, k))
        })
    }

    pub fn reconstruct(&self) -> SymMatrix<T> {
        self.reconstruct_with(|x| x)
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps visit `(p, q)` pairs in row order. Eigenvalues come back in
/// descending order; each eigenvector is flipped so that its first component
/// with magnitude above `1e-10` is positive.
pub fn eigen_decompose<T: Real>(a: &SymMatrix<T>) -> Result<EigenDecomp<T>> {
    let n = a.dim();
    let mut m = a.to_dense();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let frob = m.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    let target = T::tol(TOL_EIG) * frob.max(T::one());

    let off_norm = |m: &[T]| -> T {
        let mut s = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                s = s + m[p * n + q] * m[p * n + q];
            }
        }
        (s + s).sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= target {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off_norm: off.to_f64().unwrap_or(f64::NAN) });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let t = if theta.is_infinite() {
                    T::zero()
                } else {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = T::zero();
                m[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        m[y * n + y].partial_cmp(&m[x * n + x]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<T> = order.iter().map(|&k| m[k * n + k]).collect();
    let mut eigenvectors = vec![T::zero(); n * n];
    let sign_tol = T::tol(1e-10);
    for (col, &k) in order.iter().enumerate() {
        let lead = (0..n).map(|i| v[i * n + k]).find(|x| x.abs() > sign_tol).unwrap_or(T::one());
        let flip = if lead < T::zero() { -T::one() } else { T::one() };
        for i in 0..n {
            eigenvectors[i * n + col] = flip * v[i * n + k];
        }
    }
    Ok(EigenDecomp { eigenvalues, eigenvectors, dim: n })
}

/// `A^r = U D^r U^t` for positive definite `A`.
pub fn matrix_power<T: Real>(a: &SymMatrix<T>, r: T) -> Result<SymMatrix<T>> {
    let eig = eigen_decompose(a)?;
    power_from_decomp(&eig, r)
}

/// Fractional power from an existing decomposition.
pub fn power_from_decomp<T: Real>(eig: &EigenDecomp<T>, r: T) -> Result<SymMatrix<T>> {
    let min = *eig.eigenvalues.last().expect("non-empty spectrum");
    if min <= T::lit(TOL_PD) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min.to_f64().unwrap_or(f64::NAN) });
    }
    Ok(eig.reconstruct_with(|x| x.powf(r)))
}

/// Smallest and largest eigenvalue.
pub fn eta_bounds<T: Real>(a: &SymMatrix<T>) -> Result<(T, T)> {
    let eig = eigen_decompose(a)?;
    let max = eig.eigenvalues[0];
    let min = *eig.eigenvalues.last().expect("non-empty spectrum");
    debug_assert!(a.max_abs_entry() <= max.abs().max(min.abs()) * (T::one() + T::tol(1e-9)));
    Ok((min, max))
}

/// The eigenvalue band `[a, b]` of the matrix class with all eigenvalues
/// between `a` and `b` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandParams {
    pub m: usize,
    pub a: f64,
    pub b: f64,
}

impl BandParams {
    pub fn new(m: usize, a: f64, b: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Validation { field: "m".into(), message: "must be positive".into() });
        }
        if !(a > 0.0 && a < b) {
            return Err(Error::Validation {
                field: "band".into(),
                message: format!("need 0 < a < b, got a = {a}, b = {b}"),
            });
        }
        Ok(BandParams { m, a, b })
    }

    pub fn widened(&self, a: f64, b: f64) -> Self {
        BandParams { m: self.m, a, b }
    }
}

/// True iff all eigenvalues lie in `[a, b]` (with `TOL_BAND` outward slack).
pub fn in_band<T: Real>(a: &SymMatrix<T>, band: &BandParams) -> Result<bool> {
    let (lo, hi) = eta_bounds(a)?;
    let tol = T::tol(TOL_BAND);
    Ok(T::lit(band.a) - tol <= lo && hi <= T::lit(band.b) + tol)
}

/// True iff `A - B` has every entry bounded by `eps` in absolute value.
pub fn entrywise_within<T: Real>(a: &SymMatrix<T>, b: &SymMatrix<T>, eps: T) -> Result<bool> {
    Ok(a.max_abs_diff(b)? <= eps)
}

/// Row-major dense matrix used for the non-symmetric products in the
/// canonical-correlation code.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_sym(a: &SymMatrix<T>) -> Self {
        Dense { rows: a.dim(), cols: a.dim(), data: a.to_dense() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Dense<T>) -> Result<Dense<T>> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { left: self.cols, right: other.rows });
        }
        let mut out = Dense::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == T::zero() {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d = *d + aik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^t self`, symmetric by construction.
    pub fn gram(&self) -> SymMatrix<T> {
        SymMatrix::from_fn(self.cols, |i, j| {
            (0..self.rows).fold(T::zero(), |acc, k| acc + self.get(k, i) * self.get(k, j))
        })
    }
}
