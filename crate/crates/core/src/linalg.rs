//! Dense row-major matrices and a one-sided Jacobi SVD.
//!
//! Everything here is generic over [`Scalar`] (`f32` or `f64`). Reductions
//! accumulate in `f64` regardless of the storage type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::{Error, Result};

/// Floating-point element type usable by the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Rotation threshold for the Jacobi sweeps (relative off-diagonal cosine).
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep cap for the Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite entry at ({i}, {j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// `self · x`, accumulated in f64.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| T::of(dot(self.row(i), x))).collect())
    }

    /// `selfᵀ · x`, accumulated in f64.
    pub fn matvec_t(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(Error::Shape(format!(
                "matvec_t: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut acc = vec![0.0f64; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi.as_f64();
            for (a, &m) in acc.iter_mut().zip(self.row(i)) {
                *a += m.as_f64() * xi;
            }
        }
        Ok(acc.into_iter().map(T::of).collect())
    }
}

/// Dot product accumulated in f64.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum()
}

pub fn norm2<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product `a · b`. Each entry is an f64 sum over the inner
/// index in ascending order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = Vec::with_capacity(a.rows * b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for (k, &aik) in ar.iter().enumerate() {
                acc += aik.as_f64() * b.data[k * b.cols + j].as_f64();
            }
            data.push(T::of(acc));
        }
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data,
    })
}

/// Thin SVD `m = u · diag(sigma) · vᵀ` with `k = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
    /// Jacobi sweeps used until no rotation fired.
    pub sweeps: usize,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        truncated_reconstruct(self, self.sigma.len()).expect("full rank is in range")
    }
}

/// One-sided (Hestenes) Jacobi SVD with cyclic sweeps.
///
/// Singular values come out sorted descending. Each column of `u` is signed
/// so that its largest-magnitude entry is non-negative, with `v` flipped to
/// match.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    let mut out = if m.rows >= m.cols {
        jacobi_tall(m)?
    } else {
        let t = jacobi_tall(&m.transpose())?;
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
            sweeps: t.sweeps,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

// Column-major working copy; `a.rows >= a.cols`.
fn jacobi_tall<T: Scalar>(a: &Matrix<T>) -> Result<SvdResult<T>> {
    let (m, n) = a.shape();
    let mut w: Vec<Vec<T>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| if i == j { T::one() } else { T::zero() })
                .collect()
        })
        .collect();
    let tol = T::of(JACOBI_TOL).max(T::epsilon());
    // Columns below this squared norm are numerically zero; rotating them
    // only shuffles rounding noise.
    let frob = T::of(a.frobenius_norm());
    let negligible = (T::epsilon() * frob) * (T::epsilon() * frob);

    let mut sweeps = 0;
    let mut converged = false;
    let mut residual = 0.0f64;
    while sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = col_products(&w[p], &w[q]);
                if gamma == T::zero() || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(cosine.as_f64());
                if cosine <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence { sweeps, residual });
    }

    let norms: Vec<T> = w.iter().map(|c| T::of(norm2(c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .expect("finite norms")
            .then(i.cmp(&j))
    });

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut next_basis = 0usize;
    for &j in &order {
        let s = norms[j];
        let mut col: Vec<T> = if s > T::zero() {
            w[j].iter().map(|&x| x / s).collect()
        } else {
            vec![T::zero(); m]
        };
        // Re-orthogonalise against the stronger directions; columns with
        // tiny sigma carry direction noise of order eps/sigma, which this
        // removes without moving the product by more than eps·sigma_max.
        orthogonalize(&mut col, &u_cols);
        let mut len = norm2(&col);
        if len < 0.5 {
            // Some unit vector keeps at least 1/sqrt(m) of its length in the
            // complement, so this threshold is always met.
            let accept = 0.5 / (m as f64).sqrt();
            loop {
                assert!(next_basis < m, "basis completion exhausted");
                let mut e = vec![T::zero(); m];
                e[next_basis] = T::one();
                next_basis += 1;
                orthogonalize(&mut e, &u_cols);
                len = norm2(&e);
                if len > accept {
                    col = e;
                    break;
                }
            }
        }
        let len = T::of(len);
        col.iter_mut().for_each(|x| *x = *x / len);
        u_cols.push(col);
        sigma.push(s);
        v_cols.push(v[j].clone());
    }

    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| v_cols[j][i]);
    Ok(SvdResult {
        u,
        sigma,
        v,
        sweeps,
    })
}

fn col_products<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut a = T::zero();
    let mut b = T::zero();
    let mut g = T::zero();
    for (&xi, &yi) in x.iter().zip(y) {
        a = a + xi * xi;
        b = b + yi * yi;
        g = g + xi * yi;
    }
    (a, b, g)
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

// Two passes of modified Gram-Schmidt.
fn orthogonalize<T: Scalar>(x: &mut [T], basis: &[Vec<T>]) {
    for _ in 0..2 {
        for b in basis {
            let proj = T::of(dot(x, b));
            for (xi, &bi) in x.iter_mut().zip(b) {
                *xi = *xi - proj * bi;
            }
        }
    }
}

fn fix_signs<T: Scalar>(s: &mut SvdResult<T>) {
    let (m, k) = s.u.shape();
    let n = s.v.rows;
    for j in 0..k {
        let mut best = 0;
        for i in 1..m {
            if s.u.get(i, j).abs() > s.u.get(best, j).abs() {
                best = i;
            }
        }
        if s.u.get(best, j) < T::zero() {
            for i in 0..m {
                s.u.data[i * k + j] = -s.u.data[i * k + j];
            }
            for i in 0..n {
                s.v.data[i * k + j] = -s.v.data[i * k + j];
            }
        }
    }
}

/// `Σ_{i<r} σᵢ uᵢ vᵢᵀ`; `r = 0` gives the zero matrix.
pub fn truncated_reconstruct<T: Scalar>(s: &SvdResult<T>, r: usize) -> Result<Matrix<T>> {
    let k = s.sigma.len();
    if r > k {
        return Err(Error::Range(format!(
            "rank {r} exceeds {k} singular values"
        )));
    }
    let (m, n) = (s.u.rows, s.v.rows);
    let mut data = vec![0.0f64; m * n];
    for l in 0..r {
        let sl = s.sigma[l].as_f64();
        for i in 0..m {
            let ui = s.u.get(i, l).as_f64() * sl;
            let row = &mut data[i * n..(i + 1) * n];
            for (j, d) in row.iter_mut().enumerate() {
                *d += ui * s.v.get(j, l).as_f64();
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: data.into_iter().map(T::of).collect(),
    })
}
