//! Dense linear algebra on small row-major matrices.
//!
//! Everything here is deterministic: reductions run left to right in a fixed
//! order, and the SVD is a cyclic one-sided Jacobi sweep with a fixed pair
//! ordering, so identical inputs produce bit-identical outputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point scalar usable by the numeric kernels (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c += a · b` for an `m × k` operand `a` and a `k × n` operand `b`
    /// given by row and column strides; `c` is row-major `m × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]);
}

/// Largest element offset touched by a strided `rows × cols` view.
fn strided_extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0);
                assert!(a.len() >= strided_extent(m, k, rsa, csa));
                assert!(b.len() >= strided_extent(k, n, rsb, csb));
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the assertions above keep every strided access
                // inside the three slices, and `c` does not alias `a` or `b`
                // because it is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        1.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness scan. Length is still checked.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
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

    pub fn from_diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copy of the `rows × cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(r0 + i)[c0..c0 + cols]);
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        matmul_nn_into(self, other, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        matmul_nt_into(self, other, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_tn: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        matmul_tn_into(self, other, &mut out);
        Ok(out)
    }

    pub fn frobenius_norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn frobenius_norm(&self) -> T {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).fold(T::zero(), |acc, i| acc + self.get(i, i))
    }

    pub fn column_means(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s = *s + v;
            }
        }
        let n = T::from_count(self.rows.max(1));
        sums.into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }
}

/// `out += a · b`.
pub fn matmul_nn_acc<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, out: &mut DenseMatrix<T>) {
    assert_eq!(a.cols, b.rows, "matmul_nn_acc inner dimension");
    assert_eq!(out.shape(), (a.rows, b.cols), "matmul_nn_acc output shape");
    T::gemm_acc(a.rows, a.cols, b.cols, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1, &mut out.data);
}

fn matmul_nn_into<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, out: &mut DenseMatrix<T>) {
    out.data.iter_mut().for_each(|v| *v = T::zero());
    matmul_nn_acc(a, b, out);
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    // Four independent partial sums let the compiler vectorise; the
    // combination order is fixed so results stay deterministic.
    let mut acc = [T::zero(); 4];
    let mut xs = x.chunks_exact(4);
    let mut ys = y.chunks_exact(4);
    for (cx, cy) in (&mut xs).zip(&mut ys) {
        acc[0] = acc[0] + cx[0] * cy[0];
        acc[1] = acc[1] + cx[1] * cy[1];
        acc[2] = acc[2] + cx[2] * cy[2];
        acc[3] = acc[3] + cx[3] * cy[3];
    }
    let tail = xs
        .remainder()
        .iter()
        .zip(ys.remainder())
        .fold(T::zero(), |t, (&a, &b)| t + a * b);
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += a · bᵀ`.
pub fn matmul_nt_acc<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, out: &mut DenseMatrix<T>) {
    assert_eq!(a.cols, b.cols, "matmul_nt_acc inner dimension");
    assert_eq!(out.shape(), (a.rows, b.rows), "matmul_nt_acc output shape");
    T::gemm_acc(a.rows, a.cols, b.rows, &a.data, a.cols as isize, 1, &b.data, 1, b.cols as isize, &mut out.data);
}

fn matmul_nt_into<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, out: &mut DenseMatrix<T>) {
    out.data.iter_mut().for_each(|v| *v = T::zero());
    matmul_nt_acc(a, b, out);
}

/// `out += aᵀ · b`.
pub fn matmul_tn_acc<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, out: &mut DenseMatrix<T>) {
    assert_eq!(a.rows, b.rows, "matmul_tn_acc inner dimension");
    assert_eq!(out.shape(), (a.cols, b.cols), "matmul_tn_acc output shape");
    T::gemm_acc(a.cols, a.rows, b.cols, &a.data, 1, a.cols as isize, &b.data, b.cols as isize, 1, &mut out.data);
}

fn matmul_tn_into<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, out: &mut DenseMatrix<T>) {
    out.data.iter_mut().for_each(|v| *v = T::zero());
    matmul_tn_acc(a, b, out);
}

/// Subtracts each column's mean.
pub fn center_columns<T: Scalar>(m: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Dimension("cannot center an empty matrix".into()));
    }
    let means = m.column_means();
    let mut out = m.clone();
    for i in 0..out.rows {
        for (v, &mu) in out.row_mut(i).iter_mut().zip(&means) {
            *v = *v - mu;
        }
    }
    Ok(out)
}

/// Thin SVD `m = u · diag(singular_values) · vt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult<T> {
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: DenseMatrix<T>,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<T>,
    /// `k × cols` with orthonormal rows.
    pub vt: DenseMatrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        self.truncated(self.singular_values.len())
    }

    /// `u[:, :r] · diag(s[:r]) · vt[:r, :]`.
    pub fn truncated(&self, r: usize) -> DenseMatrix<T> {
        let (m, n) = (self.u.rows, self.vt.cols);
        let mut out = DenseMatrix::zeros(m, n);
        for k in 0..r.min(self.singular_values.len()) {
            let s = self.singular_values[k];
            for i in 0..m {
                let uik = self.u.get(i, k) * s;
                if uik == T::zero() {
                    continue;
                }
                let vrow = self.vt.row(k);
                let orow = out.row_mut(i);
                for (o, &v) in orow.iter_mut().zip(vrow) {
                    *o = *o + uik * v;
                }
            }
        }
        out
    }

    /// Frobenius error of the rank-`r` truncation: `sqrt(Σ_{i>r} σ_i²)`.
    pub fn tail_norm(&self, r: usize) -> T {
        self.singular_values
            .iter()
            .skip(r)
            .fold(T::zero(), |acc, &s| acc + s * s)
            .sqrt()
    }
}

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// One-sided Jacobi SVD.
pub fn svd<T: Scalar>(m: &DenseMatrix<T>) -> Result<SvdResult<T>> {
    if !m.all_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows < m.cols {
        let t = svd(&m.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        });
    }
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Ok(SvdResult {
            u: DenseMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            vt: DenseMatrix::zeros(0, 0),
        });
    }

    // Work column-wise: a[j] is column j of the evolving `m · v`.
    let mut a: Vec<Vec<T>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|j| {
            (0..cols)
                .map(|i| if i == j { T::one() } else { T::zero() })
                .collect()
        })
        .collect();
    let tol = T::lit(SVD_TOLERANCE).max(T::epsilon());

    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let norms: Vec<T> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // Stable sort keeps ties in column order.
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let sigma_max = norms[order[0]];
    let negligible = sigma_max * T::epsilon() * T::from_count(rows.max(cols));

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut vt = DenseMatrix::zeros(cols, cols);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        singular_values.push(s);
        for (i, &vij) in v[j].iter().enumerate() {
            vt.set(k, i, vij);
        }
        if s > negligible && s > T::zero() {
            u_cols.push(a[j].iter().map(|&x| x / s).collect());
        } else {
            u_cols.push(vec![T::zero(); rows]);
            deficient.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let u = DenseMatrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    Ok(SvdResult {
        u,
        singular_values,
        vt,
    })
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column (modified Gram–Schmidt over the standard basis).
fn complete_orthonormal<T: Scalar>(cols: &mut [Vec<T>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut basis_idx = 0;
    for &k in missing {
        while basis_idx < dim {
            let mut cand = vec![T::zero(); dim];
            cand[basis_idx] = T::one();
            basis_idx += 1;
            for _ in 0..2 {
                for (j, other) in cols.iter().enumerate() {
                    if j == k || other.iter().all(|&x| x == T::zero()) {
                        continue;
                    }
                    let proj = dot(&cand, other);
                    for (c, &o) in cand.iter_mut().zip(other) {
                        *c = *c - proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > T::lit(1e-6) {
                cols[k] = cand.into_iter().map(|c| c / norm).collect();
                break;
            }
        }
    }
}

/// Best rank-`r` approximation in Frobenius norm (truncated SVD).
pub fn best_rank_r<T: Scalar>(m: &DenseMatrix<T>, r: usize) -> Result<DenseMatrix<T>> {
    let k = m.rows.min(m.cols);
    if r > k {
        return Err(Error::Argument(format!(
            "rank {r} exceeds min dimension {k}"
        )));
    }
    if r == k {
        return Ok(m.clone());
    }
    Ok(svd(m)?.truncated(r))
}

/// Moore–Penrose pseudo-inverse; singular values at or below `tol · σ_max`
/// are treated as zero.
pub fn pseudo_inverse<T: Scalar>(m: &DenseMatrix<T>, tol: T) -> Result<DenseMatrix<T>> {
    if tol <= T::zero() {
        return Err(Error::Argument(
            "pseudo-inverse tolerance must be positive".into(),
        ));
    }
    let svd = svd(m)?;
    let (rows, cols) = m.shape();
    let mut out = DenseMatrix::zeros(cols, rows);
    let Some(&smax) = svd.singular_values.first() else {
        return Ok(out);
    };
    let cutoff = tol * smax;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == T::zero() {
            continue;
        }
        let inv = T::one() / s;
        // out += v_k · (1/s) · u_kᵀ
        for i in 0..cols {
            let vik = svd.vt.get(k, i) * inv;
            if vik == T::zero() {
                continue;
            }
            for j in 0..rows {
                let o = out.get(i, j) + vik * svd.u.get(j, k);
                out.set(i, j, o);
            }
        }
    }
    Ok(out)
}

/// `σ_max / σ_min` over singular values above `tol · σ_max`.
pub fn condition_number<T: Scalar>(m: &DenseMatrix<T>, tol: T) -> Result<T> {
    let svd = svd(m)?;
    let smax = svd.singular_values.first().copied().unwrap_or_else(T::zero);
    if smax == T::zero() {
        return Err(Error::UndefinedCondition("zero matrix".into()));
    }
    let cutoff = tol * smax;
    let smin = svd
        .singular_values
        .iter()
        .copied()
        .filter(|&s| s > cutoff)
        .fold(smax, T::min);
    Ok((smax / smin).max(T::one()))
}

/// Numerical rank: count of singular values above `tol · σ_max`.
pub fn numerical_rank<T: Scalar>(svd: &SvdResult<T>, tol: T) -> usize {
    let smax = svd.singular_values.first().copied().unwrap_or_else(T::zero);
    if smax == T::zero() {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > tol * smax)
        .count()
}
