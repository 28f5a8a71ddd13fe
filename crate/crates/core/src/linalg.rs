//! Dense row-major `f64` matrices and the spectral routines the probes rest on.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. Tall inputs are first
//! reduced with a Householder QR so that the Jacobi sweeps run on the small
//! `n x n` triangular factor; wide inputs are handled through the transpose.

use std::fmt;

use thiserror::Error;

/// Maximum number of Jacobi sweeps before [`svd`] gives up.
pub const MAX_SWEEPS: usize = 100;

/// Relative off-diagonal threshold: a column pair is considered orthogonal
/// once `|<a_p, a_q>| <= JACOBI_TOL * |a_p| |a_q|`.
pub const JACOBI_TOL: f64 = 1e-12;

/// Singular values below `RANK_TOL * s_max` are reported as exact zeros.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {actual}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{0}: empty matrix")]
    Empty(&'static str),
    #[error("jacobi svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: i / cols.max(1),
                col: i % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on a zero-width matrix would panic
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable entries; callers keep them finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        Matrix::from_fn(self.rows, k, |r, c| self.get(r, c))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Scalar types the network and the dot kernel run in.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + fmt::Debug
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` for an `m x k` by `k x n` product, each
    /// operand addressed through row and column strides. `C` is not read when
    /// `beta` is zero.
    ///
    /// # Safety
    /// Every addressed element of the three operands must be in bounds and
    /// `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (*const Self, isize, isize),
        b: (*const Self, isize, isize),
        beta: Self,
        c: (*mut Self, isize, isize),
    );
}

impl Real for f32 {
    const BYTES: usize = 4;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (*const Self, isize, isize),
        b: (*const Self, isize, isize),
        beta: Self,
        c: (*mut Self, isize, isize),
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, c.2)
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (*const Self, isize, isize),
        b: (*const Self, isize, isize),
        beta: Self,
        c: (*mut Self, isize, isize),
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, c.2)
    }
}

/// Accumulator lanes of [`dot_t`]. The lane count fixes the summation order,
/// so results do not depend on how the compiler vectorizes the loop.
pub const DOT_LANES: usize = 8;

/// Inner product with `DOT_LANES` independent accumulators, combined
/// pairwise, then the tail.
#[inline]
pub fn dot_t<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); DOT_LANES];
    let ca = a.chunks_exact(DOT_LANES);
    let cb = b.chunks_exact(DOT_LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..DOT_LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    reduce_lanes(&acc) + tail
}

#[inline]
pub(crate) fn reduce_lanes<T: Real>(acc: &[T; DOT_LANES]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot_t(a, b)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    pub(crate) fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a b + beta * c` with `c` row-major.
pub(crate) fn gemm<T: Real>(alpha: T, a: View<T>, b: View<T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if c.is_empty() {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is an
    // exclusive borrow distinct from the shared operands.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            (a.data.as_ptr(), a.rs as isize, a.cs as isize),
            (b.data.as_ptr(), b.rs as isize, b.cs as isize),
            beta,
            (c.as_mut_ptr(), b.cols as isize, 1),
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(
        1.0,
        View::row_major(&a.data, a.rows, a.cols),
        View::row_major(&b.data, b.rows, b.cols),
        0.0,
        &mut c.data,
    );
    Ok(c)
}

/// `a * b^T`
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_transpose_b",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(
        1.0,
        View::row_major(&a.data, a.rows, a.cols),
        View::row_major(&b.data, b.rows, b.cols).t(),
        0.0,
        &mut c.data,
    );
    Ok(c)
}

/// Orthogonal projection of `x` onto the span of the (orthonormal) columns
/// of `basis`: `sum_i (x . p_i) p_i`.
pub fn project_onto_basis(x: &[f64], basis: &Matrix) -> Result<Vec<f64>> {
    if x.len() != basis.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "project_onto_basis",
            left: (x.len(), 1),
            right: basis.shape(),
        });
    }
    let coeffs = basis_coefficients(x, basis);
    Ok((0..basis.rows).map(|r| dot(basis.row(r), &coeffs)).collect())
}

/// The coordinates `basis^T x`.
pub fn basis_coefficients(x: &[f64], basis: &Matrix) -> Vec<f64> {
    let mut coeffs = vec![0.0; basis.cols];
    for (r, &xr) in x.iter().enumerate() {
        if xr != 0.0 {
            axpy(xr, basis.row(r), &mut coeffs);
        }
    }
    coeffs
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x r` with orthonormal columns, `r = min(m, n)`.
    pub left: Matrix,
    /// Descending, non-negative; entries below the rank tolerance are 0.
    pub singular_values: Vec<f64>,
    /// `n x r` with orthonormal columns.
    pub right: Matrix,
}

impl SvdResult {
    /// Number of singular values that are not treated as zero.
    pub fn rank(&self) -> usize {
        self.singular_values.iter().filter(|s| **s > 0.0).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.left.clone();
        for r in 0..us.rows {
            for (c, s) in self.singular_values.iter().enumerate() {
                us.data[r * us.cols + c] *= s;
            }
        }
        matmul_transpose_b(&us, &self.right).expect("svd factors have matching shapes")
    }
}

/// Singular values and right singular vectors only. This is what PCA needs,
/// and skipping the left factor saves the `Q` application on tall inputs.
#[derive(Debug, Clone)]
pub struct RightSvd {
    pub singular_values: Vec<f64>,
    /// `n x r`, columns are the right singular vectors.
    pub right: Matrix,
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    check_svd_input(a)?;
    if a.rows >= a.cols {
        let (s, v, u) = tall_svd(a, true)?;
        Ok(SvdResult {
            left: u.expect("left factor requested"),
            singular_values: s,
            right: v,
        })
    } else {
        let (s, v, u) = tall_svd(&a.transpose(), true)?;
        Ok(SvdResult {
            left: v,
            singular_values: s,
            right: u.expect("left factor requested"),
        })
    }
}

pub fn right_svd(a: &Matrix) -> Result<RightSvd> {
    check_svd_input(a)?;
    if a.rows >= a.cols {
        let (s, v, _) = tall_svd(a, false)?;
        Ok(RightSvd {
            singular_values: s,
            right: v,
        })
    } else {
        let (s, _, u) = tall_svd(&a.transpose(), true)?;
        Ok(RightSvd {
            singular_values: s,
            right: u.expect("left factor requested"),
        })
    }
}

fn check_svd_input(a: &Matrix) -> Result<()> {
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::Empty("svd"));
    }
    if let Some(i) = a.data.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: i / a.cols,
            col: i % a.cols,
        });
    }
    Ok(())
}

/// Column-major scratch storage.
struct ColMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColMajor {
    fn from_matrix(a: &Matrix) -> Self {
        let mut data = vec![0.0; a.rows * a.cols];
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[c * a.rows + r] = a.data[r * a.cols + c];
            }
        }
        Self {
            rows: a.rows,
            cols: a.cols,
            data,
        }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
        }
    }

    #[inline]
    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    #[inline]
    fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    /// Mutable views of two distinct columns, `p < q`.
    #[inline]
    fn col_pair(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let n = self.rows;
        let (lo, hi) = self.data.split_at_mut(q * n);
        (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
    }

    fn to_matrix_cols(&self, order: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.rows, order.len());
        for (j, &c) in order.iter().enumerate() {
            for (r, v) in self.col(c).iter().enumerate() {
                m.data[r * order.len() + j] = *v;
            }
        }
        m
    }
}

/// Householder reflectors of a thin QR, kept so `Q` can be applied later.
struct Householder {
    /// Reflector `j` acts on rows `j..m`; `vectors[j]` has length `m - j`.
    vectors: Vec<Vec<f64>>,
    betas: Vec<f64>,
}

/// Factorizes the tall `m x n` matrix in place and returns `R` (`n x n`,
/// column-major) together with the reflectors.
fn householder_qr(a: &mut ColMajor) -> (ColMajor, Householder) {
    let n = a.cols;
    let mut vectors = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for j in 0..n {
        let x = &a.col(j)[j..];
        let alpha_norm = norm(x);
        let mut v = x.to_vec();
        let beta = if alpha_norm == 0.0 {
            0.0
        } else {
            let alpha = if x[0] >= 0.0 { -alpha_norm } else { alpha_norm };
            v[0] -= alpha;
            let vnorm2 = dot(&v, &v);
            if vnorm2 == 0.0 {
                0.0
            } else {
                2.0 / vnorm2
            }
        };
        if beta != 0.0 {
            for k in j..n {
                let col = &mut a.col_mut(k)[j..];
                let f = beta * dot(&v, col);
                axpy(-f, &v, col);
            }
        }
        vectors.push(v);
        betas.push(beta);
    }
    let mut r = ColMajor {
        rows: n,
        cols: n,
        data: vec![0.0; n * n],
    };
    for c in 0..n {
        let src = a.col(c);
        r.col_mut(c)[..=c].copy_from_slice(&src[..=c]);
    }
    (r, Householder { vectors, betas })
}

impl Householder {
    /// Computes `Q * [x; 0]` for an `n`-vector `x`, producing an `m`-vector.
    fn apply_q(&self, x: &[f64], m: usize) -> Vec<f64> {
        let mut y = vec![0.0; m];
        y[..x.len()].copy_from_slice(x);
        for j in (0..self.vectors.len()).rev() {
            let beta = self.betas[j];
            if beta == 0.0 {
                continue;
            }
            let v = &self.vectors[j];
            let seg = &mut y[j..];
            let f = beta * dot(v, seg);
            axpy(-f, v, seg);
        }
        y
    }
}

/// Runs Hestenes sweeps on the columns of `w`, accumulating rotations in `v`.
fn jacobi_sweeps(w: &mut ColMajor, v: &mut ColMajor) -> Result<usize> {
    let n = w.cols;
    let mut norms2: Vec<f64> = (0..n).map(|c| dot(w.col(c), w.col(c))).collect();
    for sweep in 1..=MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta) = (norms2[p], norms2[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(w.col(p), w.col(q));
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w, p, q, c, s);
                rotate(v, p, q, c, s);
                norms2[p] = alpha - t * gamma;
                norms2[q] = beta + t * gamma;
            }
        }
        // refresh cached norms so rounding in the incremental update cannot accumulate
        for (c, n2) in norms2.iter_mut().enumerate() {
            *n2 = dot(w.col(c), w.col(c));
        }
        if !rotated {
            return Ok(sweep);
        }
    }
    Err(LinalgError::NoConvergence {
        sweeps: MAX_SWEEPS,
    })
}

#[inline]
fn rotate(m: &mut ColMajor, p: usize, q: usize, c: f64, s: f64) {
    let (cp, cq) = m.col_pair(p, q);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// SVD of a matrix with `rows >= cols`. Returns (singular values, V, U).
fn tall_svd(a: &Matrix, want_left: bool) -> Result<(Vec<f64>, Matrix, Option<Matrix>)> {
    let (m, n) = a.shape();
    let mut work = ColMajor::from_matrix(a);
    let (mut r, qr) = householder_qr(&mut work);
    let mut v = ColMajor::identity(n);
    jacobi_sweeps(&mut r, &mut v)?;

    let raw: Vec<f64> = (0..n).map(|c| norm(r.col(c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the original column order among equal values
    order.sort_by(|&x, &y| raw[y].total_cmp(&raw[x]));
    let s_max = raw[order[0]];
    let cutoff = RANK_TOL * s_max;
    let singular_values: Vec<f64> = order
        .iter()
        .map(|&c| if raw[c] > cutoff { raw[c] } else { 0.0 })
        .collect();
    let right = v.to_matrix_cols(&order);

    let left = if want_left {
        // left vectors of R, completed to an orthonormal basis where s == 0
        let mut ur: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (j, &c) in order.iter().enumerate() {
            if singular_values[j] > 0.0 {
                let s = raw[c];
                ur.push(r.col(c).iter().map(|x| x / s).collect());
            }
        }
        complete_orthonormal(&mut ur, n);
        let mut u = Matrix::zeros(m, n);
        for (j, col) in ur.iter().enumerate() {
            let full = qr.apply_q(col, m);
            for (row, val) in full.iter().enumerate() {
                u.data[row * n + j] = *val;
            }
        }
        Some(u)
    } else {
        None
    };
    Ok((singular_values, right, left))
}

/// Extends a set of orthonormal `n`-vectors to `n` of them with
/// Gram-Schmidt against the canonical basis.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, n: usize) {
    let mut e = 0;
    while basis.len() < n && e < n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        e += 1;
        // two passes of classical Gram-Schmidt
        for _ in 0..2 {
            for b in basis.iter() {
                let f = dot(b, &cand);
                axpy(-f, b, &mut cand);
            }
        }
        let nrm = norm(&cand);
        if nrm > 0.5 {
            cand.iter_mut().for_each(|x| *x /= nrm);
            basis.push(cand);
        }
    }
}
