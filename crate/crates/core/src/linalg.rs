//! Dense row-major linear algebra in double precision.
//!
//! Everything needed to optimize through an orthogonal map `U = exp(A - A^T)`:
//! skew-symmetrization, the matrix exponential (scaling and squaring with
//! Padé approximants), its Fréchet derivative and the adjoint used to pull
//! gradients back onto the generator.

use crate::error::{dim_err, CedarError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Unchecked constructor for internal callers that already own valid data.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero; an Nx0 matrix has no meaningful rows to slice.
        let width = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data[..n * self.cols].chunks_exact(width)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(CedarError::Numeric(format!(
                "entry ({}, {}) is {}",
                p / self.cols.max(1),
                p % self.cols.max(1),
                self.data[p]
            ))),
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        gemm(self, false, rhs, false)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(dim_err(format!("{:?} vs {:?}", self.shape(), rhs.shape())));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    /// `self += s * rhs` for matrices of equal shape.
    pub(crate) fn axpy(&mut self, s: f64, rhs: &Matrix) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Induced 1-norm: largest absolute column sum.
    pub fn norm1(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix-vector product `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(dim_err(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `self^T * v`.
    pub fn tmul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(dim_err(format!(
                "vector of length {} against {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.row_iter().zip(v) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += s * a;
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// General product `op(a) * op(b)` where `op` optionally transposes.
/// Transposition is handled through strides, no copies are made.
pub fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (m, ka) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if ka != kb {
        return Err(dim_err(format!("cannot multiply {m}x{ka} by {kb}x{n}")));
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || ka == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the strides and dimensions describe exactly the owned buffers
    // of `a`, `b` and `out`, and `out` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// `X = A - A^T`, computed entrywise so that `X + X^T` is exactly zero.
pub fn skew_from(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(dim_err(format!(
            "skew_from needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    Ok(Matrix::from_fn(a.rows, a.cols, |i, j| {
        a.get(i, j) - a.get(j, i)
    }))
}

/// `‖U^T U - I‖_max`.
pub fn orthogonality_residual(u: &Matrix) -> f64 {
    let utu = gemm(u, true, u, false).expect("square by construction");
    let n = utu.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((utu.get(i, j) - target).abs());
        }
    }
    worst
}

/// Solves `a * x = b` by LU factorization with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if !a.is_square() || b.rows != n {
        return Err(dim_err(format!(
            "solve: lhs {:?}, rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut lu = a.data.clone();
    let mut x = b.data.clone();
    let nrhs = b.cols;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| lu[p * n + col].abs().total_cmp(&lu[q * n + col].abs()))
            .expect("non-empty range");
        if lu[pivot * n + col] == 0.0 {
            return Err(CedarError::Numeric("singular matrix in solve".into()));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            for j in 0..nrhs {
                x.swap(col * nrhs + j, pivot * nrhs + j);
            }
        }
        let diag = lu[col * n + col];
        let (upper, lower) = lu.split_at_mut((col + 1) * n);
        let pivot_row = &upper[col * n..(col + 1) * n];
        let (x_upper, x_lower) = x.split_at_mut((col + 1) * nrhs);
        let x_pivot = &x_upper[col * nrhs..];
        for (r, row) in lower.chunks_exact_mut(n).enumerate() {
            let f = row[col] / diag;
            if f == 0.0 {
                continue;
            }
            row[col] = f;
            for j in col + 1..n {
                row[j] -= f * pivot_row[j];
            }
            let xr = &mut x_lower[r * nrhs..(r + 1) * nrhs];
            for (xv, pv) in xr.iter_mut().zip(x_pivot) {
                *xv -= f * pv;
            }
        }
    }
    // back substitution
    for col in (0..n).rev() {
        let diag = lu[col * n + col];
        for j in 0..nrhs {
            x[col * nrhs + j] /= diag;
        }
        let (x_upper, x_rest) = x.split_at_mut(col * nrhs);
        let x_col = &x_rest[..nrhs];
        for r in 0..col {
            let f = lu[r * n + col];
            if f == 0.0 {
                continue;
            }
            for (xv, pv) in x_upper[r * nrhs..(r + 1) * nrhs].iter_mut().zip(x_col) {
                *xv -= f * pv;
            }
        }
    }
    let out = Matrix::from_vec(n, nrhs, x);
    out.check_finite()?;
    Ok(out)
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norms for which the [m/m] approximant meets unit roundoff.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539_398_330_063_23e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068e0;
const THETA13: f64 = 5.371920351148152e0;

/// Sum of `c_i * powers[i]` plus `c0 * I`.
fn lincomb(n: usize, c0: f64, terms: &[(f64, &Matrix)]) -> Matrix {
    let mut out = Matrix::identity(n).scale(c0);
    for (c, m) in terms {
        out.axpy(*c, m);
    }
    out
}

/// Odd/even parts `(U, V)` of the low-order Padé approximants.
fn pade_low(x: &Matrix, coef: &[f64]) -> Result<(Matrix, Matrix)> {
    let n = x.rows;
    let x2 = x.matmul(x)?;
    let mut powers = vec![Matrix::identity(n), x2.clone()];
    while powers.len() < coef.len() / 2 {
        let next = powers.last().expect("non-empty").matmul(&x2)?;
        powers.push(next);
    }
    let mut odd = Matrix::zeros(n, n);
    let mut even = Matrix::zeros(n, n);
    for (j, p) in powers.iter().enumerate() {
        even.axpy(coef[2 * j], p);
        odd.axpy(coef[2 * j + 1], p);
    }
    Ok((x.matmul(&odd)?, even))
}

fn pade13(x: &Matrix) -> Result<(Matrix, Matrix)> {
    let b = &PADE13;
    let n = x.rows;
    let x2 = x.matmul(x)?;
    let x4 = x2.matmul(&x2)?;
    let x6 = x4.matmul(&x2)?;
    let inner_u = lincomb(n, 0.0, &[(b[13], &x6), (b[11], &x4), (b[9], &x2)]);
    let mut u = x6.matmul(&inner_u)?;
    u.axpy(
        1.0,
        &lincomb(n, b[1], &[(b[7], &x6), (b[5], &x4), (b[3], &x2)]),
    );
    let u = x.matmul(&u)?;
    let inner_v = lincomb(n, 0.0, &[(b[12], &x6), (b[10], &x4), (b[8], &x2)]);
    let mut v = x6.matmul(&inner_v)?;
    v.axpy(
        1.0,
        &lincomb(n, b[0], &[(b[6], &x6), (b[4], &x4), (b[2], &x2)]),
    );
    Ok((u, v))
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant (orders 3 through 13, chosen from the 1-norm).
pub fn expm(x: &Matrix) -> Result<Matrix> {
    if !x.is_square() {
        return Err(dim_err(format!(
            "expm needs a square matrix, got {:?}",
            x.shape()
        )));
    }
    x.check_finite()?;
    let n = x.rows;
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let norm = x.norm1();
    let (u, v, squarings) = if norm <= THETA3 {
        let (u, v) = pade_low(x, &PADE3)?;
        (u, v, 0)
    } else if norm <= THETA5 {
        let (u, v) = pade_low(x, &PADE5)?;
        (u, v, 0)
    } else if norm <= THETA7 {
        let (u, v) = pade_low(x, &PADE7)?;
        (u, v, 0)
    } else if norm <= THETA9 {
        let (u, v) = pade_low(x, &PADE9)?;
        (u, v, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        let scaled = x.scale(2f64.powi(-s));
        let (u, v) = pade13(&scaled)?;
        (u, v, s)
    };
    let p = v.add(&u)?;
    let q = v.sub(&u)?;
    let mut r = solve(&q, &p)?;
    for _ in 0..squarings {
        r = r.matmul(&r)?;
    }
    r.check_finite()?;
    Ok(r)
}

/// Fréchet derivative `L(X, E)` of `expm` at `X` in direction `E`, read off
/// the upper-right block of `expm([[X, E], [0, X]])`.
pub fn expm_frechet(x: &Matrix, e: &Matrix) -> Result<Matrix> {
    if !x.is_square() || x.shape() != e.shape() {
        return Err(dim_err(format!(
            "expm_frechet: X {:?}, E {:?}",
            x.shape(),
            e.shape()
        )));
    }
    let n = x.rows;
    let mut block = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let xv = x.get(i, j);
            block.set(i, j, xv);
            block.set(n + i, n + j, xv);
            block.set(i, n + j, e.get(i, j));
        }
    }
    let big = expm(&block)?;
    Ok(Matrix::from_fn(n, n, |i, j| big.get(i, n + j)))
}

/// Gradient of `⟨G, expm(X)⟩` with respect to `X`, i.e. `L(X^T, G)`.
///
/// To reach a generator `A` with `X = A - A^T`, callers take `M - M^T` of
/// the returned `M`.
pub fn expm_grad_adjoint(x: &Matrix, g: &Matrix) -> Result<Matrix> {
    if !x.is_square() || x.shape() != g.shape() {
        return Err(dim_err(format!(
            "expm_grad_adjoint: X {:?}, G {:?}",
            x.shape(),
            g.shape()
        )));
    }
    expm_frechet(&x.transpose(), g)
}
