//! Dense row-major matrices with fixed summation order, and the Cholesky
//! routines used for every "unknown · H = RHS" solve in the crate.
//!
//! Conventions: weights are `d_out × d_in`, activations `d_in × n`, Hessians
//! `d_in × d_in`. All reductions run in index order so results are
//! bit-reproducible on a given platform.

use std::fmt;

use crate::error::{PmqError, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PmqError::shape(
                "Matrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(PmqError::shape("hcat", self.rows, other.rows));
        }
        Ok(Matrix::from_fn(
            self.rows,
            self.cols + other.cols,
            |i, j| {
                if j < self.cols {
                    self.get(i, j)
                } else {
                    other.get(i, j - self.cols)
                }
            },
        ))
    }

    /// `self · other`, accumulating each output entry in increasing inner index.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(PmqError::shape(
                "matmul",
                format!("lhs cols = rhs rows ({})", self.cols),
                format!("rhs rows {}", other.rows),
            ));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: p,
            data: out,
        })
    }

    /// `self · selfᵀ`, symmetric by construction (the lower triangle is mirrored).
    pub fn gram(&self) -> Matrix {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let ri = self.row(i);
            for j in 0..=i {
                let rj = self.row(j);
                let mut s = 0.0;
                for (a, b) in ri.iter().zip(rj) {
                    s += a * b;
                }
                out.data[i * n + j] = s;
                out.data[j * n + i] = s;
            }
        }
        out
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(PmqError::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(PmqError::shape(
                "add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Adds `v` to every diagonal entry of a square matrix.
    pub fn add_diag(&self, v: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += v;
        }
        out
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let tol = 1e-9 * self.norm_inf();
        (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Adds `bias[r]` to every entry of row `r`.
    pub fn add_column_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.rows {
            return Err(PmqError::shape("bias broadcast", self.rows, bias.len()));
        }
        for (r, b) in bias.iter().enumerate() {
            for v in self.row_mut(r) {
                *v += b;
            }
        }
        Ok(())
    }
}

/// Σ a_jk² in row-major order.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for v in a.data() {
        s += v * v;
    }
    s
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Lower-triangular Cholesky factor `L` with `H = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

/// Pivots at or below this fraction of the largest diagonal entry are treated
/// as numerically zero.
const PIVOT_RTOL: f64 = 1e-13;

impl Cholesky {
    pub fn factor(h: &Matrix) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n {
            return Err(PmqError::shape(
                "cholesky",
                "square",
                format!("{:?}", h.shape()),
            ));
        }
        let max_diag = h.diag().into_iter().fold(0.0, f64::max);
        let floor = PIVOT_RTOL * max_diag;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = h.get(j, j);
            for k in 0..j {
                let v = l.get(j, k);
                d -= v * v;
            }
            if !(d > floor) {
                return Err(PmqError::Singular { pivot: j });
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut s = h.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Cholesky { l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `H x = b` in place.
    pub fn solve_vec(&self, b: &mut [f64]) {
        let n = self.dim();
        let l = &self.l;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l.get(i, k) * b[k];
            }
            b[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l.get(k, i) * b[k];
            }
            b[i] = s / l.get(i, i);
        }
    }

    /// Returns `S` with `S · H = rhs`. H is symmetric, so each row of S solves
    /// `H sᵀ = rhsᵀ`.
    pub fn solve_right(&self, rhs: &Matrix) -> Result<Matrix> {
        if rhs.cols() != self.dim() {
            return Err(PmqError::shape("cholesky_solve", self.dim(), rhs.cols()));
        }
        let mut out = rhs.clone();
        for r in 0..out.rows() {
            self.solve_vec(out.row_mut(r));
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::identity(n);
        for r in 0..n {
            self.solve_vec(inv.row_mut(r));
        }
        // symmetrize away rounding asymmetry
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
                inv.set(i, j, v);
                inv.set(j, i, v);
            }
        }
        inv
    }
}

/// Returns `S` with `S · h = rhs` for symmetric positive-definite `h`.
pub fn cholesky_solve(h: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    Cholesky::factor(h)?.solve_right(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let a = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        assert_eq!(
            a.matmul(&b).unwrap(),
            Matrix::from_rows(&[vec![3.0], vec![7.0]])
        );
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(PmqError::Shape { .. })));
    }

    #[test]
    fn frobenius_hand() {
        assert_eq!(frobenius_sq(&Matrix::zeros(3, 2)), 0.0);
        assert_eq!(frobenius_sq(&Matrix::from_rows(&[vec![3.0, 4.0]])), 25.0);
    }

    #[test]
    fn cholesky_trivial_cases() {
        let r = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![4.0, 0.0, 1.0]]);
        assert_eq!(cholesky_solve(&Matrix::identity(3), &r).unwrap(), r);

        let h = Matrix::identity(3).scale(2.0);
        let s = cholesky_solve(&h, &Matrix::from_rows(&[vec![2.0, 4.0, 6.0]])).unwrap();
        let want = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert!(s.sub(&want).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn cholesky_reports_pivot() {
        let h = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ]);
        match Cholesky::factor(&h) {
            Err(PmqError::Singular { pivot }) => assert_eq!(pivot, 2),
            other => panic!("expected singular error, got {other:?}"),
        }
        let neg = Matrix::from_rows(&[vec![-1.0]]);
        assert!(matches!(
            Cholesky::factor(&neg),
            Err(PmqError::Singular { pivot: 0 })
        ));
    }

    #[test]
    fn gram_matches_matmul_transpose() {
        let x = Matrix::from_fn(3, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 2.0) * 0.3);
        let g = x.gram();
        let m = x.matmul(&x.transpose()).unwrap();
        for (a, b) in g.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
