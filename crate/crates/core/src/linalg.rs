//! Small dense linear algebra: row-major matrices, reduced row echelon form
//! with partial pivoting, null vectors and rank factorizations, plus an exact
//! floating-point summation used wherever cancellation must be bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative pivot tolerance for rank decisions.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_row_major(rows.len(), cols, data)
    }

    /// Matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Matrix::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    found: col.len(),
                });
            }
            for (i, &v) in col.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Keep only the first `rows` rows.
    pub fn take_rows(&self, rows: usize) -> Matrix {
        let rows = rows.min(self.rows);
        Matrix {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Reduced row echelon form with partial pivoting.
#[derive(Clone, Debug)]
pub struct Echelon {
    /// Reduced matrix; rows beyond `pivots.len()` are numerically zero.
    pub reduced: Matrix,
    /// Pivot column of each nonzero row.
    pub pivots: Vec<usize>,
}

impl Echelon {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }
}

/// Gauss-Jordan elimination; entries with magnitude at most
/// `tolerance * max|a_ij|` are treated as zero.
pub fn rref(matrix: &Matrix, tolerance: f64) -> Echelon {
    let mut m = matrix.clone();
    let scale = matrix.max_abs();
    let threshold = tolerance * scale;
    let mut pivots = Vec::new();
    let mut row = 0;
    if scale == 0.0 {
        return Echelon { reduced: m, pivots };
    }
    for col in 0..m.cols {
        if row == m.rows {
            break;
        }
        let (best, best_abs) = (row..m.rows)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_abs <= threshold {
            for r in row..m.rows {
                m[(r, col)] = 0.0;
            }
            continue;
        }
        if best != row {
            for j in 0..m.cols {
                m.data.swap(best * m.cols + j, row * m.cols + j);
            }
        }
        let p = m[(row, col)];
        for j in col..m.cols {
            m[(row, j)] /= p;
        }
        m[(row, col)] = 1.0;
        for r in 0..m.rows {
            if r == row {
                continue;
            }
            let f = m[(r, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..m.cols {
                let v = m[(row, j)];
                m[(r, j)] -= f * v;
            }
            m[(r, col)] = 0.0;
        }
        pivots.push(col);
        row += 1;
    }
    Echelon { reduced: m, pivots }
}

/// A nonzero vector `u` with `A u ≈ 0`, or `None` when `A` has full column rank.
pub fn null_vector(matrix: &Matrix, tolerance: f64) -> Option<Vec<f64>> {
    let ech = rref(matrix, tolerance);
    let free = (0..matrix.cols).find(|c| !ech.pivots.contains(c))?;
    let mut u = vec![0.0; matrix.cols];
    u[free] = 1.0;
    for (r, &p) in ech.pivots.iter().enumerate() {
        u[p] = -ech.reduced[(r, free)];
    }
    Some(u)
}

/// `M ≈ M[:, pivots] · coefficients`, with `coefficients` of shape `rank × cols`.
#[derive(Clone, Debug)]
pub struct RankFactorization {
    pub pivots: Vec<usize>,
    pub coefficients: Matrix,
}

/// `A ≈ A[:, pivots] · coefficients`, with complete pivoting so that the
/// coefficients stay bounded. Pivots are listed in elimination order.
pub fn rank_factorization(matrix: &Matrix, tolerance: f64) -> RankFactorization {
    let mut m = matrix.clone();
    let threshold = tolerance * matrix.max_abs();
    let mut pivots: Vec<usize> = Vec::new();
    let mut used = vec![false; m.cols];
    for row in 0..m.rows {
        let mut best = (0, 0, 0.0);
        for r in row..m.rows {
            for c in (0..m.cols).filter(|&c| !used[c]) {
                let v = m[(r, c)].abs();
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        let (br, col, size) = best;
        if !(size > threshold) {
            break;
        }
        if br != row {
            for j in 0..m.cols {
                m.data.swap(br * m.cols + j, row * m.cols + j);
            }
        }
        let p = m[(row, col)];
        for j in 0..m.cols {
            m[(row, j)] /= p;
        }
        m[(row, col)] = 1.0;
        for r in 0..m.rows {
            let f = m[(r, col)];
            if r == row || f == 0.0 {
                continue;
            }
            for j in 0..m.cols {
                let v = m[(row, j)];
                m[(r, j)] -= f * v;
            }
            m[(r, col)] = 0.0;
        }
        used[col] = true;
        pivots.push(col);
    }
    RankFactorization {
        coefficients: m.take_rows(pivots.len()),
        pivots,
    }
}

pub fn numerical_rank(matrix: &Matrix, tolerance: f64) -> usize {
    rref(matrix, tolerance).rank()
}

/// Correctly rounded sum of the inputs (Shewchuk's partials). Terms that
/// cancel exactly in real arithmetic sum to exactly zero.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = ExactSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[derive(Clone, Debug, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // half-way correction, as in Python's fsum
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_cancels() {
        let a = 0.1;
        let b = 1e16;
        let c = 0.3;
        assert_eq!(exact_sum([a, b, c, -a, -b, -c]), 0.0);
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn null_vector_of_wide_matrix() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let u = null_vector(&m, PIVOT_TOLERANCE).unwrap();
        for i in 0..2 {
            let r: f64 = (0..3).map(|j| m[(i, j)] * u[j]).sum();
            assert!(r.abs() < 1e-12);
        }
        assert!(u.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn full_column_rank_has_no_null_vector() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(null_vector(&m, PIVOT_TOLERANCE).is_none());
    }

    #[test]
    fn rank_factorization_reconstructs() {
        let left = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]).unwrap();
        let right = Matrix::from_rows(&[vec![1.0, 0.0, 2.0, -1.0], vec![0.0, 1.0, 1.0, 3.0]]).unwrap();
        let m = left.mul(&right).unwrap();
        let f = rank_factorization(&m, PIVOT_TOLERANCE);
        assert_eq!(f.pivots.len(), 2);
        let basis = Matrix::from_columns(3, &f.pivots.iter().map(|&p| m.column(p)).collect::<Vec<_>>()).unwrap();
        let rebuilt = basis.mul(&f.coefficients).unwrap();
        for (a, b) in rebuilt.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        assert_eq!(numerical_rank(&Matrix::zeros(3, 4), PIVOT_TOLERANCE), 0);
    }
}
