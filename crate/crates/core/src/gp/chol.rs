use crate::{Error, Result};

/// Lower-triangular Cholesky factor stored row by row, so a new row can be
/// appended when the factored matrix grows by one row and column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cholesky {
    rows: Vec<Vec<f64>>,
    /// Sum of the factored matrix diagonal, for the jitter scale.
    trace: f64,
}

const JITTER: f64 = 1e-10;

impl Cholesky {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Entry `(i, j)` of the factor, zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j <= i {
            self.rows[i][j]
        } else {
            0.0
        }
    }

    /// Factors a symmetric positive definite row-major `n x n` matrix. On
    /// failure, `1e-10 * trace / n` is added to the diagonal once.
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, actual: a.len() });
        }
        match Self::try_factor(a, n, 0.0) {
            Some(c) => Ok(c),
            None => {
                let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
                let jitter = JITTER * trace / n.max(1) as f64;
                Self::try_factor(a, n, jitter)
                    .ok_or_else(|| Error::Numerical("matrix is not positive definite after jitter".into()))
            }
        }
    }

    fn try_factor(a: &[f64], n: usize, jitter: f64) -> Option<Self> {
        let mut out = Self::empty();
        for i in 0..n {
            let col = &a[i * n..i * n + i];
            if out.push_row(col, a[i * n + i] + jitter).is_err() {
                return None;
            }
        }
        Some(out)
    }

    fn push_row(&mut self, col: &[f64], diag: f64) -> Result<()> {
        let mut row = self.solve_lower(col)?;
        let d = diag - row.iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Numerical(format!("non-positive pivot {d}")));
        }
        row.push(d.sqrt());
        self.rows.push(row);
        self.trace += diag;
        Ok(())
    }

    /// Grows the factored matrix by one row/column: `col` holds the new
    /// off-diagonal entries, `diag` the new diagonal entry. A non-positive
    /// pivot is retried once with jitter.
    pub fn extend(&mut self, col: &[f64], diag: f64) -> Result<()> {
        if col.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: col.len() });
        }
        if self.push_row(col, diag).is_ok() {
            return Ok(());
        }
        let jitter = JITTER * (self.trace + diag) / (self.dim() + 1) as f64;
        self.push_row(col, diag + jitter)
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: b.len() });
        }
        let mut x = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row[..i].iter().zip(&x).map(|(l, v)| l * v).sum();
            x.push((b[i] - s) / row[i]);
        }
        Ok(x)
    }

    /// Solves `L^T x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: b.len() });
        }
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.rows[i][i];
            let xi = x[i];
            for (j, l) in self.rows[i][..i].iter().enumerate() {
                x[j] -= l * xi;
            }
        }
        Ok(x)
    }

    /// Solves `L L^T x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_upper(&self.solve_lower(b)?)
    }
}
