//! Thin wrappers over nalgebra / nalgebra-sparse used by the assemblers.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::error::{FsiError, Result};

/// Triplet accumulator for a square or rectangular sparse matrix.
#[derive(Debug, Clone)]
pub struct Triplets {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Triplets { rows, cols, entries: Vec::new() }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((r, c, v));
        }
    }

    /// Adds a dense local block `m` (row-major, `idx.len()` squared) at indices `idx`.
    pub fn add_block(&mut self, idx: &[usize], m: &[f64]) {
        let k = idx.len();
        for a in 0..k {
            for b in 0..k {
                self.push(idx[a], idx[b], m[a * k + b]);
            }
        }
    }

    pub fn extend(&mut self, other: &Triplets) {
        self.entries.extend_from_slice(&other.entries);
    }

    pub fn to_csr(&self) -> CsrMatrix<f64> {
        let mut coo = CooMatrix::new(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            coo.push(r, c, v);
        }
        CsrMatrix::from(&coo)
    }

    pub fn to_csc(&self) -> CscMatrix<f64> {
        let mut coo = CooMatrix::new(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            coo.push(r, c, v);
        }
        CscMatrix::from(&coo)
    }
}

/// y = A x.
pub fn spmv(a: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    for (r, row) in a.row_iter().enumerate() {
        let mut s = 0.0;
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            s += v * x[c];
        }
        y[r] = s;
    }
    y
}

/// y = Aᵀ x.
pub fn spmv_t(a: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.ncols()];
    for (r, row) in a.row_iter().enumerate() {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            y[c] += v * xr;
        }
    }
    y
}

/// Sparse Cholesky factor of a symmetric positive definite matrix.
pub struct SparseSpd {
    chol: CscCholesky<f64>,
    n: usize,
}

impl SparseSpd {
    pub fn factor(a: &CscMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let chol = CscCholesky::factor(a).map_err(|e| FsiError::Solver(format!("sparse Cholesky: {e:?}")))?;
        Ok(SparseSpd { chol, n })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = DMatrix::from_column_slice(self.n, 1, b);
        self.chol.solve(&rhs).as_slice().to_vec()
    }
}

/// Dense symmetric positive definite solve; `a` is row-major `n × n`.
pub struct DenseSpd {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseSpd {
    pub fn factor(n: usize, a: &[f64]) -> Result<Self> {
        let m = DMatrix::from_row_slice(n, n, a);
        let chol = m.cholesky().ok_or_else(|| FsiError::Solver("dense matrix not positive definite".into()))?;
        Ok(DenseSpd { chol })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
