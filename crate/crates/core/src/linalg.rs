//! Small dense linear-algebra helpers over row-major `Vec<f64>` storage,
//! backed by nalgebra for the factorizations.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Square matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parameter(format!("matrix with {n} rows is not square")));
        }
        Ok(SquareMatrix {
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(|r| r.to_vec()).collect()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `<A, B>_F = sum_ij a_ij b_ij`.
    pub fn inner(&self, other: &SquareMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &SquareMatrix) -> SquareMatrix {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Rows and columns reordered: `out[a][b] = self[order[a]][order[b]]`.
    pub fn permuted(&self, order: &[usize]) -> SquareMatrix {
        let n = order.len();
        let mut out = SquareMatrix::zeros(n);
        for (a, &i) in order.iter().enumerate() {
            for (b, &j) in order.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        if self.n == 0 {
            return Vec::new();
        }
        let m = self.to_nalgebra();
        let sym = (&m + m.transpose()) * 0.5;
        let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Lower Cholesky factor, row-major. No pivoting.
    pub fn cholesky(&self) -> Result<SquareMatrix> {
        let chol = nalgebra::Cholesky::new(self.to_nalgebra())
            .ok_or_else(|| Error::Construction("matrix is not positive definite".into()))?;
        let l = chol.l();
        let mut out = SquareMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..=i {
                out.set(i, j, l[(i, j)]);
            }
        }
        Ok(out)
    }

    /// `V A V^T`.
    pub fn congruence(&self, v: &SquareMatrix) -> SquareMatrix {
        let a = self.to_nalgebra();
        let vm = v.to_nalgebra();
        let r = &vm * a * vm.transpose();
        let mut out = SquareMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(i, j, r[(i, j)]);
            }
        }
        out
    }
}

/// Binomial coefficient `C(n, k)` in exact integer arithmetic.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}
