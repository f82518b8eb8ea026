//! Small linear-algebra helpers: a banded symmetric positive-definite
//! Cholesky factorization (used for large 1-D test-space Gram matrices) and a
//! row-sparse square matrix with an order-directed triangular solve (used for
//! optimal-pair Petrov-Galerkin systems).

use crate::{DdmresError, Result};
use nalgebra::{DMatrix, DVector};

/// Symmetric matrix stored by its lower band: `bandwidth` sub-diagonals.
#[derive(Debug, Clone)]
pub struct SymBanded {
    n: usize,
    bandwidth: usize,
    /// Column-major band storage: entry `(i, j)` with `0 <= i - j <= bandwidth`
    /// lives at `data[j * (bandwidth + 1) + (i - j)]`.
    data: Vec<f64>,
}

impl SymBanded {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        SymBanded { n, bandwidth, data: vec![0.0; n * (bandwidth + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bandwidth {
            0.0
        } else {
            self.data[lo * (self.bandwidth + 1) + (hi - lo)]
        }
    }

    /// Adds `v` to entry `(i, j)` (and by symmetry `(j, i)`); panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        assert!(hi - lo <= self.bandwidth, "entry ({i},{j}) outside bandwidth {}", self.bandwidth);
        self.data[lo * (self.bandwidth + 1) + (hi - lo)] += v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Banded Cholesky factorization `A = L L^T`; fails if not positive definite.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut l = self.data.clone();
        let idx = |i: usize, j: usize| j * (bw + 1) + (i - j);
        for j in 0..n {
            let start = j.saturating_sub(bw);
            let mut d = l[idx(j, j)];
            for k in start..j {
                let v = l[idx(j, k)];
                d -= v * v;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(DdmresError::SingularGram(format!(
                    "banded Cholesky pivot {d:e} at column {j}"
                )));
            }
            let dj = d.sqrt();
            l[idx(j, j)] = dj;
            let last = (j + bw).min(n - 1);
            for i in (j + 1)..=last {
                let mut s = l[idx(i, j)];
                let kstart = i.saturating_sub(bw).max(start);
                for k in kstart..j {
                    s -= l[idx(i, k)] * l[idx(j, k)];
                }
                l[idx(i, j)] = s / dj;
            }
        }
        Ok(BandedCholesky { n, bandwidth: bw, l })
    }
}

/// Lower-triangular banded Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bandwidth);
        assert_eq!(b.len(), n);
        let idx = |i: usize, j: usize| j * (bw + 1) + (i - j);
        // forward: L y = b
        for j in 0..n {
            let y = b[j] / self.l[idx(j, j)];
            b[j] = y;
            let last = (j + bw).min(n - 1);
            for i in (j + 1)..=last {
                b[i] -= self.l[idx(i, j)] * y;
            }
        }
        // backward: L^T x = y
        for j in (0..n).rev() {
            let mut s = b[j];
            let last = (j + bw).min(n - 1);
            for i in (j + 1)..=last {
                s -= self.l[idx(i, j)] * b[i];
            }
            b[j] = s / self.l[idx(j, j)];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.as_slice().to_vec();
        self.solve_in_place(&mut x);
        DVector::from_vec(x)
    }
}

/// Square matrix stored by sparse rows; row `i` holds `(column, value)` pairs.
#[derive(Debug, Clone)]
pub struct SparseRows {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(n: usize) -> Self {
        SparseRows { n, rows: vec![Vec::new(); n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        let row = &mut self.rows[i];
        if let Some(entry) = row.iter_mut().find(|(c, _)| *c == j) {
            entry.1 += v;
        } else {
            row.push((j, v));
        }
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Solves `A x = b` by back-substitution along `order`: the matrix must be
    /// upper triangular with respect to the given unknown ordering, i.e. row
    /// `order[k]` may couple only to columns `order[k..]`. Rows and columns use
    /// the same index set. Fails on a (near-)zero diagonal or an entry that
    /// violates the triangular structure beyond a drop tolerance.
    pub fn solve_ordered(&self, b: &[f64], order: &[usize]) -> Result<Vec<f64>> {
        assert_eq!(b.len(), self.n);
        assert_eq!(order.len(), self.n);
        let mut position = vec![0usize; self.n];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let scale: f64 = self
            .rows
            .iter()
            .flat_map(|r| r.iter().map(|&(_, v)| v.abs()))
            .fold(0.0, f64::max);
        let drop_tol = scale * 1e-12;
        let mut x = vec![0.0; self.n];
        for &i in order.iter().rev() {
            let mut rhs = b[i];
            let mut diag = 0.0;
            for &(j, v) in &self.rows[i] {
                if j == i {
                    diag += v;
                } else if position[j] > position[i] {
                    rhs -= v * x[j];
                } else if v.abs() > drop_tol {
                    return Err(DdmresError::SingularSystem(format!(
                        "entry ({i},{j}) = {v:e} violates the solve ordering"
                    )));
                }
            }
            if diag.abs() <= drop_tol {
                return Err(DdmresError::SingularSystem(format!(
                    "zero diagonal at unknown {i}"
                )));
            }
            x[i] = rhs / diag;
        }
        Ok(x)
    }
}

/// Dense LU solve with a singularity check.
pub fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.lu();
    lu.solve(&b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| DdmresError::SingularSystem("dense LU solve failed".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd_band(n: usize, bw: usize) -> SymBanded {
        let mut a = SymBanded::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 4.0 + i as f64 * 0.1);
            for d in 1..=bw {
                if i + d < n {
                    a.add(i + d, i, -1.0 / d as f64);
                }
            }
        }
        a
    }

    #[test]
    fn banded_cholesky_matches_dense_solve() {
        for &(n, bw) in &[(6usize, 1usize), (12, 3), (25, 5)] {
            let a = spd_band(n, bw);
            let b = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin() + 1.0);
            let x = a.cholesky().unwrap().solve(&b);
            let xd = a.to_dense().lu().solve(&b).unwrap();
            for i in 0..n {
                assert_relative_eq!(x[i], xd[i], max_relative = 1e-12, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn banded_cholesky_rejects_indefinite() {
        let mut a = SymBanded::zeros(3, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, -2.0);
        a.add(2, 2, 1.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn ordered_sparse_solve_handles_permuted_triangle() {
        // Upper triangular in the order [2, 0, 1]: row 2 couples to {2, 0, 1},
        // row 0 to {0, 1}, row 1 to {1}.
        let mut a = SparseRows::new(3);
        a.add(2, 2, 2.0);
        a.add(2, 0, 1.0);
        a.add(2, 1, -1.0);
        a.add(0, 0, 3.0);
        a.add(0, 1, 0.5);
        a.add(1, 1, -4.0);
        let b = vec![1.0, 2.0, 3.0];
        let x = a.solve_ordered(&b, &[2, 0, 1]).unwrap();
        let xd = a.to_dense().lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(x[i], xd[i], max_relative = 1e-13);
        }
    }

    #[test]
    fn ordered_sparse_solve_rejects_structure_violation() {
        let mut a = SparseRows::new(2);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 0.5); // couples backward in the order [0, 1]
        assert!(a.solve_ordered(&[1.0, 1.0], &[0, 1]).is_err());
    }
}
