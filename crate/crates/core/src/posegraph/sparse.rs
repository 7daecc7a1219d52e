//! Symmetric block-sparse matrices with 7x7 blocks and their Cholesky factor.

use crate::liegroup::{Matrix7, Vector7};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// Lower triangle of a symmetric block matrix, stored by block column.
#[derive(Debug, Clone)]
pub struct BlockSparse {
    diag: Vec<Matrix7>,
    /// `lower[j][i]` is block `(i, j)` for `i > j`.
    lower: Vec<BTreeMap<usize, Matrix7>>,
}

impl BlockSparse {
    pub fn new(n: usize) -> Self {
        Self {
            diag: vec![Matrix7::zeros(); n],
            lower: vec![BTreeMap::new(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Adds `m` to block `(i, j)` (and implicitly its transpose to `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, m: &Matrix7) {
        if i == j {
            self.diag[i] += m;
        } else if i > j {
            *self.lower[j].entry(i).or_insert_with(Matrix7::zeros) += m;
        } else {
            *self.lower[i].entry(j).or_insert_with(Matrix7::zeros) += m.transpose();
        }
    }

    pub fn diagonal(&self, i: usize) -> &Matrix7 {
        &self.diag[i]
    }

    pub fn diagonal_mut(&mut self, i: usize) -> &mut Matrix7 {
        &mut self.diag[i]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(7 * n, 7 * n);
        for (i, d) in self.diag.iter().enumerate() {
            m.view_mut((7 * i, 7 * i), (7, 7)).copy_from(d);
        }
        for (j, col) in self.lower.iter().enumerate() {
            for (&i, b) in col {
                m.view_mut((7 * i, 7 * j), (7, 7)).copy_from(b);
                m.view_mut((7 * j, 7 * i), (7, 7)).copy_from(&b.transpose());
            }
        }
        m
    }

    /// Right-looking block Cholesky `A = L L^T` in index order. Fill-in
    /// blocks are created as needed. `None` if a pivot is not positive definite.
    pub fn cholesky(&self) -> Option<BlockCholesky> {
        let n = self.dim();
        let mut diag = self.diag.clone();
        let mut lower = self.lower.clone();
        let mut l_diag = Vec::with_capacity(n);
        for k in 0..n {
            let lkk = diag[k].cholesky()?.l();
            let col: Vec<(usize, Matrix7)> = lower[k]
                .iter()
                .map(|(&i, b)| {
                    // L_ik = B L_kk^{-T}  <=>  L_kk L_ik^T = B^T
                    let x = lkk
                        .solve_lower_triangular(&b.transpose())
                        .expect("nonsingular pivot");
                    (i, x.transpose())
                })
                .collect();
            for (a, (i, lik)) in col.iter().enumerate() {
                diag[*i] -= lik * lik.transpose();
                for (j, ljk) in &col[..a] {
                    // i > j because the map iterates in ascending order
                    *lower[*j].entry(*i).or_insert_with(Matrix7::zeros) -= lik * ljk.transpose();
                }
            }
            lower[k] = col.into_iter().collect();
            l_diag.push(lkk);
        }
        Some(BlockCholesky { diag: l_diag, lower })
    }
}

#[derive(Debug, Clone)]
pub struct BlockCholesky {
    diag: Vec<Matrix7>,
    lower: Vec<BTreeMap<usize, Matrix7>>,
}

impl BlockCholesky {
    /// Number of stored off-diagonal blocks, including fill-in.
    pub fn nnz_blocks(&self) -> usize {
        self.lower.iter().map(|c| c.len()).sum()
    }

    pub fn solve(&self, b: &[Vector7]) -> Vec<Vector7> {
        let n = self.diag.len();
        let mut y = b.to_vec();
        // forward: L y = b
        for k in 0..n {
            let yk = self.diag[k].solve_lower_triangular(&y[k]).expect("nonsingular pivot");
            for (&i, lik) in &self.lower[k] {
                y[i] -= lik * yk;
            }
            y[k] = yk;
        }
        // backward: L^T x = y
        let mut x = y;
        for k in (0..n).rev() {
            let mut rhs = x[k];
            for (&i, lik) in &self.lower[k] {
                rhs -= lik.transpose() * x[i];
            }
            x[k] = self.diag[k]
                .transpose()
                .solve_upper_triangular(&rhs)
                .expect("nonsingular pivot");
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let mut a = BlockSparse::new(n);
        // chain plus a few long-range couplings to force fill-in
        let mut pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        pairs.extend([(0, 11), (2, 7), (5, 10)]);
        for (i, j) in pairs {
            let j7 = Matrix7::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let h = j7.transpose() * j7;
            a.add(i, i, &h);
            a.add(j, j, &h);
            a.add(i, j, &(-h));
        }
        for i in 0..n {
            *a.diagonal_mut(i) += Matrix7::identity() * 0.5;
        }
        let b: Vec<Vector7> = (0..n).map(|_| Vector7::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let x = a.cholesky().unwrap().solve(&b);
        let dense = a.to_dense();
        let bd = DVector::from_iterator(7 * n, b.iter().flat_map(|v| v.iter().copied()));
        let xd = dense.clone().cholesky().unwrap().solve(&bd);
        for i in 0..n {
            for r in 0..7 {
                assert!((x[i][r] - xd[7 * i + r]).abs() < 1e-9);
            }
        }
        let resid = dense * DVector::from_iterator(7 * n, x.iter().flat_map(|v| v.iter().copied())) - bd;
        assert!(resid.norm() < 1e-9);
    }
}
