//! Dense Hermitian eigensolvers on the connected blocks of a sparse operator.

use std::collections::BTreeMap;

use ndarray::Array2;
use ndarray_linalg::{EigValsh, Eigh, UPLO};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{OperatorMatrix, C64};

/// `log Σ exp(x_i)`; `−∞` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index sets of the connected components of the sparsity graph of `op`,
/// each sorted, ordered by smallest member. A Hermitian operator is block
/// diagonal over these sets.
pub fn connected_components(op: &OperatorMatrix) -> Vec<Vec<usize>> {
    let n = op.dim();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, row) in op.rows().iter().enumerate() {
        for &(j, _) in row {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Eigenvectors of one block, stored as columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum BlockVectors {
    Real(Array2<f64>),
    Complex(Array2<C64>),
}

impl BlockVectors {
    pub fn get(&self, row: usize, col: usize) -> C64 {
        match self {
            BlockVectors::Real(m) => C64::new(m[[row, col]], 0.0),
            BlockVectors::Complex(m) => m[[row, col]],
        }
    }
}

/// Eigenvalues of a real symmetric matrix, ascending.
pub fn symmetric_eigenvalues(mat: &Array2<f64>) -> Vec<f64> {
    mat.eigvalsh(UPLO::Lower)
        .expect("symmetric eigenvalue solver")
        .to_vec()
}

/// Diagonalises the principal submatrix of `op` on `indices`. Uses the real
/// symmetric solver when every entry in the block is real.
pub fn block_eigh(
    op: &OperatorMatrix,
    indices: &[usize],
    with_vectors: bool,
) -> Result<(Vec<f64>, Option<BlockVectors>)> {
    let b = indices.len();
    let local: BTreeMap<usize, usize> = indices.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let real = indices
        .iter()
        .all(|&i| op.rows()[i].iter().all(|(_, v)| v.im == 0.0));
    let fail = |e: ndarray_linalg::error::LinalgError| Error::Linalg(e.to_string());
    if real {
        let mut m = Array2::<f64>::zeros((b, b));
        for (k, &i) in indices.iter().enumerate() {
            for &(j, v) in &op.rows()[i] {
                m[[k, local[&j]]] = v.re;
            }
        }
        if with_vectors {
            let (vals, vecs) = m.eigh(UPLO::Lower).map_err(fail)?;
            Ok((vals.to_vec(), Some(BlockVectors::Real(vecs))))
        } else {
            Ok((m.eigvalsh(UPLO::Lower).map_err(fail)?.to_vec(), None))
        }
    } else {
        let mut m = Array2::<C64>::zeros((b, b));
        for (k, &i) in indices.iter().enumerate() {
            for &(j, v) in &op.rows()[i] {
                m[[k, local[&j]]] = v;
            }
        }
        if with_vectors {
            let (vals, vecs) = m.eigh(UPLO::Lower).map_err(fail)?;
            Ok((vals.to_vec(), Some(BlockVectors::Complex(vecs))))
        } else {
            Ok((m.eigvalsh(UPLO::Lower).map_err(fail)?.to_vec(), None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_is_stable() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((logsumexp(&[0.0, f64::NEG_INFINITY]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn components_of_block_matrix() {
        let c = |x: f64| C64::new(x, 0.0);
        let op = OperatorMatrix::from_triplets(
            5,
            vec![(0, 3, c(1.0)), (3, 0, c(1.0)), (1, 1, c(2.0)), (2, 4, c(0.5)), (4, 2, c(0.5))],
        );
        assert_eq!(connected_components(&op), vec![vec![0, 3], vec![1], vec![2, 4]]);
    }

    #[test]
    fn complex_block_spectrum() {
        // [[1, i], [−i, 1]] has eigenvalues 0 and 2
        let op = OperatorMatrix::from_triplets(
            2,
            vec![
                (0, 0, C64::new(1.0, 0.0)),
                (0, 1, C64::new(0.0, 1.0)),
                (1, 0, C64::new(0.0, -1.0)),
                (1, 1, C64::new(1.0, 0.0)),
            ],
        );
        let (vals, vecs) = block_eigh(&op, &[0, 1], true).unwrap();
        assert!((vals[0]).abs() < 1e-14 && (vals[1] - 2.0).abs() < 1e-14);
        assert!(matches!(vecs, Some(BlockVectors::Complex(_))));
    }
}
