//! Symmetric positive definite sparse systems stored as the lower triangle in
//! compressed columns, factorized by a supernodal Cholesky.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::perm::PermRef;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, LltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Error, Result};

/// Lower-triangular sparsity pattern with sorted row indices per column.
#[derive(Debug, Clone)]
pub struct SymPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SymPattern {
    /// `columns[c]` lists the rows `r >= c` present in column `c`.
    pub fn from_columns(mut columns: Vec<Vec<usize>>) -> Self {
        let n = columns.len();
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for (c, rows) in columns.iter_mut().enumerate() {
            rows.sort_unstable();
            rows.dedup();
            debug_assert!(rows.first().is_none_or(|&r| r >= c));
            row_idx.extend_from_slice(rows);
            col_ptr.push(row_idx.len());
        }
        SymPattern {
            n,
            col_ptr,
            row_idx,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage slot of entry `(r, c)` with `r >= c`.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let (a, b) = (self.col_ptr[c], self.col_ptr[c + 1]);
        self.row_idx[a..b].binary_search(&r).ok().map(|p| a + p)
    }

    /// y = A x for the symmetric matrix whose lower triangle is `values`.
    pub fn sym_mul(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                y[r] += values[p] * x[c];
                if r != c {
                    y[c] += values[p] * x[r];
                }
            }
        }
    }

    fn symbolic(&self) -> SymbolicSparseColMat<usize> {
        SymbolicSparseColMat::new_checked(
            self.n,
            self.n,
            self.col_ptr.clone(),
            None,
            self.row_idx.clone(),
        )
    }
}

/// Symmetric sparse matrix given by its lower triangle.
#[derive(Debug, Clone)]
pub struct SymSparse {
    pub pattern: SymPattern,
    pub values: Vec<f64>,
}

impl SymSparse {
    /// Duplicates are summed; entries above the diagonal are mirrored below.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let lower = |&(r, c, v): &(usize, usize, f64)| if r >= c { (r, c, v) } else { (c, r, v) };
        let mut columns: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in triplets {
            let (r, c, _) = lower(t);
            columns[c].push(r);
        }
        let pattern = SymPattern::from_columns(columns);
        let mut values = vec![0.0; pattern.nnz()];
        for t in triplets {
            let (r, c, v) = lower(t);
            values[pattern.position(r, c).expect("entry in pattern")] += v;
        }
        SymSparse { pattern, values }
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    /// Lower-triangle entries `(row, col, value)` with `row >= col`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.pattern.n).flat_map(move |c| {
            (self.pattern.col_ptr[c]..self.pattern.col_ptr[c + 1])
                .map(move |p| (self.pattern.row_idx[p], c, self.values[p]))
        })
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.pattern.sym_mul(&self.values, x, &mut y);
        y
    }
}

/// Cholesky factor with a fixed symbolic structure, refactorizable for new
/// values on the same pattern.
pub struct SparseCholesky {
    pattern: SymbolicSparseColMat<usize>,
    symbolic: SymbolicCholesky<usize>,
    l_values: Vec<f64>,
    factored: bool,
}

impl SparseCholesky {
    /// Symbolic analysis. `order` lists old indices in elimination order; if
    /// absent, approximate minimum degree is used.
    pub fn analyze(pattern: &SymPattern, order: Option<&[usize]>) -> Result<Self> {
        let n = pattern.n;
        let sym = pattern.symbolic();
        let symbolic = match order {
            Some(fwd) => {
                if fwd.len() != n {
                    return Err(Error::Singular(format!(
                        "ordering has length {} for dimension {n}",
                        fwd.len()
                    )));
                }
                let mut inv = vec![usize::MAX; n];
                for (i, &p) in fwd.iter().enumerate() {
                    inv[p] = i;
                }
                if inv.contains(&usize::MAX) {
                    return Err(Error::Singular("ordering is not a permutation".into()));
                }
                let perm = PermRef::new_checked(fwd, &inv, n);
                factorize_symbolic_cholesky(
                    sym.as_ref(),
                    Side::Lower,
                    SymmetricOrdering::Custom(perm),
                    Default::default(),
                )
            }
            None => factorize_symbolic_cholesky(
                sym.as_ref(),
                Side::Lower,
                SymmetricOrdering::Amd,
                Default::default(),
            ),
        }
        .map_err(|e| Error::Singular(format!("symbolic analysis failed: {e:?}")))?;
        let l_values = vec![0.0; symbolic.len_val()];
        Ok(SparseCholesky {
            pattern: sym,
            symbolic,
            l_values,
            factored: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.pattern.nrows()
    }

    pub fn factorize(&mut self, values: &[f64]) -> Result<()> {
        let par = Par::Seq;
        let a = SparseColMatRef::new(self.pattern.as_ref(), values);
        let mut buf = MemBuffer::new(
            self.symbolic
                .factorize_numeric_llt_scratch::<f64>(par, Default::default()),
        );
        self.factored = false;
        self.symbolic
            .factorize_numeric_llt::<f64>(
                &mut self.l_values,
                a,
                Side::Lower,
                Default::default(),
                par,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::Singular(format!("cholesky failed: {e:?}")))?;
        self.factored = true;
        Ok(())
    }

    /// Solve in place for `ncols` right-hand sides stored column-major.
    pub fn solve_many(&self, rhs: &mut [f64], ncols: usize) {
        assert!(self.factored, "solve before factorization");
        let n = self.dim();
        assert_eq!(rhs.len(), n * ncols);
        let par = Par::Seq;
        let llt = LltRef::new(&self.symbolic, &self.l_values);
        let mut buf = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(ncols, par));
        let m = MatMut::from_column_major_slice_mut(rhs, n, ncols);
        llt.solve_in_place_with_conj(Conj::No, m, par, MemStack::new(&mut buf));
    }

    pub fn solve(&self, rhs: &mut [f64]) {
        self.solve_many(rhs, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| {
            if rng.random::<f64>() < 0.2 {
                rng.random::<f64>() - 0.5
            } else {
                0.0
            }
        });
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn lower_pattern(m: &DMatrix<f64>) -> (SymPattern, Vec<f64>) {
        let n = m.nrows();
        let cols: Vec<Vec<usize>> = (0..n)
            .map(|c| (c..n).filter(|&r| m[(r, c)] != 0.0).collect())
            .collect();
        let p = SymPattern::from_columns(cols);
        let mut v = vec![0.0; p.nnz()];
        for c in 0..n {
            for r in c..n {
                if let Some(k) = p.position(r, c) {
                    v[k] = m[(r, c)];
                }
            }
        }
        (p, v)
    }

    #[test]
    fn solves_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_spd(60, &mut rng);
        let (p, v) = lower_pattern(&m);
        let b: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let dense = m.clone().cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b.clone()));
        let order: Vec<usize> = (0..60).rev().collect();
        for ord in [None, Some(order.as_slice())] {
            let mut chol = SparseCholesky::analyze(&p, ord).unwrap();
            chol.factorize(&v).unwrap();
            let mut x = b.clone();
            chol.solve(&mut x);
            for i in 0..60 {
                assert!((x[i] - dense[i]).abs() < 1e-10 * dense.amax());
            }
            let mut y = vec![0.0; 60];
            p.sym_mul(&v, &x, &mut y);
            assert!(y.iter().zip(&b).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (p, v) = lower_pattern(&m);
        let mut chol = SparseCholesky::analyze(&p, None).unwrap();
        assert!(matches!(chol.factorize(&v), Err(Error::Singular(_))));
    }
}
