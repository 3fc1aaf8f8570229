//! Sparse symmetric positive definite factorization.
//!
//! A fill-reducing minimum degree ordering and the elimination tree are
//! computed once per sparsity pattern ([`SymbolicCholesky`]); numeric
//! factorizations ([`CholeskyFactor`]) are then cheap to repeat for new
//! values on the same pattern. The numeric phase is the classic up-looking
//! row-by-row algorithm driven by the elimination tree.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};

/// Symmetric matrix stored as full compressed rows (both triangles).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymmetricCsr {
    /// Zero-valued matrix with the given (symmetrised) pattern.
    pub fn from_pattern(n: usize, rows: &[BTreeSet<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows {
            col_idx.extend(row.iter().copied());
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Position of entry `(i, j)` in `values`.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| {
                self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
                    .iter()
                    .copied()
                    .filter(|&j| j != i)
                    .collect()
            })
            .collect()
    }
}

/// Minimum degree ordering on an explicit elimination graph. Returns
/// `perm` with `perm[new] = old`. Ties go to the smallest index, so the
/// result is deterministic.
pub fn minimum_degree(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    // Neighbour lists kept sorted so clique updates are linear merges.
    let mut graph: Vec<Vec<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let mut v: Vec<usize> = nbrs.iter().copied().filter(|&j| j != i).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let mut eliminated = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|i| Reverse((graph[i].len(), i))).collect();
    let mut perm = Vec::with_capacity(n);
    let mut merged = Vec::new();

    while let Some(Reverse((degree, v))) = heap.pop() {
        if eliminated[v] || degree != graph[v].len() {
            continue;
        }
        eliminated[v] = true;
        perm.push(v);
        let clique = std::mem::take(&mut graph[v]);
        for &u in &clique {
            let own = &graph[u];
            merged.clear();
            let (mut a, mut b) = (0, 0);
            while a < own.len() || b < clique.len() {
                let x = own.get(a).copied().unwrap_or(usize::MAX);
                let y = clique.get(b).copied().unwrap_or(usize::MAX);
                let next = x.min(y);
                if x == next {
                    a += 1;
                }
                if y == next {
                    b += 1;
                }
                if next != v && next != u {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut graph[u], &mut merged);
            heap.push(Reverse((graph[u].len(), u)));
        }
    }
    perm
}

/// Ordering, elimination tree and column structure of `L` for one pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// Upper triangle of the permuted matrix, column-compressed, rows sorted.
    upper_ptr: Vec<usize>,
    upper_idx: Vec<usize>,
    /// Slot in the permuted upper storage for every slot of the source CSR
    /// matrix, or `None` for strictly-lower entries.
    source_to_upper: Vec<Option<usize>>,
    l_ptr: Vec<usize>,
    /// Off-diagonal pattern of each row of `L`, topologically ordered.
    row_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyze(matrix: &SymmetricCsr) -> Self {
        let perm = minimum_degree(&matrix.adjacency());
        Self::with_ordering(matrix, perm)
    }

    pub fn with_ordering(matrix: &SymmetricCsr, perm: Vec<usize>) -> Self {
        let n = matrix.n;
        assert_eq!(perm.len(), n, "ordering length mismatch");
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }

        // Upper triangle of P A Pᵀ by columns.
        let mut columns: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for i in 0..n {
            for k in matrix.row_ptr[i]..matrix.row_ptr[i + 1] {
                let (pi, pj) = (inv_perm[i], inv_perm[matrix.col_idx[k]]);
                if pi <= pj {
                    columns[pj].push((pi, k));
                }
            }
        }
        let mut upper_ptr = Vec::with_capacity(n + 1);
        let mut upper_idx = Vec::new();
        let mut source_to_upper = vec![None; matrix.values.len()];
        upper_ptr.push(0);
        for col in &mut columns {
            col.sort_unstable();
            for &(row, src) in col.iter() {
                source_to_upper[src] = Some(upper_idx.len());
                upper_idx.push(row);
            }
            upper_ptr.push(upper_idx.len());
        }

        let parent = elimination_tree(n, &upper_ptr, &upper_idx);

        // Row patterns of L, and from them the column counts.
        let mut counts = vec![1usize; n];
        let mut marks = vec![usize::MAX; n];
        let mut stack = Vec::new();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        row_ptr.push(0);
        for k in 0..n {
            for row in row_pattern(k, &upper_ptr, &upper_idx, &parent, &mut marks, &mut stack) {
                counts[row] += 1;
                row_idx.push(row);
            }
            row_ptr.push(row_idx.len());
        }
        let mut l_ptr = Vec::with_capacity(n + 1);
        l_ptr.push(0);
        for c in counts {
            l_ptr.push(l_ptr.last().unwrap() + c);
        }

        Self {
            n,
            perm,
            inv_perm,
            upper_ptr,
            upper_idx,
            source_to_upper,
            l_ptr,
            row_ptr,
            row_idx,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }

    /// Numeric factorization of a matrix sharing the analysed pattern.
    pub fn factor(&self, matrix: &SymmetricCsr) -> Result<CholeskyFactor> {
        assert_eq!(matrix.values.len(), self.source_to_upper.len(), "pattern mismatch");
        let n = self.n;
        let mut upper_val = vec![0.0; self.upper_idx.len()];
        for (src, slot) in self.source_to_upper.iter().enumerate() {
            if let Some(s) = slot {
                upper_val[*s] += matrix.values[src];
            }
        }

        let nnz = self.factor_nnz();
        let mut l_idx = vec![0usize; nnz];
        let mut l_val = vec![0.0; nnz];
        let mut next: Vec<usize> = self.l_ptr[..n].to_vec();
        let mut x = vec![0.0; n];

        for k in 0..n {
            let pattern = &self.row_idx[self.row_ptr[k]..self.row_ptr[k + 1]];
            for p in self.upper_ptr[k]..self.upper_ptr[k + 1] {
                x[self.upper_idx[p]] = upper_val[p];
            }
            let mut diag = x[k];
            x[k] = 0.0;
            for &i in pattern {
                let lki = x[i] / l_val[self.l_ptr[i]];
                x[i] = 0.0;
                for p in self.l_ptr[i] + 1..next[i] {
                    x[l_idx[p]] -= l_val[p] * lki;
                }
                diag -= lki * lki;
                let p = next[i];
                next[i] += 1;
                l_idx[p] = k;
                l_val[p] = lki;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: k });
            }
            let p = next[k];
            next[k] += 1;
            l_idx[p] = k;
            l_val[p] = diag.sqrt();
        }

        Ok(CholeskyFactor {
            n,
            perm: self.perm.clone(),
            inv_perm: self.inv_perm.clone(),
            l_ptr: self.l_ptr.clone(),
            l_idx,
            l_val,
        })
    }
}

fn elimination_tree(n: usize, upper_ptr: &[usize], upper_idx: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &row in &upper_idx[upper_ptr[k]..upper_ptr[k + 1]] {
            let mut i = Some(row);
            while let Some(cur) = i.filter(|&c| c < k) {
                let next = ancestor[cur];
                ancestor[cur] = Some(k);
                if next.is_none() {
                    parent[cur] = Some(k);
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), in
/// topological order. `marks` entries equal to `k` flag visited nodes.
fn row_pattern(
    k: usize,
    upper_ptr: &[usize],
    upper_idx: &[usize],
    parent: &[Option<usize>],
    marks: &mut [usize],
    stack: &mut Vec<usize>,
) -> Vec<usize> {
    let mut pattern = Vec::new();
    marks[k] = k;
    for &row in &upper_idx[upper_ptr[k]..upper_ptr[k + 1]] {
        let mut i = row;
        stack.clear();
        while marks[i] != k {
            stack.push(i);
            marks[i] = k;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while let Some(s) = stack.pop() {
            pattern.push(s);
        }
    }
    // The path segments were appended leaf-to-root per entry; reversing the
    // whole list gives an order where every node precedes its ancestors.
    pattern.reverse();
    pattern
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
}

impl CholeskyFactor {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        for j in 0..self.n {
            let start = self.l_ptr[j];
            y[j] /= self.l_val[start];
            let yj = y[j];
            for p in start + 1..self.l_ptr[j + 1] {
                y[self.l_idx[p]] -= self.l_val[p] * yj;
            }
        }
        for j in (0..self.n).rev() {
            let start = self.l_ptr[j];
            let mut acc = y[j];
            for p in start + 1..self.l_ptr[j + 1] {
                acc -= self.l_val[p] * y[self.l_idx[p]];
            }
            y[j] = acc / self.l_val[start];
        }
        (0..self.n).map(|old| y[self.inv_perm[old]]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> SymmetricCsr {
        let rows: Vec<BTreeSet<usize>> = (0..n)
            .map(|i| {
                let mut s = BTreeSet::from([i]);
                if i > 0 {
                    s.insert(i - 1);
                }
                if i + 1 < n {
                    s.insert(i + 1);
                }
                s
            })
            .collect();
        let mut m = SymmetricCsr::from_pattern(n, &rows);
        for i in 0..n {
            let d = m.slot(i, i).unwrap();
            m.values[d] = 2.0 + shift;
            for j in [i.wrapping_sub(1), i + 1] {
                if let Some(s) = (j < n).then(|| m.slot(i, j)).flatten() {
                    m.values[s] = -1.0;
                }
            }
        }
        m
    }

    #[test]
    fn solves_tridiagonal_system() {
        let m = laplacian_1d(50, 0.1);
        let sym = SymbolicCholesky::analyze(&m);
        let factor = sym.factor(&m).unwrap();
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let x = factor.solve(&b);
        let r = m.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn detects_indefinite_matrix() {
        let m = laplacian_1d(10, -3.0);
        let sym = SymbolicCholesky::analyze(&m);
        assert!(matches!(sym.factor(&m), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn minimum_degree_is_a_permutation() {
        let m = laplacian_1d(30, 0.0);
        let mut perm = minimum_degree(&m.adjacency());
        perm.sort_unstable();
        assert_eq!(perm, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn arrow_matrix_has_no_fill_under_minimum_degree() {
        // Hub node 0 connected to everything: eliminating it first would fill
        // the whole matrix.
        let n = 20;
        let rows: Vec<BTreeSet<usize>> = (0..n)
            .map(|i| if i == 0 { (0..n).collect() } else { BTreeSet::from([0, i]) })
            .collect();
        let mut m = SymmetricCsr::from_pattern(n, &rows);
        for i in 0..n {
            for j in 0..n {
                if let Some(s) = m.slot(i, j) {
                    m.values[s] = if i == j { n as f64 } else { 1.0 };
                }
            }
        }
        let sym = SymbolicCholesky::analyze(&m);
        assert_eq!(sym.factor_nnz(), 2 * n - 1);
        let f = sym.factor(&m).unwrap();
        let b = vec![1.0; n];
        let r = m.matvec(&f.solve(&b));
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
