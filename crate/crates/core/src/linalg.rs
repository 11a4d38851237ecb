//! Sparse symmetric linear algebra used by the finite element solver.
//!
//! Matrices are stored in CSR form with a symmetric sparsity pattern. Direct
//! solves use a banded `L D Lᵀ` factorization after reverse Cuthill–McKee
//! reordering; for large bandwidths a Jacobi-preconditioned conjugate
//! gradient iteration is available instead.

use std::collections::VecDeque;

use crate::error::{Result, SacError};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a zero matrix from per-row column sets (duplicates allowed).
    pub fn from_pattern(n: usize, rows: &[Vec<usize>]) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut cols = row.clone();
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend_from_slice(&cols);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Diagonal matrix.
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Position of entry `(i, j)` in the value array, if it is in the pattern.
    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi].binary_search(&j).ok().map(|p| lo + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.index_of(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates `(col, value)` over row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *yi = acc;
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let mut row = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.values[p] * y[self.col_idx[p]];
            }
            acc += xi * row;
        }
        acc
    }

    /// `self + alpha * other`; both must share the same pattern.
    pub fn add_scaled(&self, alpha: f64, other: &CsrMatrix) -> CsrMatrix {
        debug_assert_eq!(self.col_idx, other.col_idx);
        let mut out = self.clone();
        for (v, w) in out.values.iter_mut().zip(&other.values) {
            *v += alpha * w;
        }
        out
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }
}

/// Reverse Cuthill–McKee ordering of a symmetric pattern. Returns `perm` with
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.neighbours(i).len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node exists");
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = a
                .neighbours(v)
                .iter()
                .copied()
                .filter(|&w| !visited[w])
                .collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Half-bandwidth of `a` under permutation `perm` (`perm[new] = old`).
pub fn bandwidth(a: &CsrMatrix, perm: &[usize]) -> usize {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut bw = 0;
    for i in 0..a.dim() {
        for &j in a.neighbours(i) {
            bw = bw.max(inv[i].abs_diff(inv[j]));
        }
    }
    bw
}

/// Reordering and bandwidth for a fixed sparsity pattern, reusable across
/// factorizations of matrices sharing that pattern.
#[derive(Debug, Clone)]
pub struct BandOrdering {
    perm: Vec<usize>,
    inv: Vec<usize>,
    bandwidth: usize,
}

impl BandOrdering {
    pub fn new(a: &CsrMatrix) -> Self {
        let perm = reverse_cuthill_mckee(a);
        let bandwidth = bandwidth(a, &perm);
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        Self {
            perm,
            inv,
            bandwidth,
        }
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }
}

/// Banded `L D Lᵀ` factorization without pivoting. Valid for symmetric
/// positive definite and, in practice, for the mildly indefinite Newton
/// Jacobians arising at small time steps; a vanishing pivot is reported.
#[derive(Debug, Clone)]
pub struct BandedLdlt {
    ordering: BandOrdering,
    /// Row `i` stores `L[i][i-bw..i]` at `i*bw ..`.
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl BandedLdlt {
    pub fn factor(a: &CsrMatrix, ordering: &BandOrdering) -> Result<Self> {
        let n = a.dim();
        let bw = ordering.bandwidth;
        let mut lower = vec![0.0; n * bw.max(1)];
        let mut diag = vec![0.0; n];
        // Scatter the permuted lower triangle into band storage.
        for old_i in 0..n {
            let i = ordering.inv[old_i];
            for (old_j, v) in a.row(old_i) {
                let j = ordering.inv[old_j];
                if j == i {
                    diag[i] = v;
                } else if j < i {
                    lower[i * bw + (j + bw - i)] = v;
                }
            }
        }
        let scale = diag.iter().fold(0.0_f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
        // Columnwise LDLᵀ on the band.
        for j in 0..n {
            let jlo = j.saturating_sub(bw);
            let mut dj = diag[j];
            for k in jlo..j {
                let ljk = lower[j * bw + (k + bw - j)];
                dj -= ljk * ljk * diag[k];
            }
            if !(dj.abs() > 1e-14 * scale) {
                return Err(SacError::Solver(format!(
                    "vanishing pivot {dj:.3e} at row {j} of banded factorization"
                )));
            }
            diag[j] = dj;
            let iend = (j + bw + 1).min(n);
            for i in (j + 1)..iend {
                let ilo = i.saturating_sub(bw);
                let mut lij = lower[i * bw + (j + bw - i)];
                for k in ilo.max(jlo)..j {
                    lij -= lower[i * bw + (k + bw - i)] * lower[j * bw + (k + bw - j)] * diag[k];
                }
                lower[i * bw + (j + bw - i)] = lij / dj;
            }
        }
        Ok(Self {
            ordering: ordering.clone(),
            lower,
            diag,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let bw = self.ordering.bandwidth;
        let mut y: Vec<f64> = self.ordering.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let mut acc = y[i];
            for k in i.saturating_sub(bw)..i {
                acc -= self.lower[i * bw + (k + bw - i)] * y[k];
            }
            y[i] = acc;
        }
        for (yi, d) in y.iter_mut().zip(&self.diag) {
            *yi /= d;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            let iend = (i + bw + 1).min(n);
            for k in (i + 1)..iend {
                acc -= self.lower[k * bw + (i + bw - k)] * y[k];
            }
            y[i] = acc;
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.ordering.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Number of negative pivots (the inertia's negative count).
    pub fn negative_pivots(&self) -> usize {
        self.diag.iter().filter(|d| **d < 0.0).count()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients. Returns the solution once
/// `‖b - A x‖ ≤ rel_tol ‖b‖`.
pub fn pcg(a: &CsrMatrix, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let inv_diag: Vec<f64> = a.diag().iter().map(|d| 1.0 / d).collect();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SacError::Solver(
                "conjugate gradient met non-positive curvature".into(),
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= rel_tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SacError::Solver(format!(
        "conjugate gradient did not converge in {max_iter} iterations"
    )))
}

/// How symmetric systems are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Direct,
    Cg,
}

/// A ready-to-use solver for one symmetric matrix.
#[derive(Debug, Clone)]
pub enum SymmetricSolver {
    Direct { matrix: CsrMatrix, factor: BandedLdlt },
    Cg { matrix: CsrMatrix },
}

/// Relative residual target for every linear solve.
pub const LINEAR_REL_TOL: f64 = 1e-13;

impl SymmetricSolver {
    pub fn new(matrix: CsrMatrix, kind: SolverKind, ordering: &BandOrdering) -> Result<Self> {
        Ok(match kind {
            SolverKind::Direct => {
                let factor = BandedLdlt::factor(&matrix, ordering)?;
                SymmetricSolver::Direct { matrix, factor }
            }
            SolverKind::Cg => SymmetricSolver::Cg { matrix },
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        match self {
            SymmetricSolver::Direct { matrix, .. } | SymmetricSolver::Cg { matrix } => matrix,
        }
    }

    /// Solves `A x = b`; direct solves get one step of iterative refinement.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            SymmetricSolver::Direct { matrix, factor } => {
                let mut x = factor.solve(b);
                let ax = matrix.matvec(&x);
                let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
                let dx = factor.solve(&r);
                for (xi, d) in x.iter_mut().zip(dx) {
                    *xi += d;
                }
                Ok(x)
            }
            SymmetricSolver::Cg { matrix } => pcg(matrix, b, LINEAR_REL_TOL, 20 * b.len() + 100),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic_laplacian(n: usize, shift: f64) -> CsrMatrix {
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| vec![(i + n - 1) % n, i, (i + 1) % n])
            .collect();
        let mut a = CsrMatrix::from_pattern(n, &rows);
        for i in 0..n {
            let p = a.index_of(i, i).unwrap();
            a.values_mut()[p] += 2.0 + shift;
            for j in [(i + n - 1) % n, (i + 1) % n] {
                let p = a.index_of(i, j).unwrap();
                a.values_mut()[p] -= 1.0;
            }
        }
        a
    }

    #[test]
    fn rcm_turns_a_ring_into_a_narrow_band() {
        let a = periodic_laplacian(50, 0.1);
        let ord = BandOrdering::new(&a);
        assert!(ord.bandwidth() <= 2, "bandwidth {}", ord.bandwidth());
        let mut seen = ord.perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn banded_and_cg_agree() {
        let a = periodic_laplacian(37, 0.05);
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).sin()).collect();
        let ord = BandOrdering::new(&a);
        let direct = SymmetricSolver::new(a.clone(), SolverKind::Direct, &ord)
            .unwrap()
            .solve(&b)
            .unwrap();
        let cg = SymmetricSolver::new(a.clone(), SolverKind::Cg, &ord)
            .unwrap()
            .solve(&b)
            .unwrap();
        let res: Vec<f64> = a.matvec(&direct).iter().zip(&b).map(|(x, y)| x - y).collect();
        assert!(norm2(&res) <= 1e-13 * norm2(&b));
        for (x, y) in direct.iter().zip(&cg) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrix_reports_vanishing_pivot() {
        let a = periodic_laplacian(8, 0.0);
        let ord = BandOrdering::new(&a);
        assert!(matches!(
            BandedLdlt::factor(&a, &ord),
            Err(SacError::Solver(_))
        ));
    }
}
