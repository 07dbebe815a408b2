//! Symmetric sparse matrices and sparse Cholesky factorization.
//!
//! Storage is compressed-sparse-column of the lower triangle (diagonal
//! included, row indices sorted within each column). The factorization is an
//! up-looking simplicial Cholesky over a reverse Cuthill-McKee ordering, with
//! the symbolic step (elimination tree, row patterns, factor pattern) split
//! out so that repeated numeric factorizations on a fixed pattern — the inner
//! loop of the Laplace approximation — only touch float work.
//!
//! [`CholeskyFactor::partial_inverse`] computes the Takahashi equations: the
//! entries of the inverse restricted to the factor pattern, which is exactly
//! what marginal variances and prediction quadratic forms need.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

const NONE: usize = usize::MAX;

/// Symmetric sparse matrix, lower triangle in CSC form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Build from (i, j, value) triplets; duplicates are summed, upper-triangle
    /// entries are mirrored into the lower triangle.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .into_iter()
            .map(|(i, j, v)| {
                assert!(i < n && j < n, "triplet index out of bounds");
                if i >= j {
                    (j, i, v)
                } else {
                    (i, j, v)
                }
            })
            .collect();
        // key: (col, row) with col = min index
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = (usize::MAX, usize::MAX);
        for (c, r, v) in entries {
            if (c, r) == last {
                *values.last_mut().unwrap() += v;
            } else {
                col_ptr[c + 1] += 1;
                row_idx.push(r);
                values.push(v);
                last = (c, r);
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseSym {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        SparseSym {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Position of entry (i, j) in the value array, if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (c, r) = if i >= j { (j, i) } else { (i, j) };
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        self.row_idx[lo..hi].binary_search(&r).ok().map(|k| lo + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Symmetric matrix-vector product.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// Quadratic form x' A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                s += if r == c {
                    v * x[c] * x[c]
                } else {
                    2.0 * v * x[r] * x[c]
                };
            }
        }
        s
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= c;
        }
        out
    }

    /// Dense copy; intended for small matrices and test oracles.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                m[(r, c)] = self.values[p];
                m[(c, r)] = self.values[p];
            }
        }
        m
    }

    /// Full (both-triangles) CSR expansion: (row_ptr, col_idx, values).
    pub fn to_full_csr(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut counts = vec![0usize; self.n + 1];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                counts[r + 1] += 1;
                if r != c {
                    counts[c + 1] += 1;
                }
            }
        }
        for i in 0..self.n {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let nnz_full = row_ptr[self.n];
        let mut col_idx = vec![0usize; nnz_full];
        let mut vals = vec![0.0; nnz_full];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                col_idx[next[r]] = c;
                vals[next[r]] = self.values[p];
                next[r] += 1;
                if r != c {
                    col_idx[next[c]] = r;
                    vals[next[c]] = self.values[p];
                    next[c] += 1;
                }
            }
        }
        // columns within a row come out sorted because we sweep c ascending
        (row_ptr, col_idx, vals)
    }

    /// Adjacency lists of the sparsity graph (no self loops).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                if r != c {
                    adj[r].push(c);
                    adj[c].push(r);
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// Coordinate-format dump `i j value` (lower triangle), one entry per line.
    pub fn write_coo(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                writeln!(w, "{} {} {}", self.row_idx[p], c, self.values[p])?;
            }
        }
        Ok(())
    }
}

/// Reverse Cuthill-McKee ordering; `pinned_tail` vertices are excluded from
/// the traversal and appended last (useful for dense fixed-effect columns).
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_order(adj: &[Vec<usize>], pinned_tail: &[usize]) -> Vec<usize> {
    let n = adj.len();
    let mut pinned = vec![false; n];
    for &p in pinned_tail {
        pinned[p] = true;
    }
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut visited = pinned.clone();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    loop {
        // lowest-degree unvisited seed, ties by index: deterministic
        let seed = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v));
        let Some(seed) = seed else { break };
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (degree[u], u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order.extend(pinned_tail.iter().copied());
    debug_assert_eq!(order.len(), n);
    order
}

/// Symbolic Cholesky analysis of a fixed sparsity pattern: permutation,
/// elimination tree, cached row patterns and the factor pattern. Reused
/// across numeric factorizations.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// iperm[old] = new
    iperm: Vec<usize>,
    /// permuted A by rows: for row k, (column, position in original values)
    arow_ptr: Vec<usize>,
    arow_col: Vec<usize>,
    arow_vpos: Vec<usize>,
    /// row patterns of L (columns j < k, topological order), concatenated
    rpat_ptr: Vec<usize>,
    rpat: Vec<usize>,
    /// factor pattern (CSC, diagonal first then ascending rows)
    lcol_ptr: Vec<usize>,
    lrow_idx: Vec<usize>,
    a_nnz: usize,
}

impl SymbolicCholesky {
    /// Analyze `a`'s pattern. `pinned_tail` lists indices ordered last.
    pub fn analyze(a: &SparseSym, pinned_tail: &[usize]) -> Arc<Self> {
        let n = a.n();
        let perm = rcm_order(&a.adjacency(), pinned_tail);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // permuted rows of A (lower permuted triangle grouped by row)
        let mut row_entries: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for c in 0..n {
            for p in a.col_ptr[c]..a.col_ptr[c + 1] {
                let r = a.row_idx[p];
                let (pi, pj) = (iperm[r], iperm[c]);
                let (row, col) = if pi >= pj { (pi, pj) } else { (pj, pi) };
                row_entries[row].push((col, p));
            }
        }
        let mut arow_ptr = vec![0usize; n + 1];
        let mut arow_col = Vec::with_capacity(a.nnz());
        let mut arow_vpos = Vec::with_capacity(a.nnz());
        for (k, entries) in row_entries.iter_mut().enumerate() {
            entries.sort_unstable();
            arow_ptr[k + 1] = arow_ptr[k] + entries.len();
            for &(c, p) in entries.iter() {
                arow_col.push(c);
                arow_vpos.push(p);
            }
        }

        // elimination tree (Liu)
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for idx in arow_ptr[k]..arow_ptr[k + 1] {
                let mut j = arow_col[idx];
                while j != NONE && j < k {
                    let jnext = ancestor[j];
                    ancestor[j] = k;
                    if jnext == NONE {
                        parent[j] = k;
                        break;
                    }
                    j = jnext;
                }
            }
        }

        // row patterns via ereach, cached; and factor column counts
        let mut rpat_ptr = vec![0usize; n + 1];
        let mut rpat: Vec<usize> = Vec::new();
        let mut col_count = vec![1usize; n]; // diagonal
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        for k in 0..n {
            mark[k] = k;
            let mut top = n;
            for idx in arow_ptr[k]..arow_ptr[k + 1] {
                let mut j = arow_col[idx];
                if j == k {
                    continue;
                }
                let mut len = 0;
                while mark[j] != k {
                    stack[len] = j;
                    len += 1;
                    mark[j] = k;
                    j = parent[j];
                    debug_assert!(j != NONE, "etree truncated below diagonal entry");
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    stack[top] = stack[len];
                }
            }
            // stack[top..n] holds pattern in topological order
            for &j in &stack[top..n] {
                col_count[j] += 1;
                rpat.push(j);
            }
            rpat_ptr[k + 1] = rpat.len();
        }

        // factor pattern: column j gets diagonal first, then rows k ascending
        let mut lcol_ptr = vec![0usize; n + 1];
        for j in 0..n {
            lcol_ptr[j + 1] = lcol_ptr[j] + col_count[j];
        }
        let lnnz = lcol_ptr[n];
        let mut lrow_idx = vec![0usize; lnnz];
        let mut next = vec![0usize; n];
        for j in 0..n {
            lrow_idx[lcol_ptr[j]] = j;
            next[j] = lcol_ptr[j] + 1;
        }
        for k in 0..n {
            for &j in &rpat[rpat_ptr[k]..rpat_ptr[k + 1]] {
                lrow_idx[next[j]] = k;
                next[j] += 1;
            }
        }

        Arc::new(SymbolicCholesky {
            n,
            perm,
            iperm,
            arow_ptr,
            arow_col,
            arow_vpos,
            rpat_ptr,
            rpat,
            lcol_ptr,
            lrow_idx,
            a_nnz: a.nnz(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lrow_idx.len()
    }

    /// Numeric factorization; `values` must follow the analyzed matrix's
    /// value layout. Fails with the original index of the offending pivot.
    pub fn factorize(self: &Arc<Self>, values: &[f64]) -> Result<CholeskyFactor> {
        assert_eq!(values.len(), self.a_nnz, "value layout mismatch");
        let n = self.n;
        let mut lx = vec![0.0f64; self.lrow_idx.len()];
        let mut next = vec![0usize; n];
        let mut x = vec![0.0f64; n];
        for k in 0..n {
            let mut d = 0.0;
            for idx in self.arow_ptr[k]..self.arow_ptr[k + 1] {
                let c = self.arow_col[idx];
                let v = values[self.arow_vpos[idx]];
                if c == k {
                    d = v;
                } else {
                    x[c] = v;
                }
            }
            for &j in &self.rpat[self.rpat_ptr[k]..self.rpat_ptr[k + 1]] {
                let ljj = lx[self.lcol_ptr[j]];
                let lkj = x[j] / ljj;
                x[j] = 0.0;
                for p in self.lcol_ptr[j] + 1..next[j] {
                    x[self.lrow_idx[p]] -= lx[p] * lkj;
                }
                d -= lkj * lkj;
                lx[next[j]] = lkj;
                next[j] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[k],
                });
            }
            lx[self.lcol_ptr[k]] = d.sqrt();
            next[k] = self.lcol_ptr[k] + 1;
        }
        Ok(CholeskyFactor {
            sym: Arc::clone(self),
            lx,
        })
    }
}

/// Numeric Cholesky factor L with P A P' = L L'.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    sym: Arc<SymbolicCholesky>,
    lx: Vec<f64>,
}

/// One-shot convenience: analyze + factorize without a pinned tail.
pub fn cholesky(a: &SparseSym) -> Result<CholeskyFactor> {
    SymbolicCholesky::analyze(a, &[]).factorize(a.values())
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.sym.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.sym
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.sym.n;
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = (0..n).map(|k| b[self.sym.perm[k]]).collect();
        self.solve_permuted_in_place(&mut y);
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.sym.perm[k]] = y[k];
        }
        out
    }

    fn solve_permuted_in_place(&self, y: &mut [f64]) {
        let n = self.sym.n;
        let cp = &self.sym.lcol_ptr;
        let ri = &self.sym.lrow_idx;
        // forward L y = b
        for j in 0..n {
            y[j] /= self.lx[cp[j]];
            let yj = y[j];
            for p in cp[j] + 1..cp[j + 1] {
                y[ri[p]] -= self.lx[p] * yj;
            }
        }
        // backward L' x = y
        for j in (0..n).rev() {
            let mut s = y[j];
            for p in cp[j] + 1..cp[j + 1] {
                s -= self.lx[p] * y[ri[p]];
            }
            y[j] = s / self.lx[cp[j]];
        }
    }

    /// log det A = 2 sum log L_jj.
    pub fn logdet(&self) -> f64 {
        (0..self.sym.n)
            .map(|j| self.lx[self.sym.lcol_ptr[j]].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Draw x with Cov(x) = A^{-1}: backward-solve L' w = z, unpermute.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.sym.n;
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let cp = &self.sym.lcol_ptr;
        let ri = &self.sym.lrow_idx;
        for j in (0..n).rev() {
            let mut s = w[j];
            for p in cp[j] + 1..cp[j + 1] {
                s -= self.lx[p] * w[ri[p]];
            }
            w[j] = s / self.lx[cp[j]];
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.sym.perm[k]] = w[k];
        }
        out
    }

    /// Takahashi equations: entries of A^{-1} on the factor pattern.
    pub fn partial_inverse(&self) -> PartialInverse {
        let n = self.sym.n;
        let cp = &self.sym.lcol_ptr;
        let ri = &self.sym.lrow_idx;
        let mut sx = vec![0.0f64; self.lx.len()];
        let lookup = |sx: &[f64], hi: usize, lo: usize| -> f64 {
            let lo_col = &ri[cp[lo]..cp[lo + 1]];
            match lo_col.binary_search(&hi) {
                Ok(k) => sx[cp[lo] + k],
                Err(_) => unreachable!("Takahashi lookup outside factor pattern"),
            }
        };
        for j in (0..n).rev() {
            let ljj = self.lx[cp[j]];
            for p in (cp[j]..cp[j + 1]).rev() {
                let i = ri[p];
                let mut s = 0.0;
                for q in cp[j] + 1..cp[j + 1] {
                    let m = ri[q];
                    // both indices exceed j, so the entry lives in an
                    // already-finished column (or below-diagonal part of j
                    // when i == j, which this p-loop has already written)
                    let v = if m >= i {
                        lookup(&sx, m, i)
                    } else {
                        lookup(&sx, i, m)
                    };
                    s += self.lx[q] * v;
                }
                sx[p] = if i == j {
                    1.0 / (ljj * ljj) - s / ljj
                } else {
                    -s / ljj
                };
            }
        }
        PartialInverse {
            sym: Arc::clone(&self.sym),
            sx,
        }
    }
}

/// Inverse entries on the Cholesky factor pattern (permuted internally;
/// queried with original indices).
#[derive(Debug)]
pub struct PartialInverse {
    sym: Arc<SymbolicCholesky>,
    sx: Vec<f64>,
}

impl PartialInverse {
    /// Inverse entry (i, j) in original indexing, if covered by the pattern.
    pub fn entry(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (self.sym.iperm[i], self.sym.iperm[j]);
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        let cp = &self.sym.lcol_ptr;
        let slice = &self.sym.lrow_idx[cp[lo]..cp[lo + 1]];
        slice.binary_search(&hi).ok().map(|k| self.sx[cp[lo] + k])
    }

    /// Diagonal of the inverse (marginal variances), original order.
    pub fn diag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.sym.n];
        for j in 0..self.sym.n {
            out[self.sym.perm[j]] = self.sx[self.sym.lcol_ptr[j]];
        }
        out
    }

    /// w' A^{-1} w for a sparse vector given as (indices, weights); every
    /// index pair must lie in the factor pattern.
    pub fn quad_form(&self, idx: &[usize], w: &[f64]) -> f64 {
        debug_assert_eq!(idx.len(), w.len());
        let mut s = 0.0;
        for a in 0..idx.len() {
            for b in 0..idx.len() {
                let e = self
                    .entry(idx[a], idx[b])
                    .expect("quad_form pair outside factor pattern");
                s += w[a] * w[b] * e;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> SparseSym {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b * b.transpose() + nalgebra::DMatrix::identity(n, n) * (n as f64);
        let mut trips = Vec::new();
        for i in 0..n {
            for j in 0..=i {
                trips.push((i, j, a[(i, j)]));
            }
        }
        SparseSym::from_triplets(n, trips)
    }

    #[test]
    fn identity_solve_and_logdet() {
        let q = SparseSym::identity(4);
        let f = cholesky(&q).unwrap();
        let b = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(f.solve(&b), b);
        assert_abs_diff_eq!(f.logdet(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn diag_two_logdet() {
        let q = SparseSym::diag(&[2.0, 2.0]);
        let f = cholesky(&q).unwrap();
        assert_abs_diff_eq!(f.logdet(), 2.0 * 2.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn logdet_matches_dense_eigenvalues() {
        let q = random_spd(10, 7);
        let f = cholesky(&q).unwrap();
        let dense = q.to_dense();
        let eig = dense.symmetric_eigen();
        let expected: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        assert_abs_diff_eq!(f.logdet(), expected, epsilon = 1e-9);
    }

    #[test]
    fn solve_residual_small() {
        let q = random_spd(30, 3);
        let f = cholesky(&q).unwrap();
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = f.solve(&b);
        let r = q.mul_vec(&x);
        let bmax = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..30 {
            assert!((r[i] - b[i]).abs() <= 1e-8 * bmax, "residual too large");
        }
    }

    #[test]
    fn non_pd_reports_pivot() {
        let q = SparseSym::from_triplets(3, vec![(0, 0, 1.0), (1, 1, -1.0), (2, 2, 1.0)]);
        match cholesky(&q) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn partial_inverse_matches_dense_inverse() {
        let q = random_spd(12, 11);
        let f = cholesky(&q).unwrap();
        let pinv = f.partial_inverse();
        let dense_inv = q.to_dense().try_inverse().unwrap();
        // every pattern entry must equal the dense inverse entry
        for i in 0..12 {
            for j in 0..12 {
                if let Some(v) = pinv.entry(i, j) {
                    assert_abs_diff_eq!(v, dense_inv[(i, j)], epsilon = 1e-9);
                }
            }
        }
        // the diagonal is always in the pattern
        let d = pinv.diag();
        for i in 0..12 {
            assert_abs_diff_eq!(d[i], dense_inv[(i, i)], epsilon = 1e-9);
        }
    }

    #[test]
    fn sample_is_deterministic_under_seed() {
        let q = random_spd(8, 5);
        let f = cholesky(&q).unwrap();
        let a = f.sample(&mut ChaCha8Rng::seed_from_u64(42));
        let b = f.sample(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_identity_variance() {
        let q = SparseSym::identity(4);
        let f = cholesky(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut sums = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let x = f.sample(&mut rng);
            for k in 0..4 {
                sums[k] += x[k];
                sq[k] += x[k] * x[k];
            }
        }
        for k in 0..4 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!((0.97..=1.03).contains(&var), "variance {var} out of band");
        }
    }

    #[test]
    fn sample_covariance_matches_inverse() {
        // 2x2 precision; empirical covariance within 3 standard errors
        let q = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (1, 0, 0.6), (1, 1, 1.5)]);
        let f = cholesky(&q).unwrap();
        let cov = q.to_dense().try_inverse().unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = f.sample(&mut rng);
            s00 += x[0] * x[0];
            s01 += x[0] * x[1];
            s11 += x[1] * x[1];
        }
        let nf = n as f64;
        // se of a second moment estimate is roughly sqrt(2/n) * value scale
        let tol = 3.0 * (2.0 / nf).sqrt() * cov[(0, 0)].max(cov[(1, 1)]);
        assert_abs_diff_eq!(s00 / nf, cov[(0, 0)], epsilon = tol);
        assert_abs_diff_eq!(s01 / nf, cov[(0, 1)], epsilon = tol);
        assert_abs_diff_eq!(s11 / nf, cov[(1, 1)], epsilon = tol);
    }

    #[test]
    fn pinned_tail_ordering() {
        let q = random_spd(9, 2);
        let sym = SymbolicCholesky::analyze(&q, &[4, 7]);
        assert_eq!(sym.perm[7], 4);
        assert_eq!(sym.perm[8], 7);
        let f = sym.factorize(q.values()).unwrap();
        let b = vec![1.0; 9];
        let x = f.solve(&b);
        let r = q.mul_vec(&x);
        for i in 0..9 {
            assert_abs_diff_eq!(r[i], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn refactorize_with_new_values() {
        let q = random_spd(15, 8);
        let sym = SymbolicCholesky::analyze(&q, &[]);
        let f1 = sym.factorize(q.values()).unwrap();
        let scaled: Vec<f64> = q.values().iter().map(|v| v * 4.0).collect();
        let f2 = sym.factorize(&scaled).unwrap();
        assert_abs_diff_eq!(
            f2.logdet(),
            f1.logdet() + 15.0 * 4.0f64.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn mul_vec_matches_dense() {
        let q = random_spd(7, 13);
        let x: Vec<f64> = (0..7).map(|i| (i as f64).cos()).collect();
        let y = q.mul_vec(&x);
        let yd = q.to_dense() * nalgebra::DVector::from_vec(x);
        for i in 0..7 {
            assert_abs_diff_eq!(y[i], yd[i], epsilon = 1e-12);
        }
    }
}
