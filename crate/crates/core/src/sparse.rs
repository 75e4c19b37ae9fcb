//! Sparse matrices, a symmetric LDLᵀ factorization and a pivoting LU.
//!
//! The factorization is an up-looking, non-pivoting LDLᵀ on a fill-reducing
//! (AMD) ordering. It is meant for quasi-definite systems, i.e. KKT matrices
//! `[[H + δw·I, Jᵀ], [J, -δc·I]]` with `δc > 0`, and reports the inertia of
//! the factored matrix. Symbolic analysis is done once per sparsity pattern;
//! numeric refactorization reuses it.

use std::fmt::Write as _;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            row.clear();
            row.extend((counts[i]..counts[i + 1]).map(|p| (cols[p], vals[p])));
            row.sort_by_key(|e| e.0);
            for &(c, v) in row.iter() {
                if indices.len() > indptr[i] && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.indptr[row]..self.indptr[row + 1];
        match self.indices[range.clone()].binary_search(&col) {
            Ok(p) => self.values[range.start + p],
            Err(_) => 0.0,
        }
    }

    /// Iterates the stored entries of one row.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[row]..self.indptr[row + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `selfᵀ · x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn abs(&self) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = v.abs());
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let t: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &t)
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> CsrMatrix {
        let t: Vec<_> = (start..end)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i - start, j, v)))
            .collect();
        CsrMatrix::from_triplets(end - start, self.ncols, &t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.triplets() {
            d[i][j] = v;
        }
        d
    }

    /// One `row col value` line per stored entry (0-based).
    pub fn to_coordinate_text(&self) -> String {
        let mut s = format!("% {} {} {}\n", self.nrows, self.ncols, self.nnz());
        for (i, j, v) in self.triplets() {
            let _ = writeln!(s, "{i} {j} {v}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroPivot(pub usize);

const NONE: usize = usize::MAX;

/// Symbolic LDLᵀ analysis of a symmetric pattern given by its lower triangle.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// Upper-triangular CSC of the permuted matrix.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// Destination slot in `ax` for each input entry.
    slot: Vec<usize>,
    etree: Vec<usize>,
    lnz: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlSymbolic {
    /// `entries` are `(row, col)` positions with `row >= col`. Duplicates are
    /// allowed and are summed at factorization time. Missing diagonal
    /// entries are treated as structural zeros.
    pub fn new(n: usize, entries: &[(usize, usize)]) -> Self {
        // Pattern of the upper triangle (col-major) including the diagonal.
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, col) in cols.iter_mut().enumerate() {
            col.push(i);
        }
        for &(r, c) in entries {
            assert!(
                r < n && c < n && r >= c,
                "entry ({r}, {c}) is not in the lower triangle"
            );
            if r != c {
                cols[r].push(c);
            }
        }
        for col in cols.iter_mut() {
            col.sort_unstable();
            col.dedup();
        }
        let mut p = vec![0usize];
        let mut idx = Vec::new();
        for col in &cols {
            idx.extend_from_slice(col);
            p.push(idx.len());
        }
        let perm = if n == 0 {
            Vec::new()
        } else {
            match amd::order::<usize>(n, &p, &idx, &amd::Control::default()) {
                Ok((perm, _, _)) => perm,
                Err(_) => (0..n).collect(),
            }
        };
        let mut pinv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Permuted upper CSC: the diagonal first, then all input entries.
        let mut positions: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for &(r, c) in entries {
            let (a, b) = (pinv[r], pinv[c]);
            positions.push((a.min(b), a.max(b)));
        }
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by_key(|&k| (positions[k].1, positions[k].0));
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::new();
        let mut slot_of = vec![0usize; positions.len()];
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let pos = positions[k];
            if last != Some(pos) {
                ai.push(pos.0);
                ap[pos.1 + 1] += 1;
                last = Some(pos);
            }
            slot_of[k] = ai.len() - 1;
        }
        for j in 0..n {
            ap[j + 1] += ap[j];
        }
        let slot = slot_of[n..].to_vec();

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &ai[ap[j]..ap[j + 1]] {
                let mut i = row;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        LdlSymbolic {
            n,
            perm,
            ap,
            ai,
            slot,
            etree,
            lnz,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lnz.iter().sum()
    }

    /// Numeric factorization. `values[k]` belongs to `entries[k]` of [`LdlSymbolic::new`].
    pub fn factor(&self, values: &[f64]) -> Result<LdlFactor, ZeroPivot> {
        assert_eq!(values.len(), self.slot.len());
        let n = self.n;
        let mut ax = vec![0.0; self.ai.len()];
        for (&s, &v) in self.slot.iter().zip(values) {
            ax[s] += v;
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + self.lnz[i];
        }
        let mut li = vec![0usize; lp[n]];
        let mut lx = vec![0.0; lp[n]];
        let mut d = vec![0.0; n];
        let mut dinv = vec![0.0; n];
        let mut y_vals = vec![0.0; n];
        let mut y_marked = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space = lp[..n].to_vec();

        for k in 0..n {
            let mut nnz_y = 0;
            for p in self.ap[k]..self.ap[k + 1] {
                let b = self.ai[p];
                if b == k {
                    d[k] = ax[p];
                    continue;
                }
                y_vals[b] = ax[p];
                if !y_marked[b] {
                    y_marked[b] = true;
                    elim[0] = b;
                    let mut n_elim = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_marked[next] {
                            break;
                        }
                        y_marked[next] = true;
                        elim[n_elim] = next;
                        n_elim += 1;
                        next = self.etree[next];
                    }
                    while n_elim > 0 {
                        n_elim -= 1;
                        y_idx[nnz_y] = elim[n_elim];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let end = next_space[c];
                let yc = y_vals[c];
                for j in lp[c]..end {
                    y_vals[li[j]] -= lx[j] * yc;
                }
                li[end] = k;
                lx[end] = yc * dinv[c];
                d[k] -= yc * lx[end];
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_marked[c] = false;
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return Err(ZeroPivot(self.perm[k]));
            }
            dinv[k] = 1.0 / d[k];
        }
        Ok(LdlFactor {
            perm: self.perm.clone(),
            lp,
            li,
            lx,
            d,
        })
    }
}

impl LdlFactor {
    pub fn inertia(&self) -> Inertia {
        let mut inertia = Inertia {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        for &d in &self.d {
            if d > 0.0 {
                inertia.positive += 1;
            } else if d < 0.0 {
                inertia.negative += 1;
            } else {
                inertia.zero += 1;
            }
        }
        inertia
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let xi = x[i];
            for p in self.lp[i]..self.lp[i + 1] {
                x[self.li[p]] -= self.lx[p] * xi;
            }
        }
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi /= di;
        }
        for i in (0..n).rev() {
            let mut xi = x[i];
            for p in self.lp[i]..self.lp[i + 1] {
                xi -= self.lx[p] * x[self.li[p]];
            }
            x[i] = xi;
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }
}

/// Symmetric matrix held as lower-triangle entries, for products with the
/// matrix that was handed to [`LdlSymbolic`].
pub fn sym_matvec(n: usize, entries: &[(usize, usize)], values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (&(r, c), &v) in entries.iter().zip(values) {
        y[r] += v * x[c];
        if r != c {
            y[c] += v * x[r];
        }
    }
    y
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Fill-reducing column order for a square pattern: AMD on `A + Aᵀ`.
pub fn amd_order(n: usize, pattern: &[(usize, usize)]) -> Vec<usize> {
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(r, c) in pattern {
        cols[c].push(r);
    }
    let mut p = vec![0usize];
    let mut idx = Vec::new();
    for col in cols.iter_mut() {
        col.sort_unstable();
        col.dedup();
        idx.extend_from_slice(col);
        p.push(idx.len());
    }
    if n == 0 {
        return Vec::new();
    }
    match amd::order::<usize>(n, &p, &idx, &amd::Control::default()) {
        Ok((perm, _, _)) => perm,
        Err(_) => (0..n).collect(),
    }
}

/// Sparse LU with threshold partial pivoting (left-looking, Gilbert-Peierls):
/// `P A Q = L U` for a fixed column order `Q`.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    /// `pinv[row] = pivot step` at which `row` was chosen.
    pinv: Vec<usize>,
    q: Vec<usize>,
    /// Unit lower factor, rows in pivot order, diagonal first in each column.
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    /// Upper factor, diagonal last in each column.
    up: Vec<usize>,
    ui: Vec<usize>,
    ux: Vec<f64>,
}

impl SparseLu {
    /// `tol` in `(0, 1]` is the pivot threshold: the diagonal candidate is
    /// kept when it is at least `tol` times the largest candidate.
    pub fn factor(a: &CsrMatrix, q: &[usize], tol: f64) -> Result<SparseLu, ZeroPivot> {
        let n = a.nrows;
        assert_eq!(a.ncols, n, "LU needs a square matrix");
        // Column access to A.
        let at = a.transpose();
        let (ap, ai, ax) = (&at.indptr, &at.indices, &at.values);
        const NONE: usize = usize::MAX;
        let mut pinv = vec![NONE; n];
        let mut lp = vec![0usize; n + 1];
        let mut up = vec![0usize; n + 1];
        let mut li: Vec<usize> = Vec::with_capacity(4 * ai.len());
        let mut lx = Vec::with_capacity(4 * ai.len());
        let mut ui = Vec::with_capacity(4 * ai.len());
        let mut ux = Vec::with_capacity(4 * ai.len());
        let mut x = vec![0.0; n];
        let mut xi = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut pstack = vec![0usize; n];
        let mut marked = vec![false; n];

        for k in 0..n {
            lp[k] = li.len();
            up[k] = ui.len();
            let col = q[k];
            // Reach of column `col` in the graph of L (rows in original order).
            let mut top = n;
            for &start in &ai[ap[col]..ap[col + 1]] {
                if marked[start] {
                    continue;
                }
                let mut head = 0usize;
                stack[0] = start;
                while let Some(&j) = stack.get(head) {
                    let jnew = pinv[j];
                    if !marked[j] {
                        marked[j] = true;
                        pstack[head] = if jnew == NONE { 0 } else { lp[jnew] + 1 };
                    }
                    let end = if jnew == NONE { 0 } else { lp[jnew + 1] };
                    let mut descended = false;
                    let mut p = pstack[head];
                    while p < end {
                        let i: usize = li[p];
                        p += 1;
                        if !marked[i] {
                            pstack[head] = p;
                            head += 1;
                            stack[head] = i;
                            descended = true;
                            break;
                        }
                    }
                    if !descended {
                        top -= 1;
                        xi[top] = j;
                        if head == 0 {
                            break;
                        }
                        head -= 1;
                    }
                }
            }
            for &j in &xi[top..n] {
                marked[j] = false;
                x[j] = 0.0;
            }
            for p in ap[col]..ap[col + 1] {
                x[ai[p]] = ax[p];
            }
            // Sparse triangular solve in topological order.
            for px in top..n {
                let j = xi[px];
                let jc = pinv[j];
                if jc == NONE {
                    continue;
                }
                let xj = x[j];
                for p in lp[jc] + 1..lp[jc + 1] {
                    x[li[p]] -= lx[p] * xj;
                }
            }
            // Pivot choice.
            let mut ipiv = NONE;
            let mut best = -1.0;
            for &i in &xi[top..n] {
                if pinv[i] == NONE {
                    if x[i].abs() > best {
                        best = x[i].abs();
                        ipiv = i;
                    }
                } else {
                    ui.push(pinv[i]);
                    ux.push(x[i]);
                }
            }
            if ipiv == NONE || !(best > 0.0) || !best.is_finite() {
                return Err(ZeroPivot(col));
            }
            if pinv[col] == NONE && x[col].abs() >= best * tol {
                ipiv = col;
            }
            let pivot = x[ipiv];
            ui.push(k);
            ux.push(pivot);
            pinv[ipiv] = k;
            li.push(ipiv);
            lx.push(1.0);
            for &i in &xi[top..n] {
                if pinv[i] == NONE {
                    li.push(i);
                    lx.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        lp[n] = li.len();
        up[n] = ui.len();
        for r in li.iter_mut() {
            *r = pinv[*r];
        }
        Ok(SparseLu {
            n,
            pinv,
            q: q.to_vec(),
            lp,
            li,
            lx,
            up,
            ui,
            ux,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.pinv[i]] = b[i];
        }
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in (0..n).rev() {
            let last = self.up[j + 1] - 1;
            x[j] /= self.ux[last];
            let xj = x[j];
            for p in self.up[j]..last {
                x[self.ui[p]] -= self.ux[p] * xj;
            }
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.q[k]] = x[k];
        }
        out
    }

    pub fn factor_nnz(&self) -> usize {
        self.li.len() + self.ui.len()
    }
}

/// Solves `A x = b` by sparse LU with a few steps of iterative refinement.
/// Returns the solution and the final relative residual.
pub fn lu_solve(a: &CsrMatrix, lu: &SparseLu, b: &[f64]) -> (Vec<f64>, f64) {
    let bnorm = norm_inf(b).max(f64::MIN_POSITIVE);
    let mut x = lu.solve(b);
    let mut rel = f64::INFINITY;
    for _ in 0..5 {
        let ax = a.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let new_rel = norm_inf(&r) / bnorm;
        if !(new_rel < rel) {
            break;
        }
        rel = new_rel;
        if rel < 1e-15 {
            break;
        }
        let dx = lu.solve(&r);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
    }
    (x, rel)
}

/// Square unsymmetric solves with a column order computed once per pattern.
#[derive(Debug, Clone)]
pub struct SquareSolver {
    order: Vec<usize>,
}

impl SquareSolver {
    /// `pattern` lists the structural nonzeros `(row, col)` of `J`.
    pub fn new(n: usize, pattern: &[(usize, usize)]) -> Self {
        SquareSolver {
            order: amd_order(n, pattern),
        }
    }

    /// Returns the solution and the final relative residual.
    pub fn solve(&self, jac: &CsrMatrix, b: &[f64]) -> Result<(Vec<f64>, f64), ZeroPivot> {
        let lu = SparseLu::factor(jac, &self.order, 0.1)?;
        Ok(lu_solve(jac, &lu, b))
    }
}
