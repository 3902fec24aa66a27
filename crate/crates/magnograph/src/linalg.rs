//! Structured linear algebra for metric-graph discretizations.
//!
//! Three layers:
//! * [`Csr`] — complex sparse matrices in CSR form (assembly, matvec,
//!   Hermiticity defect).
//! * [`BandMatrix`]/[`BandedLu`] — real banded LU with partial pivoting
//!   (classic compact band scheme with multiplier storage).
//! * [`CondensedLu`] — the workhorse direct solver: per-edge interior
//!   unknowns form independent banded blocks (complex tridiagonal coupling,
//!   realified to bandwidth 3), vertex unknowns form a small dense border;
//!   a Schur complement on the border couples everything. Solve cost is
//!   linear in the number of nodes.
//!
//! Realification convention: free complex DOF `f` maps to real unknowns
//! `2f` (real part) and `2f+1` (imaginary part). A complex-linear factor
//! `z ↦ c·z` becomes the block `[[Re c, −Im c], [Im c, Re c]]`; a
//! conjugate-linear factor `z ↦ d·conj(z)` becomes
//! `[[Re d, Im d], [Im d, −Re d]]`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::field::{C64, GraphGrid};

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("matrix structure error: {0}")]
    Structure(String),
}

/// A 2×2 real block acting on the (re, im) pair of one complex DOF.
pub type Block2 = [[f64; 2]; 2];

/// Realified block of a complex-linear coefficient `z ↦ c·z`.
#[inline]
pub fn complex_linear_block(c: C64) -> Block2 {
    [[c.re, -c.im], [c.im, c.re]]
}

/// Realified block of a conjugate-linear coefficient `z ↦ d·conj(z)`.
#[inline]
pub fn conj_linear_block(d: C64) -> Block2 {
    [[d.re, d.im], [d.im, -d.re]]
}

/// Interleaves a complex vector as `[re₀, im₀, re₁, im₁, …]`.
pub fn realify(z: &[C64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * z.len());
    for v in z {
        out.push(v.re);
        out.push(v.im);
    }
    out
}

/// Inverse of [`realify`].
pub fn unrealify(x: &[f64]) -> Vec<C64> {
    debug_assert_eq!(x.len() % 2, 0);
    x.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect()
}

// ---------------------------------------------------------------------------
// Complex CSR
// ---------------------------------------------------------------------------

/// Square complex sparse matrix, rows sorted by column index.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<C64>,
}

impl Csr {
    /// Builds from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(n: usize, trips: &[(usize, usize, C64)]) -> Csr {
        let mut sorted: Vec<(usize, usize, C64)> = trips.to_vec();
        sorted.sort_by_key(|&(i, j, _)| (i, j));
        let mut rows: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut col_idx: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut vals: Vec<C64> = Vec::with_capacity(sorted.len());
        for (i, j, v) in sorted {
            debug_assert!(i < n && j < n);
            if rows.last() == Some(&i) && col_idx.last() == Some(&j) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(i);
                col_idx.push(j);
                vals.push(v);
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &i in &rows {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// y = A x.
    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = vec![C64::new(0.0, 0.0); self.n];
        for i in 0..self.n {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    /// Entry (i, j), zero if not stored.
    pub fn get(&self, i: usize, j: usize) -> C64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.vals[lo + k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    /// max_{i,j} |a_ij − conj(a_ji)| over the stored pattern.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut defect = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let d = (self.vals[k] - self.get(j, i).conj()).norm();
                defect = defect.max(d);
            }
        }
        defect
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] += self.vals[k];
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
}

// ---------------------------------------------------------------------------
// Real banded LU with partial pivoting
// ---------------------------------------------------------------------------

/// Compact band storage: entry (i, j) with `−kl ≤ j−i ≤ ku` lives at slot
/// `(i, j − i + kl)` of an `n × (kl+ku+1)` array.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    a: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        BandMatrix {
            n,
            kl,
            ku,
            a: vec![0.0; n * (kl + ku + 1)],
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "outside band");
        let m = self.kl + self.ku + 1;
        self.a[i * m + (j + self.kl - i)] += v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.kl + self.ku + 1;
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for s in 0..m {
                let j = (i + s).checked_sub(self.kl);
                if let Some(j) = j {
                    if j < self.n {
                        d[(i, j)] = self.a[i * m + s];
                    }
                }
            }
        }
        d
    }

    /// LU factorization with partial pivoting (compact band scheme: the
    /// upper factor stays in-place, multipliers and the row permutation are
    /// recorded separately).
    pub fn factor(mut self) -> Result<BandedLu, LinalgError> {
        let n = self.n;
        let kl = self.kl;
        let m = kl + self.ku + 1;
        let a = &mut self.a;
        // Left-justify the first kl rows (their leading columns are clipped).
        let mut l = kl;
        for i in 0..kl.min(n) {
            for j in (kl - i)..m {
                a[i * m + (j - l)] = a[i * m + j];
            }
            l -= 1;
            for j in (m - l - 1)..m {
                a[i * m + j] = 0.0;
            }
        }
        let mut al = vec![0.0; n * kl];
        let mut indx = vec![0usize; n];
        for k in 0..n {
            let lend = (k + kl).min(n - 1);
            let mut piv = a[k * m];
            let mut ipiv = k;
            for j in (k + 1)..=lend {
                if a[j * m].abs() > piv.abs() {
                    piv = a[j * m];
                    ipiv = j;
                }
            }
            indx[k] = ipiv;
            if piv == 0.0 {
                return Err(LinalgError::Singular(format!(
                    "zero pivot at banded elimination step {k}"
                )));
            }
            if ipiv != k {
                for j in 0..m {
                    a.swap(k * m + j, ipiv * m + j);
                }
            }
            for i in (k + 1)..=lend {
                let mult = a[i * m] / a[k * m];
                al[k * kl + (i - k - 1)] = mult;
                for j in 1..m {
                    a[i * m + (j - 1)] = a[i * m + j] - mult * a[k * m + j];
                }
                a[i * m + (m - 1)] = 0.0;
            }
        }
        Ok(BandedLu {
            n,
            kl,
            m,
            a: std::mem::take(a),
            al,
            indx,
        })
    }
}

/// Factored banded matrix; `solve_in_place` applies forward/back substitution.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    m: usize,
    a: Vec<f64>,
    al: Vec<f64>,
    indx: Vec<usize>,
}

impl BandedLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        let (n, kl, m) = (self.n, self.kl, self.m);
        for k in 0..n {
            let ip = self.indx[k];
            if ip != k {
                b.swap(k, ip);
            }
            let lend = (k + kl).min(n - 1);
            for i in (k + 1)..=lend {
                b[i] -= self.al[k * kl + (i - k - 1)] * b[k];
            }
        }
        let mut l = 1usize;
        for i in (0..n).rev() {
            let mut dum = b[i];
            for k in 1..l {
                dum -= self.a[i * m + k] * b[i + k];
            }
            b[i] = dum / self.a[i * m];
            if l < m {
                l += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Condensed (banded interiors + dense vertex border) solver
// ---------------------------------------------------------------------------

/// Which structural region a free complex DOF belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Border,
    Edge(u32),
}

/// Free-DOF partition induced by a grid: vertices are the border, each
/// edge's interior nodes form one contiguous banded block.
#[derive(Debug, Clone)]
pub struct CondensedLayout {
    pub n_free: usize,
    pub n_border: usize,
    /// Half-open free-index ranges of each edge's interior nodes.
    pub edge_ranges: Vec<(usize, usize)>,
    owner: Vec<Owner>,
}

impl CondensedLayout {
    pub fn from_grid(grid: &GraphGrid) -> Self {
        let n_border = grid.n_vertices;
        let n_free = grid.n_free();
        let mut owner = vec![Owner::Border; n_free];
        let mut edge_ranges = Vec::with_capacity(grid.edges.len());
        for (ei, eg) in grid.edges.iter().enumerate() {
            let n_int = eg.n_nodes - 2;
            if n_int == 0 {
                edge_ranges.push((n_border, n_border));
                continue;
            }
            let s = grid.free_of_global[eg.interior_start]
                .expect("interior DOFs are never pinned");
            for f in s..s + n_int {
                owner[f] = Owner::Edge(ei as u32);
            }
            edge_ranges.push((s, s + n_int));
        }
        CondensedLayout {
            n_free,
            n_border,
            edge_ranges,
            owner,
        }
    }
}

/// Factored block system over realified free DOFs.
pub struct CondensedLu {
    layout: CondensedLayout,
    /// Banded LU of each edge's interior block (None when no interiors).
    edge_lus: Vec<Option<BandedLu>>,
    /// Border real-column indices with nonzero interior coupling, per edge.
    w_cols: Vec<Vec<usize>>,
    /// W = A_II⁻¹ A_IB; rows = local interior reals, cols follow `w_cols`.
    w: Vec<DMatrix<f64>>,
    /// A_BI entries: (border real row, local interior real col, value).
    a_bi: Vec<Vec<(usize, usize, f64)>>,
    schur_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl CondensedLu {
    /// Assembles and factors the realified block system given as 2×2 block
    /// triplets over free complex DOFs. Blocks must respect the layout:
    /// interior–interior coupling only within one edge (nearest neighbors),
    /// anything involving a vertex is fine.
    pub fn factor(
        layout: CondensedLayout,
        blocks: &[(usize, usize, Block2)],
    ) -> Result<CondensedLu, LinalgError> {
        let ne = layout.edge_ranges.len();
        let nb2 = 2 * layout.n_border;
        let mut a_bb = DMatrix::<f64>::zeros(nb2, nb2);
        let mut bands: Vec<Option<BandMatrix>> = layout
            .edge_ranges
            .iter()
            .map(|&(s, e)| {
                if e > s {
                    Some(BandMatrix::new(2 * (e - s), 3, 3))
                } else {
                    None
                }
            })
            .collect();
        let mut a_ib: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); ne];
        let mut a_bi: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); ne];

        for &(r, c, m) in blocks {
            if r >= layout.n_free || c >= layout.n_free {
                return Err(LinalgError::Structure(format!(
                    "block index ({r}, {c}) out of range"
                )));
            }
            match (layout.owner[r], layout.owner[c]) {
                (Owner::Border, Owner::Border) => {
                    for i in 0..2 {
                        for j in 0..2 {
                            a_bb[(2 * r + i, 2 * c + j)] += m[i][j];
                        }
                    }
                }
                (Owner::Edge(e), Owner::Border) => {
                    let s = layout.edge_ranges[e as usize].0;
                    for i in 0..2 {
                        for j in 0..2 {
                            if m[i][j] != 0.0 {
                                a_ib[e as usize].push((2 * (r - s) + i, 2 * c + j, m[i][j]));
                            }
                        }
                    }
                }
                (Owner::Border, Owner::Edge(e)) => {
                    let s = layout.edge_ranges[e as usize].0;
                    for i in 0..2 {
                        for j in 0..2 {
                            if m[i][j] != 0.0 {
                                a_bi[e as usize].push((2 * r + i, 2 * (c - s) + j, m[i][j]));
                            }
                        }
                    }
                }
                (Owner::Edge(e1), Owner::Edge(e2)) => {
                    if e1 != e2 {
                        return Err(LinalgError::Structure(format!(
                            "coupling between interiors of different edges ({e1}, {e2})"
                        )));
                    }
                    let s = layout.edge_ranges[e1 as usize].0;
                    let band = bands[e1 as usize].as_mut().expect("nonempty edge");
                    for i in 0..2 {
                        for j in 0..2 {
                            if m[i][j] != 0.0 {
                                band.add(2 * (r - s) + i, 2 * (c - s) + j, m[i][j]);
                            }
                        }
                    }
                }
            }
        }

        let mut edge_lus = Vec::with_capacity(ne);
        for band in bands {
            edge_lus.push(match band {
                Some(b) => Some(b.factor()?),
                None => None,
            });
        }

        // W = A_II⁻¹ A_IB per edge, on the border columns that appear.
        let mut w_cols = Vec::with_capacity(ne);
        let mut w = Vec::with_capacity(ne);
        for e in 0..ne {
            let (s, t) = layout.edge_ranges[e];
            let nint2 = 2 * (t - s);
            let mut cols: Vec<usize> = a_ib[e].iter().map(|&(_, c, _)| c).collect();
            cols.sort_unstable();
            cols.dedup();
            let mut wm = DMatrix::<f64>::zeros(nint2, cols.len());
            if let Some(lu) = &edge_lus[e] {
                for (ci, &col) in cols.iter().enumerate() {
                    let mut rhs = vec![0.0; nint2];
                    for &(lr, c, v) in &a_ib[e] {
                        if c == col {
                            rhs[lr] += v;
                        }
                    }
                    lu.solve_in_place(&mut rhs);
                    for lr in 0..nint2 {
                        wm[(lr, ci)] = rhs[lr];
                    }
                }
            }
            w_cols.push(cols);
            w.push(wm);
        }

        // Schur complement on the border.
        let mut schur = a_bb;
        for e in 0..ne {
            for &(br, lc, v) in &a_bi[e] {
                for (ci, &col) in w_cols[e].iter().enumerate() {
                    schur[(br, col)] -= v * w[e][(lc, ci)];
                }
            }
        }
        let schur_lu = schur.lu();
        if !lu_is_invertible(&schur_lu) {
            return Err(LinalgError::Singular(
                "vertex Schur complement is singular".to_string(),
            ));
        }

        Ok(CondensedLu {
            layout,
            edge_lus,
            w_cols,
            w,
            a_bi,
            schur_lu,
        })
    }

    pub fn n_real(&self) -> usize {
        2 * self.layout.n_free
    }

    /// Solves the realified system for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        debug_assert_eq!(b.len(), self.n_real());
        let nb2 = 2 * self.layout.n_border;
        let ne = self.layout.edge_ranges.len();

        // Forward eliminate interiors.
        let mut y: Vec<Vec<f64>> = Vec::with_capacity(ne);
        for e in 0..ne {
            let (s, t) = self.layout.edge_ranges[e];
            let mut be: Vec<f64> = b[2 * s..2 * t].to_vec();
            if let Some(lu) = &self.edge_lus[e] {
                lu.solve_in_place(&mut be);
            }
            y.push(be);
        }
        let mut rb = nalgebra::DVector::<f64>::zeros(nb2);
        rb.as_mut_slice().copy_from_slice(&b[..nb2]);
        for e in 0..ne {
            for &(br, lc, v) in &self.a_bi[e] {
                rb[br] -= v * y[e][lc];
            }
        }
        // Border solve.
        let zb = self
            .schur_lu
            .solve(&rb)
            .ok_or_else(|| LinalgError::Singular("border solve failed".to_string()))?;
        // Back substitute interiors.
        let mut x = vec![0.0; self.n_real()];
        x[..nb2].copy_from_slice(zb.as_slice());
        for e in 0..ne {
            let (s, t) = self.layout.edge_ranges[e];
            let nint2 = 2 * (t - s);
            let mut xe = y[e].clone();
            for (ci, &col) in self.w_cols[e].iter().enumerate() {
                let zc = zb[col];
                if zc != 0.0 {
                    for lr in 0..nint2 {
                        xe[lr] -= self.w[e][(lr, ci)] * zc;
                    }
                }
            }
            x[2 * s..2 * t].copy_from_slice(&xe);
        }
        Ok(x)
    }

    /// Solves a complex-linear system through the realified factorization.
    pub fn solve_complex(&self, b: &[C64]) -> Result<Vec<C64>, LinalgError> {
        Ok(unrealify(&self.solve(&realify(b))?))
    }
}

fn lu_is_invertible(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let n = lu.u().nrows();
    (0..n).all(|i| lu.u()[(i, i)].abs() > 0.0)
}

/// Replaces one realified equation with the identity `x[2·f+comp] = rhs`,
/// in place on the block list. Used to pin a phase (or any single real
/// component) before factoring; apply the matching replacement to the RHS.
pub fn anchor_block_row(blocks: &mut Vec<(usize, usize, Block2)>, f: usize, comp: usize) {
    for (r, _c, m) in blocks.iter_mut() {
        if *r == f {
            m[comp][0] = 0.0;
            m[comp][1] = 0.0;
        }
    }
    let mut eye = [[0.0; 2]; 2];
    eye[comp][comp] = 1.0;
    blocks.push((f, f, eye));
}

/// Sherman–Morrison wrapper: solves `(A − c·q·qᵀ)x = b` reusing a factored
/// `A`. Fails if the rank-one update makes the system (near-)singular.
pub struct RankOneSolver<'a> {
    lu: &'a CondensedLu,
    q: Vec<f64>,
    y: Vec<f64>,
    c: f64,
    denom: f64,
}

impl<'a> RankOneSolver<'a> {
    pub fn new(lu: &'a CondensedLu, q: Vec<f64>, c: f64) -> Result<Self, LinalgError> {
        let y = lu.solve(&q)?;
        let qty: f64 = q.iter().zip(&y).map(|(a, b)| a * b).sum();
        let denom = 1.0 - c * qty;
        if denom.abs() < 1e-14 * (1.0 + (c * qty).abs()) {
            return Err(LinalgError::Singular(
                "rank-one update is singular (unit denominator vanished)".to_string(),
            ));
        }
        Ok(RankOneSolver { lu, q, y, c, denom })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let x0 = self.lu.solve(b)?;
        let qtx: f64 = self.q.iter().zip(&x0).map(|(a, b)| a * b).sum();
        let scale = self.c * qtx / self.denom;
        Ok(x0
            .iter()
            .zip(&self.y)
            .map(|(x, y)| x + scale * y)
            .collect())
    }
}

/// Dense realified matrix from block triplets (test/fallback helper).
pub fn blocks_to_dense(n_free: usize, blocks: &[(usize, usize, Block2)]) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(2 * n_free, 2 * n_free);
    for &(r, c, m) in blocks {
        for i in 0..2 {
            for j in 0..2 {
                d[(2 * r + i, 2 * c + j)] += m[i][j];
            }
        }
    }
    d
}
