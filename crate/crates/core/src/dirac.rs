//! Constant Dirac structures on `F x E`, `F = E = R^N`.
//!
//! Elements are stacked as `[f; e]` (length `2N`). The pairing is
//! `<<(f1,e1),(f2,e2)>> = e1.f2 + e2.f1`, i.e. `x1' P x2` with
//! `P = [[0, I], [I, 0]]`. A subspace is Dirac iff it is isotropic and has
//! dimension `N`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SphsError};

/// Named contiguous port blocks partitioning the `N` flow (and effort) coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortLayout {
    blocks: Vec<(String, usize)>,
}

impl PortLayout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let blocks: Vec<(String, usize)> = blocks
            .into_iter()
            .map(|(n, w)| (n.into(), w))
            .filter(|(_, w)| *w > 0)
            .collect();
        for (i, (name, _)) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|(n, _)| n == name) {
                return Err(SphsError::Dirac(format!("duplicate port name {name:?}")));
            }
        }
        Ok(Self { blocks })
    }

    pub fn single(name: &str, width: usize) -> Self {
        Self::new([(name, width)]).expect("single block is always valid")
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(|(_, w)| w).sum()
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    /// `(offset, width)` of the named block.
    pub fn find(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for (n, w) in &self.blocks {
            if n == name {
                return Some((off, *w));
            }
            off += w;
        }
        None
    }
}

/// Rank threshold `factor * N * eps * sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTolerance {
    pub factor: f64,
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self { factor: 1.0 }
    }
}

impl RankTolerance {
    fn threshold(&self, n: usize, sigma_max: f64) -> f64 {
        self.factor * n.max(1) as f64 * f64::EPSILON * sigma_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiracSubspace {
    n: usize,
    basis: DMatrix<f64>,
    generators: DMatrix<f64>,
    layout: PortLayout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiracVerdict {
    pub is_dirac: bool,
    pub dimension: usize,
    pub expected_dimension: usize,
    /// `max |<<g_i, g_j>>|` over the construction generators.
    pub isotropy_residual: f64,
    /// Same over the orthonormal basis; this is what the verdict uses.
    pub normalized_residual: f64,
}

/// `e_a.f_b + e_b.f_a` for stacked `[f; e]` vectors.
pub fn pairing(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SphsError::dim("pairing operand", a.len(), b.len()));
    }
    if !a.len().is_multiple_of(2) {
        return Err(SphsError::Dirac(format!(
            "flow-effort vector has odd length {}",
            a.len()
        )));
    }
    let n = a.len() / 2;
    let (fa, ea) = (a.rows(0, n), a.rows(n, n));
    let (fb, eb) = (b.rows(0, n), b.rows(n, n));
    Ok(ea.dot(&fb) + eb.dot(&fa))
}

/// Stacks flows and efforts into one element.
pub fn element(f: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(f.len() + e.len());
    x.rows_mut(0, f.len()).copy_from(f);
    x.rows_mut(f.len(), e.len()).copy_from(e);
    x
}

fn pairing_gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() / 2;
    let top = m.rows(0, n);
    let bottom = m.rows(n, n);
    let g = bottom.transpose() * top;
    &g + g.transpose()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, &v| a.max(v.abs()))
}

/// Orthonormal basis of the column span.
pub fn orthonormal_span(m: &DMatrix<f64>, tol: RankTolerance) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let thr = tol.threshold(m.nrows().max(m.ncols()), smax);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > thr)
        .collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Orthonormal basis of `{v : m v = 0}`.
pub fn nullspace(m: &DMatrix<f64>, tol: RankTolerance) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if c == 0 {
        return DMatrix::zeros(0, 0);
    }
    if r == 0 {
        return DMatrix::identity(c, c);
    }
    let padded = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.rows_mut(0, r).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let thr = tol.threshold(r.max(c), smax);
    let null: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax == 0.0 || svd.singular_values[i] <= thr)
        .collect();
    DMatrix::from_fn(c, null.len(), |row, col| vt[(null[col], row)])
}

/// Principal angles between the spans of two orthonormal bases, ascending.
///
/// Computed from sines so that angles near zero keep full accuracy.
/// Returns `None` when the dimensions differ.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<Vec<f64>> {
    if a.shape() != b.shape() {
        return None;
    }
    if a.ncols() == 0 {
        return Some(Vec::new());
    }
    let resid = b - a * (a.transpose() * b);
    let s = resid.svd(false, false).singular_values;
    let mut angles: Vec<f64> = s.iter().map(|v| v.min(1.0).asin()).collect();
    angles.sort_by(|x, y| x.total_cmp(y));
    Some(angles)
}

impl DiracSubspace {
    /// Span of the given `2N x k` generator columns.
    pub fn from_generators(generators: DMatrix<f64>, layout: PortLayout) -> Result<Self> {
        Self::from_generators_with(generators, layout, RankTolerance::default())
    }

    pub fn from_generators_with(generators: DMatrix<f64>, layout: PortLayout, tol: RankTolerance) -> Result<Self> {
        let n = layout.total();
        if generators.nrows() != 2 * n {
            return Err(SphsError::dim("generator rows (2N)", 2 * n, generators.nrows()));
        }
        if generators.iter().any(|v| !v.is_finite()) {
            return Err(SphsError::Dirac("non-finite generator entries".into()));
        }
        let basis = orthonormal_span(&generators, tol);
        Ok(Self {
            n,
            basis,
            generators,
            layout,
        })
    }

    /// Graph `{(J e, e)}` of a linear map; Dirac iff `J` is skew.
    pub fn graph(j: &DMatrix<f64>) -> Result<Self> {
        let (r, c) = j.shape();
        if r != c {
            return Err(SphsError::dim("graph map columns", r, c));
        }
        let mut g = DMatrix::zeros(2 * r, r);
        g.rows_mut(0, r).copy_from(j);
        g.rows_mut(r, r).fill_with_identity();
        Self::from_generators(g, PortLayout::single("storage", r))
    }

    /// `{(f, e) : F f + E e = 0}`.
    pub fn from_kernel(f: &DMatrix<f64>, e: &DMatrix<f64>, tol: f64) -> Result<Self> {
        let n = f.nrows();
        if f.shape() != (n, n) {
            return Err(SphsError::dim("kernel F columns", n, f.ncols()));
        }
        if e.shape() != (n, n) {
            return Err(SphsError::dim("kernel E shape", n, e.nrows().max(e.ncols())));
        }
        let cross = f * e.transpose() + e * f.transpose();
        let scale = 1.0f64.max(f.norm() * e.norm());
        let r = max_abs(&cross);
        if r > tol * scale {
            return Err(SphsError::Dirac(format!("F E^T + E F^T is not zero (max entry {r:e})")));
        }
        let mut stacked = DMatrix::zeros(n, 2 * n);
        stacked.columns_mut(0, n).copy_from(f);
        stacked.columns_mut(n, n).copy_from(e);
        let null = nullspace(&stacked, RankTolerance::default());
        if null.ncols() != n {
            return Err(SphsError::Dirac(format!(
                "rank [F | E] = {} but must equal N = {n}",
                2 * n - null.ncols()
            )));
        }
        Ok(Self {
            n,
            basis: null.clone(),
            generators: null,
            layout: PortLayout::single("port", n),
        })
    }

    /// Local explicit form with storage, resistive, control and noise ports:
    /// `f_S = -J e_S - G_R f_R - G_C f_C - G_N f_N`, `e_k = G_k^T e_S`.
    pub fn from_explicit(
        j: &DMatrix<f64>,
        g_r: &DMatrix<f64>,
        g_c: &DMatrix<f64>,
        g_n: &DMatrix<f64>,
        tol: f64,
    ) -> Result<Self> {
        let n = j.nrows();
        if j.ncols() != n {
            return Err(SphsError::dim("J columns", n, j.ncols()));
        }
        for (what, g) in [("G_R rows", g_r), ("G_C rows", g_c), ("G_N rows", g_n)] {
            if g.nrows() != n {
                return Err(SphsError::dim(what, n, g.nrows()));
            }
        }
        let skew = max_abs(&(j + j.transpose()));
        if skew > tol * 1.0f64.max(j.norm()) {
            return Err(SphsError::Dirac(format!(
                "J is not skew-symmetric (max |J + J^T| = {skew:e})"
            )));
        }
        let (mr, mc, mn) = (g_r.ncols(), g_c.ncols(), g_n.ncols());
        let big_n = n + mr + mc + mn;
        let layout = PortLayout::new([("storage", n), ("resistive", mr), ("control", mc), ("noise", mn)])?;
        let gs = [g_r, g_c, g_n];
        let mut gen = DMatrix::zeros(2 * big_n, big_n);
        // columns 0..n: e_S = unit vector
        for i in 0..n {
            for r in 0..n {
                gen[(r, i)] = -j[(r, i)];
            }
            gen[(big_n + i, i)] = 1.0;
            let mut off = n;
            for g in gs {
                for k in 0..g.ncols() {
                    gen[(big_n + off + k, i)] = g[(i, k)];
                }
                off += g.ncols();
            }
        }
        // remaining columns: one port flow free
        let mut col = n;
        let mut off = n;
        for g in gs {
            for k in 0..g.ncols() {
                for r in 0..n {
                    gen[(r, col)] = -g[(r, k)];
                }
                gen[(off + k, col)] = 1.0;
                col += 1;
            }
            off += g.ncols();
        }
        Self::from_generators(gen, layout)
    }

    /// `{(f_from, f_to, e_from, e_to) : f_to = -f_from, e_to = e_from}`.
    ///
    /// Composing a structure with a wire through `from` renames that port to `to`.
    pub fn wire(width: usize, from: &str, to: &str) -> Result<Self> {
        let layout = PortLayout::new([(from, width), (to, width)])?;
        let n = 2 * width;
        let mut gen = DMatrix::zeros(2 * n, n);
        for i in 0..width {
            gen[(i, i)] = 1.0;
            gen[(width + i, i)] = -1.0;
            gen[(n + i, width + i)] = 1.0;
            gen[(n + width + i, width + i)] = 1.0;
        }
        Self::from_generators(gen, layout)
    }

    pub fn total_dim(&self) -> usize {
        self.n
    }

    pub fn dimension(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn layout(&self) -> &PortLayout {
        &self.layout
    }

    pub fn with_layout(mut self, layout: PortLayout) -> Result<Self> {
        if layout.total() != self.n {
            return Err(SphsError::dim("layout width", self.n, layout.total()));
        }
        self.layout = layout;
        Ok(self)
    }

    /// Renames every port except those in `keep` to `prefix + name`.
    pub fn with_prefix(self, prefix: &str, keep: &[&str]) -> Result<Self> {
        let blocks: Vec<(String, usize)> = self
            .layout
            .blocks
            .iter()
            .map(|(n, w)| {
                if keep.contains(&n.as_str()) {
                    (n.clone(), *w)
                } else {
                    (format!("{prefix}{n}"), *w)
                }
            })
            .collect();
        let layout = PortLayout::new(blocks)?;
        self.with_layout(layout)
    }

    /// Same subspace, re-orthonormalized from its current basis.
    pub fn reorthonormalized(&self) -> Self {
        let basis = orthonormal_span(&self.basis, RankTolerance::default());
        Self { basis, ..self.clone() }
    }

    /// Replaces the basis by `basis * q` for an orthogonal `q`; the subspace is unchanged.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Self> {
        if q.shape() != (self.dimension(), self.dimension()) {
            return Err(SphsError::dim("rotation size", self.dimension(), q.nrows()));
        }
        let basis = &self.basis * q;
        Ok(Self {
            basis: basis.clone(),
            generators: basis,
            ..self.clone()
        })
    }

    pub fn is_dirac(&self, tol: f64) -> DiracVerdict {
        let isotropy_residual = max_abs(&pairing_gram(&self.generators));
        let normalized_residual = max_abs(&pairing_gram(&self.basis));
        let dimension = self.dimension();
        DiracVerdict {
            is_dirac: normalized_residual <= tol && dimension == self.n,
            dimension,
            expected_dimension: self.n,
            isotropy_residual,
            normalized_residual,
        }
    }

    /// Element `basis * coeffs` as `[f; e]`.
    pub fn element(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        if coeffs.len() != self.dimension() {
            return Err(SphsError::dim("basis coordinates", self.dimension(), coeffs.len()));
        }
        Ok(&self.basis * coeffs)
    }

    /// `sum over ports of e_port . f_port` for the element with the given coordinates.
    pub fn element_power(&self, coeffs: &DVector<f64>) -> Result<f64> {
        let x = self.element(coeffs)?;
        let n = self.n;
        Ok(self
            .layout
            .blocks
            .iter()
            .scan(0, |off, (_, w)| {
                let o = *off;
                *off += w;
                Some(x.rows(n + o, *w).dot(&x.rows(o, *w)))
            })
            .sum())
    }

    /// Largest principal angle to another subspace; `pi/2` if dimensions differ.
    pub fn distance(&self, other: &DiracSubspace) -> f64 {
        match principal_angles(&self.basis, &other.basis) {
            Some(a) => a.last().copied().unwrap_or(0.0),
            None => std::f64::consts::FRAC_PI_2,
        }
    }

    /// Composition through `shared`: `(.., -f, e)` in `self`, `(.., f, e)` in `other`.
    ///
    /// The result's ports are `self`'s remaining ports followed by `other`'s.
    pub fn compose(&self, other: &DiracSubspace, shared: &str) -> Result<DiracSubspace> {
        self.compose_with(other, shared, RankTolerance::default())
    }

    pub fn compose_with(&self, other: &DiracSubspace, shared: &str, tol: RankTolerance) -> Result<DiracSubspace> {
        let (oa, wa) = self
            .layout
            .find(shared)
            .ok_or_else(|| SphsError::Dirac(format!("port {shared:?} missing from first operand")))?;
        let (ob, wb) = other
            .layout
            .find(shared)
            .ok_or_else(|| SphsError::Dirac(format!("port {shared:?} missing from second operand")))?;
        if wa != wb {
            return Err(SphsError::Dirac(format!(
                "port {shared:?} has width {wa} in the first operand and {wb} in the second"
            )));
        }
        let w = wa;
        let ext_blocks: Vec<(String, usize)> = self
            .layout
            .blocks
            .iter()
            .chain(other.layout.blocks.iter())
            .filter(|(n, _)| n != shared)
            .cloned()
            .collect();
        let layout = PortLayout::new(ext_blocks)?;

        let (na, nb) = (self.n, other.n);
        let (ba, bb) = (&self.basis, &other.basis);
        let (da, db) = (ba.ncols(), bb.ncols());

        // f_a + f_b = 0, e_a - e_b = 0 on the shared port
        let mut cons = DMatrix::zeros(2 * w, da + db);
        for i in 0..w {
            for c in 0..da {
                cons[(i, c)] = ba[(oa + i, c)];
                cons[(w + i, c)] = ba[(na + oa + i, c)];
            }
            for c in 0..db {
                cons[(i, da + c)] = bb[(ob + i, c)];
                cons[(w + i, da + c)] = -bb[(nb + ob + i, c)];
            }
        }
        let kernel = nullspace(&cons, tol);

        let n_out = na + nb - 2 * w;
        let ext_rows = |n: usize, o: usize| -> Vec<usize> { (0..n).filter(|&r| r < o || r >= o + w).collect() };
        let ra = ext_rows(na, oa);
        let rb = ext_rows(nb, ob);
        let mut proj = DMatrix::zeros(2 * n_out, kernel.ncols());
        let ka = kernel.rows(0, da);
        let kb = kernel.rows(da, db);
        let xa = ba * ka;
        let xb = bb * kb;
        for c in 0..kernel.ncols() {
            let rows = ra.iter().map(|&r| (&xa, na, r)).chain(rb.iter().map(|&r| (&xb, nb, r)));
            for (k, (x, n_side, r)) in rows.enumerate() {
                proj[(k, c)] = x[(r, c)];
                proj[(n_out + k, c)] = x[(n_side + r, c)];
            }
        }
        let basis = orthonormal_span(&proj, tol);
        Ok(DiracSubspace {
            n: n_out,
            basis: basis.clone(),
            generators: basis,
            layout,
        })
    }
}
