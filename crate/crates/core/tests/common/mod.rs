#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sphs::dirac::{DiracSubspace, PortLayout};
use sphs::drivers::RandomStream;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

pub fn random_skew(n: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    let a = random_matrix(n, n, rng);
    &a - a.transpose()
}

pub fn random_vector(n: usize, rng: &mut RandomStream) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.standard_normal())
}

pub fn uniform_index(k: usize, rng: &mut RandomStream) -> usize {
    // normal -> uniform via the error function is overkill; fold a normal into [0, k)
    let u = 0.5 * (1.0 + (rng.standard_normal() / 2f64.sqrt()).tanh());
    ((u * k as f64) as usize).min(k - 1)
}

/// Explicit-form structure with storage, resistive, shared control and noise ports;
/// every port except `control` is prefixed.
pub fn random_explicit(prefix: &str, m_shared: usize, rng: &mut RandomStream) -> DiracSubspace {
    let n = 1 + uniform_index(3, rng);
    let mr = uniform_index(3, rng);
    let mn = uniform_index(2, rng);
    let j = random_skew(n, rng);
    DiracSubspace::from_explicit(
        &j,
        &random_matrix(n, mr, rng),
        &random_matrix(n, m_shared, rng),
        &random_matrix(n, mn, rng),
        1e-12,
    )
    .unwrap()
    .with_prefix(prefix, &["control"])
    .unwrap()
}

fn svd_null(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut sq = DMatrix::zeros(r.max(c), c);
    sq.rows_mut(0, r).copy_from(m);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max().max(1e-300);
    let cols: Vec<usize> = (0..c).filter(|&i| svd.singular_values[i] <= rel * smax).collect();
    DMatrix::from_fn(c, cols.len(), |row, k| vt[(cols[k], row)])
}

fn svd_span(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel * smax)
        .collect();
    DMatrix::from_fn(m.nrows(), cols.len(), |row, k| u[(row, cols[k])])
}

/// Composition by brute force: both operands as annihilators (`x in D iff B^T P x = 0`,
/// valid because `D = D^perp`), solved jointly over all port variables, then
/// projected onto the external ones.
pub fn compose_oracle(a: &DiracSubspace, b: &DiracSubspace, shared: &str) -> DMatrix<f64> {
    let (oa, w) = a.layout().find(shared).unwrap();
    let (ob, _) = b.layout().find(shared).unwrap();
    let (na, nb) = (a.total_dim(), b.total_dim());
    let ea = na - w;
    let eb = nb - w;
    let ne = ea + eb;
    // z = [ext flows (a then b), ext efforts (a then b), f, e]
    let nz = 2 * ne + 2 * w;
    let ext_rows = |n: usize, o: usize| -> Vec<usize> { (0..n).filter(|&r| r < o || r >= o + w).collect() };
    let build = |n: usize, o: usize, ext_off: usize, flow_sign: f64| -> DMatrix<f64> {
        let mut l = DMatrix::zeros(2 * n, nz);
        for (k, r) in ext_rows(n, o).into_iter().enumerate() {
            l[(r, ext_off + k)] = 1.0;
            l[(n + r, ne + ext_off + k)] = 1.0;
        }
        for i in 0..w {
            l[(o + i, 2 * ne + i)] = flow_sign;
            l[(n + o + i, 2 * ne + w + i)] = 1.0;
        }
        l
    };
    let la = build(na, oa, 0, -1.0);
    let lb = build(nb, ob, ea, 1.0);
    let pairing = |n: usize| {
        let mut p = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            p[(i, n + i)] = 1.0;
            p[(n + i, i)] = 1.0;
        }
        p
    };
    let ca = a.basis().transpose() * pairing(na) * la;
    let cb = b.basis().transpose() * pairing(nb) * lb;
    let mut cons = DMatrix::zeros(ca.nrows() + cb.nrows(), nz);
    cons.rows_mut(0, ca.nrows()).copy_from(&ca);
    cons.rows_mut(ca.nrows(), cb.nrows()).copy_from(&cb);
    let k = svd_null(&cons, 1e-10);
    let proj = k.rows(0, 2 * ne).into_owned();
    svd_span(&proj, 1e-10)
}

pub fn layout_names(d: &DiracSubspace) -> Vec<String> {
    d.layout().blocks().iter().map(|(n, _)| n.clone()).collect()
}

pub fn same_layout(a: &PortLayout, b: &PortLayout) -> bool {
    a == b
}
