//! Driving semimartingales.
//!
//! Every driver component is an affine combination of time and a shared set of
//! independent Wiener processes,
//!
//! ```text
//! Z^i_t = a_i t + sum_k b_ik W^k_t
//! ```
//!
//! so the quadratic covariations are constant rates: `d<Z^i, Z^j>_t = (B B^T)_ij dt`.
//! Increments are drawn per step from a counter-based stream keyed by
//! `(master seed, path index)`, which makes ensembles independent of the order
//! in which paths are executed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SphsError};

/// A splittable random stream.
///
/// Streams with the same `(seed, index)` produce identical sequences; distinct
/// indices select disjoint ChaCha streams.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Fills `out` with independent standard normals.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.standard_normal();
        }
    }
}

/// Affine time + Wiener driver vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSpec {
    names: Vec<String>,
    drift: Vec<f64>,
    /// `n_components x n_wieners` loading matrix `B`.
    loadings: DMatrix<f64>,
}

impl DriverSpec {
    /// Builds a driver from per-component drift coefficients and loading rows.
    pub fn new(names: Vec<String>, drift: Vec<f64>, loadings: DMatrix<f64>) -> Result<Self> {
        let n = names.len();
        if drift.len() != n {
            return Err(SphsError::dim("driver drift coefficients", n, drift.len()));
        }
        if loadings.nrows() != n {
            return Err(SphsError::dim("driver loading rows", n, loadings.nrows()));
        }
        if drift.iter().chain(loadings.iter()).any(|v| !v.is_finite()) {
            return Err(SphsError::param("driver", "coefficients must be finite"));
        }
        Ok(Self { names, drift, loadings })
    }

    /// An empty driver over `n_wieners` Wiener processes; add components with [`Self::with_component`].
    pub fn empty(n_wieners: usize) -> Self {
        Self {
            names: Vec::new(),
            drift: Vec::new(),
            loadings: DMatrix::zeros(0, n_wieners),
        }
    }

    /// Appends a component `drift * t + loadings . W`.
    pub fn with_component(mut self, name: &str, drift: f64, loadings: &[f64]) -> Result<Self> {
        let nw = self.n_wieners();
        if loadings.len() != nw {
            return Err(SphsError::dim(format!("loadings of `{name}`"), nw, loadings.len()));
        }
        let n = self.names.len();
        let mut b = self.loadings.resize_vertically(n + 1, 0.0);
        for (k, &l) in loadings.iter().enumerate() {
            b[(n, k)] = l;
        }
        self.loadings = b;
        self.names.push(name.to_string());
        self.drift.push(drift);
        Self::new(self.names, self.drift, self.loadings)
    }

    pub fn n_components(&self) -> usize {
        self.names.len()
    }

    pub fn n_wieners(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn is_deterministic(&self, component: usize) -> bool {
        self.loadings.row(component).iter().all(|&b| b == 0.0)
    }

    /// True when no component loads on any Wiener process.
    pub fn is_fully_deterministic(&self) -> bool {
        self.loadings.iter().all(|&b| b == 0.0)
    }

    /// Per-unit-time covariation rates `C = B B^T`.
    pub fn covariation_rates(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose()
    }

    /// Joint driver of `self` and `other` over independent Wiener processes.
    ///
    /// Each `(j, i)` in `identify` makes component `j` of `other` an alias of
    /// component `i` of `self`. Returns the merged driver and the index map
    /// taking `other`'s components into it.
    pub fn merge(
        &self,
        other: &DriverSpec,
        identify: &[(usize, usize)],
        prefixes: (&str, &str),
    ) -> Result<(DriverSpec, Vec<usize>)> {
        let (na, nwa, nwb) = (self.n_components(), self.n_wieners(), other.n_wieners());
        let mut merged = DriverSpec::empty(nwa + nwb);
        for i in 0..na {
            let mut row = vec![0.0; nwa + nwb];
            for (k, &b) in self.loadings.row(i).iter().enumerate() {
                row[k] = b;
            }
            merged = merged.with_component(&format!("{}{}", prefixes.0, self.names[i]), self.drift[i], &row)?;
        }
        let mut map = Vec::with_capacity(other.n_components());
        for j in 0..other.n_components() {
            if let Some(&(_, i)) = identify.iter().find(|(jj, _)| *jj == j) {
                if i >= na {
                    return Err(SphsError::Binding(format!(
                        "cannot identify with missing driver component {i}"
                    )));
                }
                map.push(i);
                continue;
            }
            let mut row = vec![0.0; nwa + nwb];
            for (k, &b) in other.loadings.row(j).iter().enumerate() {
                row[nwa + k] = b;
            }
            map.push(merged.n_components());
            merged = merged.with_component(&format!("{}{}", prefixes.1, other.names[j]), other.drift[j], &row)?;
        }
        Ok((merged, map))
    }

    /// Same driver with every Wiener loading set to zero.
    pub fn deterministic_limit(&self) -> Self {
        Self {
            names: self.names.clone(),
            drift: self.drift.clone(),
            loadings: DMatrix::zeros(self.n_components(), self.n_wieners()),
        }
    }

    /// Maps one row of Wiener increments to driver increments.
    pub fn increments_from_wiener(&self, dw: &[f64], dt: f64, out: &mut DVector<f64>) {
        for i in 0..self.n_components() {
            let mut z = self.drift[i] * dt;
            for (k, w) in dw.iter().enumerate() {
                let b = self.loadings[(i, k)];
                if b != 0.0 {
                    z += b * w;
                }
            }
            out[i] = z;
        }
    }

    /// Samples an `n_steps x n_wieners` table of Wiener increments.
    pub fn sample_wiener(&self, dt: f64, n_steps: usize, stream: &mut RandomStream) -> Result<WienerPath> {
        WienerPath::sample(self.n_wieners(), dt, n_steps, stream)
    }

    /// Samples an `n_steps x n_components` table of driver increments.
    pub fn sample_increments(&self, dt: f64, n_steps: usize, stream: &mut RandomStream) -> Result<DMatrix<f64>> {
        let w = self.sample_wiener(dt, n_steps, stream)?;
        Ok(self.increments_for(&w))
    }

    /// Driver increments realised along a given Wiener path.
    pub fn increments_for(&self, path: &WienerPath) -> DMatrix<f64> {
        let mut table = DMatrix::zeros(path.n_steps(), self.n_components());
        let mut row = DVector::zeros(self.n_components());
        for k in 0..path.n_steps() {
            self.increments_from_wiener(path.row(k), path.dt(), &mut row);
            table.set_row(k, &row.transpose());
        }
        table
    }
}

/// A pre-sampled table of Wiener increments on a uniform grid.
///
/// Used to couple simulations at different resolutions or under different
/// schemes to the same Brownian path.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    dt: f64,
    n_wieners: usize,
    // row-major, n_steps * n_wieners
    data: Vec<f64>,
}

impl WienerPath {
    pub fn sample(n_wieners: usize, dt: f64, n_steps: usize, stream: &mut RandomStream) -> Result<Self> {
        check_dt(dt)?;
        let sd = dt.sqrt();
        let mut data = vec![0.0; n_steps * n_wieners];
        for v in data.iter_mut() {
            *v = sd * stream.standard_normal();
        }
        Ok(Self { dt, n_wieners, data })
    }

    pub fn from_rows(dt: f64, n_wieners: usize, data: Vec<f64>) -> Result<Self> {
        check_dt(dt)?;
        if n_wieners > 0 && !data.len().is_multiple_of(n_wieners) {
            return Err(SphsError::dim("wiener table length", n_wieners, data.len() % n_wieners));
        }
        Ok(Self { dt, n_wieners, data })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_wieners(&self) -> usize {
        self.n_wieners
    }

    pub fn n_steps(&self) -> usize {
        self.data.len().checked_div(self.n_wieners).unwrap_or(0)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_wieners..(k + 1) * self.n_wieners]
    }

    /// Sums consecutive blocks of `factor` increments into a path with step `factor * dt`.
    /// The antithetic path `-W`.
    pub fn negated(&self) -> Self {
        Self {
            dt: self.dt,
            n_wieners: self.n_wieners,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps().is_multiple_of(factor) {
            return Err(SphsError::param(
                "factor",
                format!("must divide the step count {}", self.n_steps()),
            ));
        }
        let nw = self.n_wieners;
        let coarse_steps = self.n_steps() / factor;
        let mut data = vec![0.0; coarse_steps * nw];
        for k in 0..coarse_steps {
            for j in 0..factor {
                let src = self.row(k * factor + j);
                for (d, s) in data[k * nw..(k + 1) * nw].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(Self {
            dt: self.dt * factor as f64,
            n_wieners: nw,
            data,
        })
    }

    /// Cumulative Wiener values `W_{t_k}` at every grid point (first row is zero).
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.n_wieners];
        let mut out = Vec::with_capacity(self.n_steps() + 1);
        out.push(acc.clone());
        for k in 0..self.n_steps() {
            for (a, d) in acc.iter_mut().zip(self.row(k)) {
                *a += d;
            }
            out.push(acc.clone());
        }
        out
    }
}

pub(crate) fn check_dt(dt: f64) -> Result<()> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(SphsError::param("dt", format!("must be finite and positive, got {dt}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stats(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn covariation_of_deterministic_component_is_zero() {
        let d = DriverSpec::empty(1).with_component("z", 1.0, &[0.0]).unwrap();
        assert_eq!(d.covariation_rates()[(0, 0)], 0.0);
    }

    #[test]
    fn covariation_of_scaled_wiener() {
        let sigma = 0.7;
        let d = DriverSpec::empty(1).with_component("z", 1.0, &[sigma]).unwrap();
        assert!((d.covariation_rates()[(0, 0)] - sigma * sigma).abs() < 1e-15);
    }

    #[test]
    fn disjoint_loadings_have_null_cross_covariation() {
        let d = DriverSpec::empty(2)
            .with_component("z", 1.0, &[1.0, 0.0])
            .unwrap()
            .with_component("zn", 0.0, &[0.0, 1.0])
            .unwrap();
        let c = d.covariation_rates();
        assert_eq!(c[(0, 1)], 0.0);
        assert_eq!(c[(1, 0)], 0.0);
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 1)], 1.0);
    }

    #[test]
    fn deterministic_increments_are_exact() {
        let d = DriverSpec::empty(1).with_component("t", 2.5, &[0.0]).unwrap();
        let mut s = RandomStream::new(3, 0);
        let inc = d.sample_increments(0.01, 50, &mut s).unwrap();
        assert!(inc.iter().all(|&z| z == 2.5 * 0.01));
    }

    #[test]
    fn wiener_increment_variance() {
        // chi-square concentration: var estimate has relative sd sqrt(2/(n-1)) ~ 0.0045
        let d = DriverSpec::empty(1).with_component("w", 0.0, &[1.0]).unwrap();
        let mut s = RandomStream::new(11, 0);
        let inc = d.sample_increments(0.01, 100_000, &mut s).unwrap();
        let (_, var) = sample_stats(inc.column(0).as_slice());
        assert!((var / 0.01 - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn shared_wiener_covariance() {
        let d = DriverSpec::empty(1)
            .with_component("a", 0.0, &[1.0])
            .unwrap()
            .with_component("b", 0.0, &[2.0])
            .unwrap();
        let dt = 0.01;
        let n = 100_000;
        let mut s = RandomStream::new(5, 2);
        let inc = d.sample_increments(dt, n, &mut s).unwrap();
        let a = inc.column(0);
        let b = inc.column(1);
        let ma = a.mean();
        let mb = b.mean();
        let cov = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n as f64 - 1.0);
        assert!((cov / (2.0 * dt) - 1.0).abs() < 0.05, "cov = {cov}");
    }

    #[test]
    fn empirical_covariance_within_three_standard_errors() {
        let d = DriverSpec::empty(2)
            .with_component("a", 1.0, &[1.0, 0.5])
            .unwrap()
            .with_component("b", -0.5, &[0.3, -1.2])
            .unwrap();
        let dt = 0.02;
        let n = 50_000;
        let mut s = RandomStream::new(99, 7);
        let inc = d.sample_increments(dt, n, &mut s).unwrap();
        let c = d.covariation_rates() * dt;
        for i in 0..2 {
            for j in 0..2 {
                let xi = inc.column(i);
                let xj = inc.column(j);
                let mi = xi.mean();
                let mj = xj.mean();
                let prods: Vec<f64> = xi.iter().zip(xj.iter()).map(|(a, b)| (a - mi) * (b - mj)).collect();
                let (m, v) = sample_stats(&prods);
                let se = (v / n as f64).sqrt();
                assert!((m - c[(i, j)]).abs() < 3.0 * se, "({i},{j}): {m} vs {}", c[(i, j)]);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_table() {
        let d = DriverSpec::empty(2).with_component("a", 1.0, &[1.0, 2.0]).unwrap();
        let a = d.sample_increments(0.1, 100, &mut RandomStream::new(42, 3)).unwrap();
        let b = d.sample_increments(0.1, 100, &mut RandomStream::new(42, 3)).unwrap();
        let c = d.sample_increments(0.1, 100, &mut RandomStream::new(42, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn non_finite_dt_rejected() {
        let d = DriverSpec::empty(1).with_component("w", 0.0, &[1.0]).unwrap();
        let mut s = RandomStream::new(1, 0);
        assert!(d.sample_increments(f64::NAN, 10, &mut s).is_err());
        assert!(d.sample_increments(0.0, 10, &mut s).is_err());
    }

    #[test]
    fn coarsening_sums_blocks() {
        let p = WienerPath::from_rows(0.5, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = p.coarsen(2).unwrap();
        assert_eq!(c.n_steps(), 2);
        assert_eq!(c.row(0), &[3.0]);
        assert_eq!(c.row(1), &[7.0]);
        assert_eq!(c.dt(), 1.0);
        assert!(p.coarsen(3).is_err());
    }

    #[test]
    fn merge_identifies_and_separates() {
        let a = DriverSpec::empty(1)
            .with_component("z", 1.0, &[1.0])
            .unwrap()
            .with_component("c", 1.0, &[0.0])
            .unwrap();
        let b = a.clone();
        let (m, map) = a.merge(&b, &[(1, 1)], ("a.", "b.")).unwrap();
        assert_eq!(map, vec![2, 1]);
        assert_eq!(m.n_wieners(), 2);
        assert_eq!(m.names(), &["a.z", "a.c", "b.z"]);
        let c = m.covariation_rates();
        assert_eq!(c[(0, 2)], 0.0);
        assert_eq!(c[(2, 2)], 1.0);
        assert!(a.merge(&b, &[(0, 5)], ("", "")).is_err());
    }
}
