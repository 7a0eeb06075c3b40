//! Explicit stochastic port-Hamiltonian systems in local coordinates.
//!
//! A system is
//!
//! ```text
//! dX = sum_k (J_k(X) - R_k(X)) dH(X) o dZ_{s_k} + sum_i g_i(X) u_i o dZ^C_i + sum_i xi_i(X) o dZ^N_i
//! y  = g(X)^T dH(X)
//! ```
//!
//! with Stratonovich differentials `o d`. A plain system has a single storage
//! term; power-preserving interconnections add coupling terms driven by the
//! shared control driver (see [`interconnect_feedback`]).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::drivers::DriverSpec;
use crate::error::{Result, SphsError};
use crate::fields::{MatrixField, ScalarField};

/// One `(J - R) dH` term and the driver component integrating it.
#[derive(Debug, Clone)]
pub struct StorageTerm {
    pub structure_j: MatrixField,
    pub structure_r: MatrixField,
    pub driver: usize,
}

/// An explicit SPHS: structure fields, Hamiltonian and driver bindings.
#[derive(Debug, Clone)]
pub struct SphsDefinition {
    name: String,
    dim: usize,
    storage: Vec<StorageTerm>,
    input_map: MatrixField,
    control_drivers: Vec<usize>,
    noise_map: MatrixField,
    noise_drivers: Vec<usize>,
    hamiltonian: ScalarField,
    dissipative: bool,
}

/// Builder for [`SphsDefinition`].
pub struct SphsBuilder {
    name: String,
    dim: usize,
    storage: Vec<StorageTerm>,
    input_map: Option<(MatrixField, Vec<usize>)>,
    noise_map: Option<(MatrixField, Vec<usize>)>,
    hamiltonian: Option<ScalarField>,
    dissipative: bool,
}

impl SphsBuilder {
    /// Adds a storage term `(J - R) dH o dZ_driver`.
    pub fn storage(mut self, structure_j: MatrixField, structure_r: MatrixField, driver: usize) -> Self {
        self.storage.push(StorageTerm {
            structure_j,
            structure_r,
            driver,
        });
        self
    }

    /// Control port map `g` (n x m_C) with one driver index per column.
    pub fn input_map(mut self, g: MatrixField, drivers: Vec<usize>) -> Self {
        self.input_map = Some((g, drivers));
        self
    }

    /// Noise port map `xi` (n x m_N) with one driver index per column.
    pub fn noise_map(mut self, xi: MatrixField, drivers: Vec<usize>) -> Self {
        self.noise_map = Some((xi, drivers));
        self
    }

    pub fn hamiltonian(mut self, h: ScalarField) -> Self {
        self.hamiltonian = Some(h);
        self
    }

    /// Declares `R(x)` symmetric positive semidefinite (checked by [`validate`]).
    pub fn dissipative(mut self, yes: bool) -> Self {
        self.dissipative = yes;
        self
    }

    pub fn build(self) -> Result<SphsDefinition> {
        let n = self.dim;
        if n == 0 {
            return Err(SphsError::param("dim", "state dimension must be positive"));
        }
        let hamiltonian = self
            .hamiltonian
            .ok_or_else(|| SphsError::param("hamiltonian", "missing"))?;
        for (k, t) in self.storage.iter().enumerate() {
            check_shape(&t.structure_j, (n, n), &format!("structure_j[{k}]"))?;
            check_shape(&t.structure_r, (n, n), &format!("structure_r[{k}]"))?;
        }
        let (input_map, control_drivers) = self.input_map.unwrap_or((MatrixField::zeros(n, 0), vec![]));
        let (noise_map, noise_drivers) = self.noise_map.unwrap_or((MatrixField::zeros(n, 0), vec![]));
        check_shape(&input_map, (n, control_drivers.len()), "input_map")?;
        check_shape(&noise_map, (n, noise_drivers.len()), "noise_map")?;
        Ok(SphsDefinition {
            name: self.name,
            dim: n,
            storage: self.storage,
            input_map,
            control_drivers,
            noise_map,
            noise_drivers,
            hamiltonian,
            dissipative: self.dissipative,
        })
    }
}

fn check_shape(m: &MatrixField, expected: (usize, usize), what: &str) -> Result<()> {
    let (r, c) = m.shape();
    if r != expected.0 {
        return Err(SphsError::dim(format!("{what} rows"), expected.0, r));
    }
    if c != expected.1 {
        return Err(SphsError::dim(format!("{what} columns"), expected.1, c));
    }
    Ok(())
}

impl SphsDefinition {
    pub fn builder(name: &str, dim: usize) -> SphsBuilder {
        SphsBuilder {
            name: name.to_string(),
            dim,
            storage: Vec::new(),
            input_map: None,
            noise_map: None,
            hamiltonian: None,
            dissipative: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m_control(&self) -> usize {
        self.control_drivers.len()
    }

    pub fn m_noise(&self) -> usize {
        self.noise_drivers.len()
    }

    pub fn storage_terms(&self) -> &[StorageTerm] {
        &self.storage
    }

    pub fn input_map(&self) -> &MatrixField {
        &self.input_map
    }

    pub fn noise_map(&self) -> &MatrixField {
        &self.noise_map
    }

    pub fn control_drivers(&self) -> &[usize] {
        &self.control_drivers
    }

    pub fn noise_drivers(&self) -> &[usize] {
        &self.noise_drivers
    }

    pub fn hamiltonian(&self) -> &ScalarField {
        &self.hamiltonian
    }

    pub fn is_dissipative(&self) -> bool {
        self.dissipative
    }

    /// Total interconnection matrix `J(x) = sum_k J_k(x)`.
    pub fn structure_j(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.storage.iter().fold(DMatrix::zeros(self.dim, self.dim), |acc, t| {
            acc + t.structure_j.eval(x).as_ref()
        })
    }

    /// Total dissipation matrix `R(x) = sum_k R_k(x)`.
    pub fn structure_r(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.storage.iter().fold(DMatrix::zeros(self.dim, self.dim), |acc, t| {
            acc + t.structure_r.eval(x).as_ref()
        })
    }

    /// True when every structure map is constant and `H` is a known quadratic form.
    pub fn is_linear_quadratic(&self) -> bool {
        self.storage
            .iter()
            .all(|t| t.structure_j.is_constant() && t.structure_r.is_constant())
            && self.input_map.is_constant()
            && self.noise_map.is_constant()
            && self.hamiltonian.quadratic_form().is_some()
    }

    /// Same system with every driver index `d` replaced by `map[d]`.
    pub fn with_driver_map(&self, map: &[usize]) -> Result<SphsDefinition> {
        let lookup = |d: usize| {
            map.get(d).copied().ok_or_else(|| {
                SphsError::Binding(format!(
                    "driver component {d} has no image in a map of length {}",
                    map.len()
                ))
            })
        };
        let mut out = self.clone();
        for t in &mut out.storage {
            t.driver = lookup(t.driver)?;
        }
        out.control_drivers = self.control_drivers.iter().map(|&d| lookup(d)).collect::<Result<_>>()?;
        out.noise_drivers = self.noise_drivers.iter().map(|&d| lookup(d)).collect::<Result<_>>()?;
        Ok(out)
    }

    /// Checks that every bound driver index exists in `driver`.
    /// Whether any driver component bound to a nonzero field carries Wiener loadings.
    pub fn is_stochastic_under(&self, driver: &DriverSpec) -> bool {
        let stochastic = |i: usize| i < driver.n_components() && !driver.is_deterministic(i);
        self.storage
            .iter()
            .any(|t| !(t.structure_j.is_zero() && t.structure_r.is_zero()) && stochastic(t.driver))
            || (!self.input_map.is_zero() && self.control_drivers.iter().any(|&i| stochastic(i)))
            || (!self.noise_map.is_zero() && self.noise_drivers.iter().any(|&i| stochastic(i)))
    }

    pub fn check_binding(&self, driver: &DriverSpec) -> Result<()> {
        let n = driver.n_components();
        let all = self
            .storage
            .iter()
            .map(|t| ("storage", t.driver))
            .chain(self.control_drivers.iter().map(|&d| ("control", d)))
            .chain(self.noise_drivers.iter().map(|&d| ("noise", d)));
        for (port, d) in all {
            if d >= n {
                return Err(SphsError::Binding(format!(
                    "{port} port bound to driver component {d}, but the driver has {n} components"
                )));
            }
        }
        Ok(())
    }

    /// Gradient of `H` at `x`, rejecting non-finite values.
    pub fn grad_h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.hamiltonian.gradient(x);
        if g.len() != self.dim {
            return Err(SphsError::dim("hamiltonian gradient", self.dim, g.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SphsError::non_finite("hamiltonian gradient", x));
        }
        Ok(g)
    }

    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        self.hamiltonian.value(x)
    }

    /// Port output `y = g(x)^T dH(x)`.
    pub fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(x, self.dim)?;
        let grad = self.grad_h(x)?;
        let g = self.input_map.eval_checked(x, "input_map")?;
        Ok(g.tr_mul(&grad))
    }

    /// Evaluates the port vector fields at `x`.
    pub fn eval_fields(&self, x: &DVector<f64>) -> Result<VectorFieldSet> {
        check_state(x, self.dim)?;
        let h = self.hamiltonian.value(x);
        if !h.is_finite() {
            return Err(SphsError::non_finite("hamiltonian", x));
        }
        let grad = self.grad_h(x)?;
        let mut storage = Vec::with_capacity(self.storage.len());
        for (k, t) in self.storage.iter().enumerate() {
            let conservative = t.structure_j.eval_checked(x, &format!("structure_j[{k}]"))?.as_ref() * &grad;
            let resistive = -(t.structure_r.eval_checked(x, &format!("structure_r[{k}]"))?.as_ref() * &grad);
            storage.push(StorageFieldEval {
                conservative,
                resistive,
                driver: t.driver,
            });
        }
        let g = self.input_map.eval_checked(x, "input_map")?;
        let xi = self.noise_map.eval_checked(x, "noise_map")?;
        let set = VectorFieldSet {
            grad_h: grad,
            storage,
            control: g.column_iter().map(|c| c.into_owned()).collect(),
            noise: xi.column_iter().map(|c| c.into_owned()).collect(),
        };
        if !set.is_finite() {
            return Err(SphsError::non_finite("port vector field", x));
        }
        Ok(set)
    }
}

pub(crate) fn check_state(x: &DVector<f64>, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(SphsError::dim("state", dim, x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SphsError::non_finite("state", x));
    }
    Ok(())
}

/// Storage field of one term, split into its conservative and resistive parts.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageFieldEval {
    /// `J_k(x) dH(x)`
    pub conservative: DVector<f64>,
    /// `-R_k(x) dH(x)`
    pub resistive: DVector<f64>,
    pub driver: usize,
}

impl StorageFieldEval {
    pub fn field(&self) -> DVector<f64> {
        &self.conservative + &self.resistive
    }
}

/// Port vector fields evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldSet {
    pub grad_h: DVector<f64>,
    pub storage: Vec<StorageFieldEval>,
    /// Columns of `g(x)`; the integrator scales them by `u_i`.
    pub control: Vec<DVector<f64>>,
    /// Columns of `xi(x)`.
    pub noise: Vec<DVector<f64>>,
}

impl VectorFieldSet {
    /// `V^S(x) = sum_k (J_k - R_k) dH`.
    pub fn storage_field(&self) -> DVector<f64> {
        let n = self.grad_h.len();
        self.storage.iter().fold(DVector::zeros(n), |acc, s| acc + s.field())
    }

    fn is_finite(&self) -> bool {
        let fin = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        self.storage.iter().all(|s| fin(&s.conservative) && fin(&s.resistive))
            && self.control.iter().all(fin)
            && self.noise.iter().all(fin)
    }
}

pub type ControlFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Control input `u(t, x)`.
#[derive(Clone, Default)]
pub enum ControlLaw {
    #[default]
    Zero,
    Constant(DVector<f64>),
    /// `u = -K y` with `y = g^T dH`.
    OutputFeedback(DMatrix<f64>),
    Custom(ControlFn),
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Zero => write!(f, "Zero"),
            ControlLaw::Constant(u) => write!(f, "Constant({:?})", u.as_slice()),
            ControlLaw::OutputFeedback(k) => write!(f, "OutputFeedback({k:?})"),
            ControlLaw::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ControlLaw {
    pub fn evaluate(&self, def: &SphsDefinition, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = def.m_control();
        let u = match self {
            ControlLaw::Zero => DVector::zeros(m),
            ControlLaw::Constant(u) => u.clone(),
            ControlLaw::OutputFeedback(k) => {
                if k.shape() != (m, m) {
                    return Err(SphsError::dim("feedback gain", m, k.nrows()));
                }
                -(k * def.output(x)?)
            }
            ControlLaw::Custom(f) => f(t, x),
        };
        if u.len() != m {
            return Err(SphsError::dim("control value", m, u.len()));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(SphsError::non_finite("control value", x));
        }
        Ok(u)
    }
}

/// Result of [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `max |J + J^T|` over probes and over each storage term and their sum.
    pub skew_residual: f64,
    /// `max |R - R^T|` over probes.
    pub symmetry_residual: f64,
    /// Smallest eigenvalue of the symmetric part of `R` over probes.
    pub min_r_eigenvalue: f64,
    /// `max |dH^T J dH|` over probes.
    pub power_residual: f64,
    pub dissipative_declared: bool,
    pub passed: bool,
}

/// Probes the structure maps and checks skew-symmetry of `J`, symmetry of `R`
/// and (for dissipative systems) `R >= 0`.
pub fn validate(def: &SphsDefinition, probe_points: &[DVector<f64>], tol: f64) -> Result<ValidationReport> {
    if probe_points.is_empty() {
        return Err(SphsError::Precondition(
            "validate needs at least one probe point".into(),
        ));
    }
    let n = def.dim;
    let mut skew: f64 = 0.0;
    let mut sym: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut power: f64 = 0.0;
    for x in probe_points {
        if x.len() != n {
            return Err(SphsError::dim("probe point", n, x.len()));
        }
        let mut jt = DMatrix::zeros(n, n);
        let mut rt = DMatrix::zeros(n, n);
        for (k, t) in def.storage.iter().enumerate() {
            let j = t.structure_j.eval_checked(x, &format!("structure_j[{k}]"))?;
            let r = t.structure_r.eval_checked(x, &format!("structure_r[{k}]"))?;
            skew = skew.max((j.as_ref() + j.transpose()).amax());
            jt += j.as_ref();
            rt += r.as_ref();
        }
        def.input_map.eval_checked(x, "input_map")?;
        def.noise_map.eval_checked(x, "noise_map")?;
        skew = skew.max((&jt + jt.transpose()).amax());
        sym = sym.max((&rt - rt.transpose()).amax());
        let rs = (&rt + rt.transpose()) * 0.5;
        let eig = SymmetricEigen::new(rs).eigenvalues.min();
        min_eig = min_eig.min(eig);
        let grad = def.hamiltonian.gradient(x);
        if grad.iter().all(|v| v.is_finite()) {
            power = power.max(grad.dot(&(&jt * &grad)).abs());
        }
    }
    let mut passed = skew <= tol && sym <= tol;
    if def.dissipative {
        passed &= min_eig >= -tol;
    }
    Ok(ValidationReport {
        skew_residual: skew,
        symmetry_residual: sym,
        min_r_eigenvalue: min_eig,
        power_residual: power,
        dissipative_declared: def.dissipative,
        passed,
    })
}

/// Power-preserving feedback interconnection `u_a = -y_b`, `u_b = y_a`.
///
/// The composite lives on `(x_a, x_b)` with Hamiltonian `H_a + H_b`; its total
/// interconnection matrix is `[[J_a, -g_a g_b^T], [g_b g_a^T, J_b]]`. Coupling
/// terms are integrated against the control drivers, which both systems must
/// share channel by channel. Both definitions index the same driver vector.
/// The composite has no external control port.
pub fn interconnect_feedback(def_a: &SphsDefinition, def_b: &SphsDefinition) -> Result<SphsDefinition> {
    let m = def_a.m_control();
    if def_b.m_control() != m {
        return Err(SphsError::dim(
            "control port width of second system",
            m,
            def_b.m_control(),
        ));
    }
    if def_a.control_drivers != def_b.control_drivers {
        return Err(SphsError::Binding(format!(
            "control drivers differ ({:?} vs {:?}); coupled ports must share a control driver",
            def_a.control_drivers, def_b.control_drivers
        )));
    }
    let (na, nb) = (def_a.dim, def_b.dim);
    let n = na + nb;
    let mut storage = Vec::new();
    for t in &def_a.storage {
        storage.push(StorageTerm {
            structure_j: t.structure_j.embedded(0, na, n, n, 0, 0),
            structure_r: t.structure_r.embedded(0, na, n, n, 0, 0),
            driver: t.driver,
        });
    }
    for t in &def_b.storage {
        storage.push(StorageTerm {
            structure_j: t.structure_j.embedded(na, nb, n, n, na, na),
            structure_r: t.structure_r.embedded(na, nb, n, n, na, na),
            driver: t.driver,
        });
    }
    // one skew coupling term per distinct control driver
    let mut drivers: Vec<usize> = def_a.control_drivers.clone();
    drivers.sort_unstable();
    drivers.dedup();
    for d in drivers {
        let cols: Vec<usize> = (0..m).filter(|&i| def_a.control_drivers[i] == d).collect();
        let ga = def_a.input_map.clone();
        let gb = def_b.input_map.clone();
        let coupling = move |x: &DVector<f64>| {
            let xa = x.rows(0, na).into_owned();
            let xb = x.rows(na, nb).into_owned();
            let ga = ga.eval(&xa).select_columns(cols.iter());
            let gb = gb.eval(&xb).select_columns(cols.iter());
            let ab = &ga * gb.transpose();
            let mut c = DMatrix::zeros(n, n);
            c.view_mut((0, na), (na, nb)).copy_from(&(-&ab));
            c.view_mut((na, 0), (nb, na)).copy_from(&ab.transpose());
            c
        };
        let structure_j = if def_a.input_map.is_constant() && def_b.input_map.is_constant() {
            MatrixField::constant(coupling(&DVector::zeros(n)))
        } else {
            MatrixField::function(n, n, coupling)
        };
        storage.push(StorageTerm {
            structure_j,
            structure_r: MatrixField::zeros(n, n),
            driver: d,
        });
    }
    let (mna, mnb) = (def_a.m_noise(), def_b.m_noise());
    let xia = def_a.noise_map.embedded(0, na, n, mna + mnb, 0, 0);
    let xib = def_b.noise_map.embedded(na, nb, n, mna + mnb, na, mna);
    let noise_map = match (&xia, &xib) {
        (MatrixField::Constant(a), MatrixField::Constant(b)) => MatrixField::constant(a + b),
        _ => MatrixField::function(n, mna + mnb, move |x| xia.eval(x).as_ref() + xib.eval(x).as_ref()),
    };
    let mut noise_drivers = def_a.noise_drivers.clone();
    noise_drivers.extend_from_slice(&def_b.noise_drivers);

    Ok(SphsDefinition {
        name: format!("{}+{}", def_a.name, def_b.name),
        dim: n,
        storage,
        input_map: MatrixField::zeros(n, 0),
        control_drivers: vec![],
        noise_map,
        noise_drivers,
        hamiltonian: ScalarField::block_sum(&def_a.hamiltonian, na, &def_b.hamiltonian, nb),
        dissipative: def_a.dissipative && def_b.dissipative,
    })
}
