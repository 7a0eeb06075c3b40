//! Stratonovich-to-Itô drift correction and the infinitesimal generator.
//!
//! With driver components `Z^d = a_d t + sum_k B_dk W^k` and port fields `v_f`
//! bound to components `d(f)`, the Itô drift is
//!
//! ```text
//! mu(x) = sum_f a_{d(f)} v_f(x) + 1/2 sum_{f,g} (Dv_f)(x) v_g(x) C_{d(f) d(g)},   C = B B^T
//! ```
//!
//! The double sum is evaluated per Wiener process: with `s_k = sum_f B_{d(f)k} v_f`
//! it equals `sum_k (D s_k) s_k`. Control fields are `g_i(x) u_i` with `u` frozen
//! over the step.

use nalgebra::{DMatrix, DVector};

use crate::drivers::DriverSpec;
use crate::error::{Result, SphsError};
use crate::fields::{fd_step_first, ScalarField};
use crate::system::{check_state, SphsDefinition, VectorFieldSet};

/// How Jacobian-vector products are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    /// Analytic where the structure allows it (constant maps, analytic Hessian), else finite differences.
    #[default]
    Auto,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionConfig {
    pub jacobian_mode: JacobianMode,
    /// Relative step for central differences along a direction.
    pub fd_step_scale: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            jacobian_mode: JacobianMode::Auto,
            fd_step_scale: fd_step_first(),
        }
    }
}

impl CorrectionConfig {
    pub fn finite_difference() -> Self {
        Self {
            jacobian_mode: JacobianMode::FiniteDifference,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.fd_step_scale > 0.0 && self.fd_step_scale.is_finite()) {
            return Err(SphsError::param("fd_step_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Port a driven field belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortKind {
    /// `J_k dH` part of a storage term.
    Storage,
    /// `-R_k dH` part of a storage term.
    Resistive,
    Control,
    Noise,
}

/// One vector field together with the driver component integrating it.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivenField {
    pub kind: PortKind,
    /// Storage term or port column index.
    pub index: usize,
    pub driver: usize,
    pub value: DVector<f64>,
}

/// Flattens an evaluated field set into driven fields, scaling control columns by `u`.
pub fn driven_fields(def: &SphsDefinition, set: &VectorFieldSet, u: &DVector<f64>) -> Vec<DrivenField> {
    let mut out = Vec::with_capacity(2 * set.storage.len() + set.control.len() + set.noise.len());
    for (k, s) in set.storage.iter().enumerate() {
        out.push(DrivenField {
            kind: PortKind::Storage,
            index: k,
            driver: s.driver,
            value: s.conservative.clone(),
        });
        out.push(DrivenField {
            kind: PortKind::Resistive,
            index: k,
            driver: s.driver,
            value: s.resistive.clone(),
        });
    }
    for (i, c) in set.control.iter().enumerate() {
        out.push(DrivenField {
            kind: PortKind::Control,
            index: i,
            driver: def.control_drivers()[i],
            value: c * u[i],
        });
    }
    for (i, c) in set.noise.iter().enumerate() {
        out.push(DrivenField {
            kind: PortKind::Noise,
            index: i,
            driver: def.noise_drivers()[i],
            value: c.clone(),
        });
    }
    out
}

/// Central difference of `field` along `direction` at `x`.
///
/// The step is `scale * (1 + |x|) / |direction|`; a zero direction yields zero.
pub fn fd_directional<F>(field: F, x: &DVector<f64>, direction: &DVector<f64>, scale: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let norm = direction.norm();
    if norm == 0.0 {
        return Ok(DVector::zeros(x.len()));
    }
    let h = scale * (1.0 + x.norm()) / norm;
    let xp = x + direction * h;
    let xm = x - direction * h;
    let d = (field(&xp)? - field(&xm)?) / (2.0 * h);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(SphsError::non_finite("directional derivative", x));
    }
    Ok(d)
}

/// `(D field_i)(x) . field_j(x)` by central differences along `field_j(x)`.
pub fn directional_jacobian<F, G>(field_i: F, field_j: G, x: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let w = field_j(x);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(SphsError::non_finite("direction field", x));
    }
    fd_directional(|y| Ok(field_i(y)), x, &w, fd_step_first())
}

/// Analytic Jacobian of a driven field when the structure makes one available.
/// `Ok(None)` means the caller must fall back to finite differences.
fn analytic_jacobian(
    def: &SphsDefinition,
    kind: PortKind,
    index: usize,
    x: &DVector<f64>,
    hess: &mut Option<DMatrix<f64>>,
) -> Option<Option<DMatrix<f64>>> {
    let constant_with = |m: &crate::fields::MatrixField, sign: f64, hess: &mut Option<DMatrix<f64>>| {
        if m.is_zero() {
            return Some(None);
        }
        match m {
            crate::fields::MatrixField::Constant(c) if def.hamiltonian().has_hessian() => {
                let h = hess.get_or_insert_with(|| def.hamiltonian().hessian(x));
                Some(Some(c * &*h * sign))
            }
            _ => None,
        }
    };
    match kind {
        PortKind::Storage => constant_with(&def.storage_terms()[index].structure_j, 1.0, hess),
        PortKind::Resistive => constant_with(&def.storage_terms()[index].structure_r, -1.0, hess),
        PortKind::Control => def.input_map().is_constant().then_some(None),
        PortKind::Noise => def.noise_map().is_constant().then_some(None),
    }
}

/// Per-Wiener diffusion directions `s_k(x) = sum_f B_{d(f)k} v_f(x)`.
pub fn diffusion_directions(fields: &[DrivenField], driver: &DriverSpec, dim: usize) -> Vec<DVector<f64>> {
    let b = driver.loadings();
    (0..driver.n_wieners())
        .map(|k| {
            let mut s = DVector::zeros(dim);
            for f in fields {
                let w = b[(f.driver, k)];
                if w != 0.0 {
                    s.axpy(w, &f.value, 1.0);
                }
            }
            s
        })
        .collect()
}

/// Drift part `sum_f a_{d(f)} v_f` of the Stratonovich dynamics.
pub fn stratonovich_drift_from(fields: &[DrivenField], driver: &DriverSpec, dim: usize) -> DVector<f64> {
    let a = driver.drift();
    let mut out = DVector::zeros(dim);
    for f in fields {
        let c = a[f.driver];
        if c != 0.0 {
            out.axpy(c, &f.value, 1.0);
        }
    }
    out
}

/// `1/2 sum_k (D s_k) s_k` at `x`.
pub fn ito_correction(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    fields: &[DrivenField],
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<DVector<f64>> {
    let parts = ito_correction_by_port(def, x, u, fields, driver, cfg)?;
    let mut out = DVector::zeros(def.dim());
    for (_, p) in &parts {
        out += p;
    }
    Ok(out)
}

const PORT_ORDER: [PortKind; 4] = [
    PortKind::Storage,
    PortKind::Resistive,
    PortKind::Control,
    PortKind::Noise,
];

/// The Itô correction split by the port of the differentiated field:
/// `1/2 sum_k (D s_k^P) s_k` where `s_k^P` only collects fields of port `P`.
pub fn ito_correction_by_port(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    fields: &[DrivenField],
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<Vec<(PortKind, DVector<f64>)>> {
    cfg.check()?;
    let n = def.dim();
    let b = driver.loadings();
    let directions = diffusion_directions(fields, driver, n);
    let mut out: Vec<(PortKind, DVector<f64>)> = PORT_ORDER.iter().map(|&p| (p, DVector::zeros(n))).collect();
    let slot = |p: PortKind| PORT_ORDER.iter().position(|&q| q == p).unwrap();
    let mut hess = None;
    for (k, s) in directions.iter().enumerate() {
        if s.iter().all(|&v| v == 0.0) {
            continue;
        }
        // fields whose Jacobian must be approximated numerically, with weights
        let mut numeric: Vec<Vec<(usize, f64)>> = vec![Vec::new(); PORT_ORDER.len()];
        for (fi, f) in fields.iter().enumerate() {
            let w = b[(f.driver, k)];
            if w == 0.0 {
                continue;
            }
            let analytic = match cfg.jacobian_mode {
                JacobianMode::Auto => analytic_jacobian(def, f.kind, f.index, x, &mut hess),
                JacobianMode::FiniteDifference => None,
            };
            match analytic {
                Some(Some(jac)) => out[slot(f.kind)].1.axpy(0.5 * w, &(jac * s), 1.0),
                Some(None) => {}
                None => numeric[slot(f.kind)].push((fi, w)),
            }
        }
        for (p, group) in numeric.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let combo = |y: &DVector<f64>| -> Result<DVector<f64>> {
                let set = def.eval_fields(y)?;
                let fy = driven_fields(def, &set, u);
                let mut acc = DVector::zeros(n);
                for &(fi, w) in group {
                    acc.axpy(w, &fy[fi].value, 1.0);
                }
                Ok(acc)
            };
            let d = fd_directional(combo, x, s, cfg.fd_step_scale)?;
            out[p].1.axpy(0.5, &d, 1.0);
        }
    }
    Ok(out)
}

/// Stratonovich drift `sum_f a_{d(f)} v_f(x)`.
pub fn stratonovich_drift(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    driver: &DriverSpec,
) -> Result<DVector<f64>> {
    check_state(x, def.dim())?;
    let set = def.eval_fields(x)?;
    let fields = driven_fields(def, &set, u);
    Ok(stratonovich_drift_from(&fields, driver, def.dim()))
}

/// Itô drift of the system at `x` under control value `u`.
pub fn ito_drift(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<DVector<f64>> {
    check_state(x, def.dim())?;
    def.check_binding(driver)?;
    if u.len() != def.m_control() {
        return Err(SphsError::dim("control value", def.m_control(), u.len()));
    }
    let set = def.eval_fields(x)?;
    let fields = driven_fields(def, &set, u);
    let mut drift = stratonovich_drift_from(&fields, driver, def.dim());
    if !driver.is_fully_deterministic() {
        drift += ito_correction(def, x, u, &fields, driver, cfg)?;
    }
    Ok(drift)
}

/// Generator `L phi(x) = grad phi . mu(x) + 1/2 sum_k s_k^T (Hess phi) s_k`.
pub fn generator_apply(
    def: &SphsDefinition,
    observable: &ScalarField,
    x: &DVector<f64>,
    u: &DVector<f64>,
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<f64> {
    let drift = ito_drift(def, x, u, driver, cfg)?;
    let grad = observable.gradient(x);
    if grad.len() != def.dim() {
        return Err(SphsError::dim("observable gradient", def.dim(), grad.len()));
    }
    let mut value = grad.dot(&drift);
    if !driver.is_fully_deterministic() {
        let set = def.eval_fields(x)?;
        let fields = driven_fields(def, &set, u);
        let directions = diffusion_directions(&fields, driver, def.dim());
        if directions.iter().any(|s| s.iter().any(|&v| v != 0.0)) {
            let hess = observable.hessian(x);
            for s in &directions {
                value += 0.5 * s.dot(&(&hess * s));
            }
        }
    }
    if !value.is_finite() {
        return Err(SphsError::non_finite("generator value", x));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::MatrixField;
    use approx::assert_relative_eq;

    fn rotation_system(driver_sigma: f64) -> (SphsDefinition, DriverSpec) {
        let def = SphsDefinition::builder("rot", 2)
            .storage(
                MatrixField::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
                MatrixField::zeros(2, 2),
                0,
            )
            .input_map(
                MatrixField::constant(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
                vec![1],
            )
            .hamiltonian(ScalarField::quadratic(DMatrix::identity(2, 2)))
            .build()
            .unwrap();
        let driver = DriverSpec::empty(1)
            .with_component("z", 1.0, &[driver_sigma])
            .unwrap()
            .with_component("zc", 1.0, &[0.0])
            .unwrap();
        (def, driver)
    }

    #[test]
    fn rotation_field_along_itself() {
        let v = |x: &DVector<f64>| DVector::from_vec(vec![x[1], -x[0]]);
        let d = directional_jacobian(v, v, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(d[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(d[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_field_has_zero_jacobian() {
        let c = |_: &DVector<f64>| DVector::from_vec(vec![3.0, -2.0]);
        let w = |x: &DVector<f64>| x * 5.0;
        let d = directional_jacobian(c, w, &DVector::from_vec(vec![0.3, 0.4])).unwrap();
        assert_eq!(d, DVector::zeros(2));
    }

    #[test]
    fn linear_field_gives_matrix_square() {
        // matrix-power oracle: for V = A x, (DV) V = A^2 x
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7, -0.4, 0.9, 1.1]);
        let x = DVector::from_vec(vec![0.2, -1.0, 0.6]);
        let a1 = a.clone();
        let v = move |y: &DVector<f64>| &a1 * y;
        let d = directional_jacobian(&v, &v, &x).unwrap();
        let exact = &a * &a * &x;
        for i in 0..3 {
            assert_relative_eq!(d[i], exact[i], max_relative = 1e-8);
        }
    }

    #[test]
    fn mass_spring_ito_drift() {
        let (def, driver) = rotation_system(1.0);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let u = DVector::zeros(1);
        let d = ito_drift(&def, &x, &u, &driver, &CorrectionConfig::default()).unwrap();
        assert_relative_eq!(d[0], -0.5, epsilon = 1e-14);
        assert_relative_eq!(d[1], -1.0, epsilon = 1e-14);
        let fd = ito_drift(&def, &x, &u, &driver, &CorrectionConfig::finite_difference()).unwrap();
        assert_relative_eq!(fd[0], -0.5, epsilon = 1e-8);
        assert_relative_eq!(fd[1], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn deterministic_driver_gives_stratonovich_drift_exactly() {
        let (def, driver) = rotation_system(0.0);
        let x = DVector::from_vec(vec![0.4, -0.9]);
        let u = DVector::from_vec(vec![0.7]);
        let ito = ito_drift(&def, &x, &u, &driver, &CorrectionConfig::default()).unwrap();
        let strat = stratonovich_drift(&def, &x, &u, &driver).unwrap();
        assert_eq!(ito, strat);
    }

    #[test]
    fn generator_of_energy_vanishes_for_stochastic_rotation() {
        let (def, driver) = rotation_system(1.0);
        let u = DVector::zeros(1);
        for x in [[1.0, 0.0], [0.3, -2.0], [-1.5, 0.7]] {
            let x = DVector::from_vec(x.to_vec());
            let lh = generator_apply(&def, def.hamiltonian(), &x, &u, &driver, &CorrectionConfig::default()).unwrap();
            assert!(lh.abs() < 1e-13, "LH = {lh}");
        }
    }

    #[test]
    fn generator_of_constant_is_zero() {
        let (def, driver) = rotation_system(1.0);
        let x = DVector::from_vec(vec![0.3, 0.1]);
        let lc = generator_apply(
            &def,
            &ScalarField::constant(4.0),
            &x,
            &DVector::zeros(1),
            &driver,
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_eq!(lc, 0.0);
    }

    #[test]
    fn generator_of_pure_noise_is_half_squared_intensity() {
        let c = [0.6, -0.8];
        let def = SphsDefinition::builder("noise", 2)
            .noise_map(MatrixField::constant(DMatrix::from_column_slice(2, 1, &c)), vec![0])
            .hamiltonian(ScalarField::constant(0.0))
            .build()
            .unwrap();
        let driver = DriverSpec::empty(1).with_component("b", 0.0, &[1.0]).unwrap();
        let phi = ScalarField::quadratic(DMatrix::identity(2, 2));
        let x = DVector::from_vec(vec![2.0, 1.0]);
        let l = generator_apply(
            &def,
            &phi,
            &x,
            &DVector::zeros(0),
            &driver,
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(l, 0.5, epsilon = 1e-14);
        // additive noise: no drift correction
        let d = ito_drift(&def, &x, &DVector::zeros(0), &driver, &CorrectionConfig::default()).unwrap();
        assert_eq!(d, DVector::zeros(2));
    }

    #[test]
    fn bad_step_scale_rejected() {
        let (def, driver) = rotation_system(1.0);
        let cfg = CorrectionConfig {
            jacobian_mode: JacobianMode::FiniteDifference,
            fd_step_scale: 0.0,
        };
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!(ito_drift(&def, &x, &DVector::zeros(1), &driver, &cfg).is_err());
    }
}
