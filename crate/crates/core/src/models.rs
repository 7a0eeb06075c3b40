//! Builtin example systems.
//!
//! Every model binds to the same three-component driver layout:
//! storage `z = t + sigma W`, control `c = t`, noise `n = B`, with `W` and
//! `B` independent.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::drivers::DriverSpec;
use crate::error::{Result, SphsError};
use crate::fields::{MatrixField, ScalarField};
use crate::system::{interconnect_feedback, ControlLaw, SphsDefinition};

pub const STORAGE_DRIVER: usize = 0;
pub const CONTROL_DRIVER: usize = 1;
pub const NOISE_DRIVER: usize = 2;

/// `z = t + sigma W`, `c = t`, `n = B`.
pub fn standard_driver(sigma: f64) -> DriverSpec {
    DriverSpec::empty(2)
        .with_component("z", 1.0, &[sigma, 0.0])
        .and_then(|d| d.with_component("c", 1.0, &[0.0, 0.0]))
        .and_then(|d| d.with_component("n", 0.0, &[0.0, 1.0]))
        .expect("finite coefficients")
}

/// A system together with the driver, control law and initial state it is run with.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub def: SphsDefinition,
    pub driver: DriverSpec,
    pub control: ControlLaw,
    pub x0: DVector<f64>,
}

impl ModelSetup {
    /// Feedback interconnection of two setups sharing the control channel.
    ///
    /// The drivers are merged over independent Wiener processes, except that
    /// `b`'s control drivers are identified with `a`'s.
    pub fn interconnect(a: &ModelSetup, b: &ModelSetup) -> Result<ModelSetup> {
        if a.def.control_drivers().len() != b.def.control_drivers().len() {
            return Err(SphsError::dim(
                "control port width of second system",
                a.def.m_control(),
                b.def.m_control(),
            ));
        }
        let identify: Vec<(usize, usize)> = b
            .def
            .control_drivers()
            .iter()
            .copied()
            .zip(a.def.control_drivers().iter().copied())
            .collect();
        let (driver, map) = a.driver.merge(&b.driver, &identify, ("a.", "b."))?;
        let b_def = b.def.with_driver_map(&map)?;
        let def = interconnect_feedback(&a.def, &b_def)?;
        let x0 = DVector::from_iterator(a.x0.len() + b.x0.len(), a.x0.iter().chain(b.x0.iter()).copied());
        Ok(ModelSetup {
            def,
            driver,
            control: ControlLaw::Zero,
            x0,
        })
    }
}

fn canonical_j() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
}

fn diag2(a: f64, b: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]))
}

fn actuator() -> MatrixField {
    MatrixField::constant(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SphsError::param(name, "must be positive"))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SphsError::param(name, "must be nonnegative"))
    }
}

/// `m q'' = -k q - d q' + F` on `x = (q, p)`, `H = k q^2 / 2 + p^2 / (2m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassSpring {
    pub m: f64,
    pub k: f64,
    pub force: f64,
    /// `R = diag(0, damping)`; negative values give an anti-damped system.
    pub damping: f64,
    pub sigma: f64,
    /// Constant noise column `(xi_q, xi_p)` on the noise driver.
    pub xi: Option<[f64; 2]>,
}

impl Default for MassSpring {
    fn default() -> Self {
        Self {
            m: 1.0,
            k: 1.0,
            force: 0.0,
            damping: 0.0,
            sigma: 1.0,
            xi: None,
        }
    }
}

impl MassSpring {
    pub fn definition(&self) -> Result<SphsDefinition> {
        positive("m", self.m)?;
        nonnegative("k", self.k)?;
        if !self.damping.is_finite() {
            return Err(SphsError::param("damping", "must be finite"));
        }
        let mut b = SphsDefinition::builder("mass_spring", 2)
            .storage(
                MatrixField::constant(canonical_j()),
                MatrixField::constant(diag2(0.0, self.damping)),
                STORAGE_DRIVER,
            )
            .input_map(actuator(), vec![CONTROL_DRIVER])
            .hamiltonian(ScalarField::quadratic(diag2(self.k, 1.0 / self.m)))
            .dissipative(self.damping >= 0.0);
        if let Some([xq, xp]) = self.xi {
            b = b.noise_map(
                MatrixField::constant(DMatrix::from_column_slice(2, 1, &[xq, xp])),
                vec![NOISE_DRIVER],
            );
        }
        b.build()
    }

    pub fn setup(&self) -> Result<ModelSetup> {
        Ok(ModelSetup {
            def: self.definition()?,
            driver: standard_driver(self.sigma),
            control: ControlLaw::Constant(DVector::from_element(1, self.force)),
            x0: DVector::from_vec(vec![1.0, 0.0]),
        })
    }
}

/// DC motor on `x = (phi, p)`, `H = p^2 / (2I) + phi^2 / (2L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcMotor {
    pub inertia: f64,
    pub inductance: f64,
    pub torque_constant: f64,
    pub friction: f64,
    pub resistance: f64,
    pub sigma: f64,
    pub voltage: f64,
}

impl Default for DcMotor {
    fn default() -> Self {
        Self {
            inertia: 1.0,
            inductance: 1.0,
            torque_constant: 1.0,
            friction: 0.1,
            resistance: 0.1,
            sigma: 0.5,
            voltage: 0.0,
        }
    }
}

impl DcMotor {
    pub fn definition(&self) -> Result<SphsDefinition> {
        positive("inertia", self.inertia)?;
        positive("inductance", self.inductance)?;
        nonnegative("friction", self.friction)?;
        nonnegative("resistance", self.resistance)?;
        let kk = self.torque_constant;
        SphsDefinition::builder("dc_motor", 2)
            .storage(
                MatrixField::constant(DMatrix::from_row_slice(2, 2, &[0.0, kk, -kk, 0.0])),
                MatrixField::constant(diag2(self.friction, self.resistance)),
                STORAGE_DRIVER,
            )
            .input_map(actuator(), vec![CONTROL_DRIVER])
            .hamiltonian(ScalarField::quadratic(diag2(1.0 / self.inductance, 1.0 / self.inertia)))
            .dissipative(true)
            .build()
    }

    pub fn setup(&self) -> Result<ModelSetup> {
        Ok(ModelSetup {
            def: self.definition()?,
            driver: standard_driver(self.sigma),
            control: ControlLaw::Constant(DVector::from_element(1, self.voltage)),
            x0: DVector::from_vec(vec![1.0, 0.0]),
        })
    }
}

/// One-degree-of-freedom mechanical system with `M = m l^2` and `V(q) = -m g l cos q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub sigma: f64,
    pub xi: Option<[f64; 2]>,
    pub torque: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.1,
            sigma: 0.0,
            xi: None,
            torque: 0.0,
        }
    }
}

impl Pendulum {
    pub fn definition(&self) -> Result<SphsDefinition> {
        positive("mass", self.mass)?;
        positive("length", self.length)?;
        nonnegative("damping", self.damping)?;
        let inertia = self.mass * self.length * self.length;
        let mgl = self.mass * self.gravity * self.length;
        let h = ScalarField::new(move |x| 0.5 * x[1] * x[1] / inertia - mgl * x[0].cos())
            .with_gradient(move |x| DVector::from_vec(vec![mgl * x[0].sin(), x[1] / inertia]))
            .with_hessian(move |x| diag2(mgl * x[0].cos(), 1.0 / inertia));
        let mut b = SphsDefinition::builder("pendulum", 2)
            .storage(
                MatrixField::constant(canonical_j()),
                MatrixField::constant(diag2(0.0, self.damping)),
                STORAGE_DRIVER,
            )
            .input_map(actuator(), vec![CONTROL_DRIVER])
            .hamiltonian(h)
            .dissipative(true);
        if let Some([xq, xp]) = self.xi {
            b = b.noise_map(
                MatrixField::constant(DMatrix::from_column_slice(2, 1, &[xq, xp])),
                vec![NOISE_DRIVER],
            );
        }
        b.build()
    }

    pub fn setup(&self) -> Result<ModelSetup> {
        Ok(ModelSetup {
            def: self.definition()?,
            driver: standard_driver(self.sigma),
            control: ControlLaw::Constant(DVector::from_element(1, self.torque)),
            x0: DVector::from_vec(vec![0.5, 0.0]),
        })
    }
}

/// `x1' = x2`, `x2' = mu (1 - x1^2) x2 - x1 + (xi0 + xi1 x2) dB/dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanDerPol {
    pub mu: f64,
    pub xi0: f64,
    pub xi1: f64,
}

impl Default for VanDerPol {
    fn default() -> Self {
        Self {
            mu: 1.0,
            xi0: 0.0,
            xi1: 0.0,
        }
    }
}

impl VanDerPol {
    pub fn definition(&self) -> Result<SphsDefinition> {
        let mu = self.mu;
        let (c0, c1) = (self.xi0, self.xi1);
        // (J - R) x reproduces the oscillator with R22 = -mu (1 - x1^2)
        let r = MatrixField::function(2, 2, move |x| diag2(0.0, -mu * (1.0 - x[0] * x[0])));
        let xi = if c1 == 0.0 {
            MatrixField::constant(DMatrix::from_column_slice(2, 1, &[0.0, c0]))
        } else {
            MatrixField::function(2, 1, move |x| DMatrix::from_column_slice(2, 1, &[0.0, c0 + c1 * x[1]]))
        };
        let def = SphsDefinition::builder("van_der_pol", 2)
            .storage(MatrixField::constant(canonical_j()), r, STORAGE_DRIVER)
            .noise_map(xi, vec![NOISE_DRIVER])
            .hamiltonian(ScalarField::quadratic(DMatrix::identity(2, 2)))
            .build()?;
        for probe in [[0.0, 1.0], [1.5, -0.5], [-2.0, 3.0]] {
            let x = DVector::from_column_slice(&probe);
            let v = def.eval_fields(&x)?.storage_field();
            let expect = [x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0]];
            if (v[0] - expect[0]).abs() + (v[1] - expect[1]).abs() > 1e-12 * (1.0 + v.norm()) {
                return Err(SphsError::Precondition(format!(
                    "van der Pol structure does not reproduce the oscillator at {probe:?}"
                )));
            }
        }
        Ok(def)
    }

    pub fn setup(&self) -> Result<ModelSetup> {
        Ok(ModelSetup {
            def: self.definition()?,
            driver: standard_driver(0.0),
            control: ControlLaw::Zero,
            x0: DVector::from_vec(vec![1.0, 0.0]),
        })
    }
}

/// `dX = c dB`, `H = |x|^2 / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PureNoise {
    pub c: Vec<f64>,
}

impl Default for PureNoise {
    fn default() -> Self {
        Self { c: vec![1.0, 0.0] }
    }
}

impl PureNoise {
    pub fn definition(&self) -> Result<SphsDefinition> {
        let n = self.c.len();
        if n == 0 {
            return Err(SphsError::param("c", "needs at least one component"));
        }
        SphsDefinition::builder("pure_noise", n)
            .noise_map(
                MatrixField::constant(DMatrix::from_column_slice(n, 1, &self.c)),
                vec![NOISE_DRIVER],
            )
            .hamiltonian(ScalarField::quadratic(DMatrix::identity(n, n)))
            .dissipative(true)
            .build()
    }

    pub fn setup(&self) -> Result<ModelSetup> {
        Ok(ModelSetup {
            def: self.definition()?,
            driver: standard_driver(0.0),
            control: ControlLaw::Zero,
            x0: DVector::zeros(self.c.len()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub unit: &'static str,
    pub default: f64,
    pub doc: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCatalogEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub state: &'static [&'static str],
    pub params: &'static [ParamSpec],
    /// Probe box half-width for validation.
    pub domain: f64,
}

const fn p(name: &'static str, unit: &'static str, default: f64, doc: &'static str) -> ParamSpec {
    ParamSpec {
        name,
        unit,
        default,
        doc,
    }
}

static CATALOG: [ModelCatalogEntry; 5] = [
    ModelCatalogEntry {
        name: "mass_spring",
        summary: "mass-spring with multiplicative storage noise, optional damping and additive noise",
        state: &["q", "p"],
        params: &[
            p("m", "kg", 1.0, "mass"),
            p("k", "N/m", 1.0, "stiffness"),
            p("force", "N", 0.0, "constant applied force u"),
            p("damping", "N s/m", 0.0, "R = diag(0, damping)"),
            p("sigma", "1", 1.0, "storage driver z = t + sigma W"),
            p("xi_q", "m/sqrt(s)", 0.0, "noise column, q entry"),
            p("xi_p", "N sqrt(s)", 0.0, "noise column, p entry"),
        ],
        domain: 3.0,
    },
    ModelCatalogEntry {
        name: "dc_motor",
        summary: "DC motor with storage noise",
        state: &["phi", "p"],
        params: &[
            p("inertia", "kg m^2", 1.0, "rotor inertia I"),
            p("inductance", "H", 1.0, "inductance L"),
            p("torque_constant", "N m/A", 1.0, "coupling K"),
            p("friction", "N m s", 0.1, "mechanical friction b"),
            p("resistance", "ohm", 0.1, "armature resistance R_e"),
            p("sigma", "1", 0.5, "storage driver z = t + sigma W"),
            p("voltage", "V", 0.0, "constant input u"),
        ],
        domain: 3.0,
    },
    ModelCatalogEntry {
        name: "pendulum",
        summary: "one-degree-of-freedom pendulum, M = m l^2, V = -m g l cos q",
        state: &["q", "p"],
        params: &[
            p("mass", "kg", 1.0, "bob mass"),
            p("length", "m", 1.0, "rod length"),
            p("gravity", "m/s^2", 9.81, "gravitational acceleration"),
            p("damping", "N m s", 0.1, "R = diag(0, damping)"),
            p("sigma", "1", 0.0, "storage driver z = t + sigma W"),
            p("xi_q", "1/sqrt(s)", 0.0, "noise column, q entry"),
            p("xi_p", "N m sqrt(s)", 0.0, "noise column, p entry"),
            p("torque", "N m", 0.0, "constant applied torque u"),
        ],
        domain: 3.0,
    },
    ModelCatalogEntry {
        name: "van_der_pol",
        summary: "van der Pol oscillator with noise xi(x2) = xi0 + xi1 x2 on x2",
        state: &["x1", "x2"],
        params: &[
            p("mu", "1", 1.0, "nonlinearity"),
            p("xi0", "1", 0.0, "constant noise intensity"),
            p("xi1", "1", 0.0, "multiplicative noise intensity"),
        ],
        domain: 3.0,
    },
    ModelCatalogEntry {
        name: "pure_noise",
        summary: "additive Brownian noise dX = c dB with H = |x|^2 / 2",
        state: &["x1", "x2"],
        params: &[
            p("c1", "1", 1.0, "noise column, first entry"),
            p("c2", "1", 0.0, "noise column, second entry"),
        ],
        domain: 3.0,
    },
];

pub fn catalog() -> &'static [ModelCatalogEntry] {
    &CATALOG
}

pub fn entry(name: &str) -> Option<&'static ModelCatalogEntry> {
    CATALOG.iter().find(|e| e.name == name)
}

/// Builds a catalog model; missing parameters take their defaults, unknown ones are rejected.
pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSetup> {
    let e = entry(name).ok_or_else(|| SphsError::param("model", format!("unknown model {name:?}")))?;
    for key in params.keys() {
        if !e.params.iter().any(|s| s.name == key) {
            return Err(SphsError::param(key, format!("not a parameter of {name}")));
        }
    }
    let get = |k: &str| -> f64 {
        params
            .get(k)
            .copied()
            .unwrap_or_else(|| e.params.iter().find(|s| s.name == k).map(|s| s.default).unwrap_or(0.0))
    };
    let noise = |a: f64, b: f64| if a == 0.0 && b == 0.0 { None } else { Some([a, b]) };
    match name {
        "mass_spring" => MassSpring {
            m: get("m"),
            k: get("k"),
            force: get("force"),
            damping: get("damping"),
            sigma: get("sigma"),
            xi: noise(get("xi_q"), get("xi_p")),
        }
        .setup(),
        "dc_motor" => DcMotor {
            inertia: get("inertia"),
            inductance: get("inductance"),
            torque_constant: get("torque_constant"),
            friction: get("friction"),
            resistance: get("resistance"),
            sigma: get("sigma"),
            voltage: get("voltage"),
        }
        .setup(),
        "pendulum" => Pendulum {
            mass: get("mass"),
            length: get("length"),
            gravity: get("gravity"),
            damping: get("damping"),
            sigma: get("sigma"),
            xi: noise(get("xi_q"), get("xi_p")),
            torque: get("torque"),
        }
        .setup(),
        "van_der_pol" => VanDerPol {
            mu: get("mu"),
            xi0: get("xi0"),
            xi1: get("xi1"),
        }
        .setup(),
        "pure_noise" => PureNoise {
            c: vec![get("c1"), get("c2")],
        }
        .setup(),
        _ => unreachable!("catalog entry without constructor"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{ito_drift, CorrectionConfig};
    use crate::system::validate;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn mass_spring_examples() {
        let s = MassSpring::default().setup().unwrap();
        assert_eq!(s.def.energy(&v(&[1.0, 0.0])), 0.5);
        let drift = ito_drift(
            &s.def,
            &v(&[1.0, 0.0]),
            &v(&[0.0]),
            &s.driver,
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(drift[0], -0.5, epsilon = 1e-14);
        assert_relative_eq!(drift[1], -1.0, epsilon = 1e-14);
        assert!(MassSpring {
            m: 0.0,
            ..Default::default()
        }
        .definition()
        .is_err());
    }

    #[test]
    fn mass_spring_external_noise_is_constant() {
        let def = MassSpring {
            xi: Some([0.2, 0.3]),
            ..Default::default()
        }
        .definition()
        .unwrap();
        let a = def.eval_fields(&v(&[1.0, 2.0])).unwrap();
        let b = def.eval_fields(&v(&[-3.0, 0.5])).unwrap();
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.noise[0], v(&[0.2, 0.3]));
    }

    #[test]
    fn dc_motor_gradient_and_field() {
        let m = DcMotor {
            inertia: 2.0,
            inductance: 0.5,
            torque_constant: 1.5,
            friction: 0.2,
            resistance: 0.3,
            ..Default::default()
        };
        let def = m.definition().unwrap();
        let g = def.grad_h(&v(&[0.5, 2.0])).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(g[1], 1.0, epsilon = 1e-15);
        // (J - R) dH at (phi, p) = (1, 1): dH = (2, 0.5)
        let vs = def.eval_fields(&v(&[1.0, 1.0])).unwrap().storage_field();
        assert_relative_eq!(vs[0], -0.2 * 2.0 + 1.5 * 0.5, epsilon = 1e-14);
        assert_relative_eq!(vs[1], -1.5 * 2.0 - 0.3 * 0.5, epsilon = 1e-14);
        assert!(DcMotor {
            inductance: -1.0,
            ..Default::default()
        }
        .definition()
        .is_err());
    }

    #[test]
    fn pendulum_equilibrium_and_hessian() {
        let def = Pendulum::default().definition().unwrap();
        assert_eq!(def.grad_h(&v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
        let x = v(&[0.4, -0.7]);
        let fd = def.hamiltonian().fd_gradient(&x);
        let an = def.grad_h(&x).unwrap();
        assert!((fd - an).norm() < 1e-8);
        assert!(Pendulum {
            length: 0.0,
            ..Default::default()
        }
        .definition()
        .is_err());
    }

    #[test]
    fn van_der_pol_drift() {
        let def = VanDerPol {
            mu: 1.0,
            ..Default::default()
        }
        .definition()
        .unwrap();
        let vs = def.eval_fields(&v(&[0.0, 1.0])).unwrap().storage_field();
        assert_eq!(vs, v(&[1.0, 1.0]));
        let probes: Vec<_> = (0..5).map(|i| v(&[i as f64 - 2.0, 1.0])).collect();
        let rep = validate(&def, &probes, 1e-12).unwrap();
        assert!(rep.passed);
        assert!(rep.min_r_eigenvalue < 0.0);
    }

    #[test]
    fn catalog_builds_everything_with_defaults() {
        for e in catalog() {
            let s = build(e.name, &BTreeMap::new()).unwrap();
            assert_eq!(s.def.dim(), e.state.len(), "{}", e.name);
            assert_eq!(s.x0.len(), s.def.dim());
            s.def.check_binding(&s.driver).unwrap();
        }
    }

    #[test]
    fn catalog_rejects_unknowns() {
        let mut p = BTreeMap::new();
        p.insert("dampinng".to_string(), 1.0);
        let err = build("mass_spring", &p).unwrap_err();
        assert!(err.to_string().contains("dampinng"));
        assert!(build("nope", &BTreeMap::new()).is_err());
    }

    #[test]
    fn interconnected_setup_shares_control_driver() {
        let a = MassSpring::default().setup().unwrap();
        let b = MassSpring {
            k: 2.0,
            ..Default::default()
        }
        .setup()
        .unwrap();
        let c = ModelSetup::interconnect(&a, &b).unwrap();
        assert_eq!(c.def.dim(), 4);
        assert_eq!(c.def.m_control(), 0);
        assert_eq!(c.driver.n_wieners(), 4);
        assert_eq!(c.driver.n_components(), 5);
        c.def.check_binding(&c.driver).unwrap();
    }
}
