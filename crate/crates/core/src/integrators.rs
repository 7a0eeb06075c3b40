//! Time stepping with pathwise port-power accounting.
//!
//! Stratonovich schemes (Heun, classical RK4) integrate the port fields
//! against realised driver increments directly. The Itô scheme is
//! Euler-Maruyama on the corrected drift. Every step also accumulates the
//! port power integrals `int <dH, o df_port>` with midpoint efforts
//! `1/2 (dH(x_k) + dH(x_{k+1}))`.

use std::io::Write;
use std::ops::{Add, AddAssign};

use nalgebra::DVector;

use crate::calculus::{driven_fields, ito_correction_by_port, CorrectionConfig, DrivenField, PortKind};
use crate::drivers::{check_dt, DriverSpec, RandomStream, WienerPath};
use crate::error::{Result, SphsError};
use crate::fields::ScalarField;
use crate::system::{check_state, ControlLaw, SphsDefinition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Predictor-corrector midpoint scheme, Stratonovich-consistent.
    #[default]
    StratonovichHeun,
    /// Euler-Maruyama on the Itô-corrected drift.
    ItoEulerMaruyama,
    /// Classical four-stage Runge-Kutta on the Stratonovich increments.
    StratonovichRk4,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::StratonovichHeun => "stratonovich_heun",
            Scheme::ItoEulerMaruyama => "ito_euler_maruyama",
            Scheme::StratonovichRk4 => "stratonovich_rk4",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "heun" | "stratonovich_heun" => Some(Scheme::StratonovichHeun),
            "euler_maruyama" | "em" | "ito_euler_maruyama" => Some(Scheme::ItoEulerMaruyama),
            "rk4" | "stratonovich_rk4" => Some(Scheme::StratonovichRk4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    /// Explosion is declared once `|x|` exceeds this.
    pub blowup_threshold: f64,
    pub record_every: usize,
    pub correction: CorrectionConfig,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, dt: f64, t_end: f64) -> Self {
        Self {
            scheme,
            dt,
            t_end,
            blowup_threshold: 1e8,
            record_every: 1,
            correction: CorrectionConfig::default(),
        }
    }

    pub fn with_record_every(mut self, stride: usize) -> Self {
        self.record_every = stride;
        self
    }

    pub fn with_blowup_threshold(mut self, threshold: f64) -> Self {
        self.blowup_threshold = threshold;
        self
    }

    pub fn check(&self) -> Result<()> {
        check_dt(self.dt)?;
        if !self.t_end.is_finite() || self.t_end < self.dt {
            return Err(SphsError::param("t_end", "must be finite and at least dt"));
        }
        if self.blowup_threshold.is_nan() || self.blowup_threshold <= 0.0 {
            return Err(SphsError::param("blowup_threshold", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(SphsError::param("record_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of steps, `round(t_end / dt)`.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Accumulated power delivered to the storage through each port.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PortPowers {
    /// `int dH . J dH o dZ`, zero up to discretisation error.
    pub storage: f64,
    /// `-int dH . R dH o dZ`
    pub resistive: f64,
    /// `int y . u o dZ^C`
    pub control: f64,
    /// `int dH . xi o dZ^N`
    pub noise: f64,
}

impl PortPowers {
    pub fn total(&self) -> f64 {
        self.storage + self.resistive + self.control + self.noise
    }

    fn add_port(&mut self, kind: PortKind, value: f64) {
        match kind {
            PortKind::Storage => self.storage += value,
            PortKind::Resistive => self.resistive += value,
            PortKind::Control => self.control += value,
            PortKind::Noise => self.noise += value,
        }
    }
}

impl Add for PortPowers {
    type Output = PortPowers;
    fn add(self, o: PortPowers) -> PortPowers {
        PortPowers {
            storage: self.storage + o.storage,
            resistive: self.resistive + o.resistive,
            control: self.control + o.control,
            noise: self.noise + o.noise,
        }
    }
}

impl AddAssign for PortPowers {
    fn add_assign(&mut self, o: PortPowers) {
        *self = *self + o;
    }
}

/// A recorded sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// `H(states[k])`
    pub hamiltonian: Vec<f64>,
    /// Control value held over the step starting at each record.
    pub controls: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    /// Port power integrals accumulated up to each record.
    pub powers: Vec<PortPowers>,
    /// Driver increments summed over each recorded interval (`len = states.len() - 1`).
    pub increments: Vec<DVector<f64>>,
    /// Step index at which the state left the domain, if it did.
    pub exploded_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn exploded(&self) -> bool {
        self.exploded_at.is_some()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// Writes `t, x_1..x_n, H, y_1..y_m, power_storage, power_R, power_C, power_N, exploded`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.outputs.first().map_or(0, |y| y.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.push("H".into());
        header.extend((1..=m).map(|i| format!("y_{i}")));
        header.extend(["power_storage", "power_R", "power_C", "power_N", "exploded"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        let flag = u8::from(self.exploded());
        for k in 0..self.len() {
            let mut row = vec![fmt_num(self.times[k])];
            row.extend(self.states[k].iter().map(|&v| fmt_num(v)));
            row.push(fmt_num(self.hamiltonian[k]));
            row.extend(self.outputs[k].iter().map(|&v| fmt_num(v)));
            let p = &self.powers[k];
            row.extend([p.storage, p.resistive, p.control, p.noise].map(fmt_num));
            row.push(flag.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

/// Next state plus the flow increment realised by every driven field.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: DVector<f64>,
    /// Per driven field: port and flow increment over the step.
    pub flows: Vec<(PortKind, DVector<f64>)>,
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn fields_at(def: &SphsDefinition, x: &DVector<f64>, u: &DVector<f64>) -> Result<Vec<DrivenField>> {
    let set = def.eval_fields(x)?;
    Ok(driven_fields(def, &set, u))
}

fn combine(fields: &[DrivenField], dz: &DVector<f64>, dim: usize) -> DVector<f64> {
    let mut out = DVector::zeros(dim);
    for f in fields {
        let z = dz[f.driver];
        if z != 0.0 {
            out.axpy(z, &f.value, 1.0);
        }
    }
    out
}

/// Explicit Runge-Kutta step on `dX = Phi(X) dZ` with the increment `dZ` frozen.
fn rk_step(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dz: &DVector<f64>,
    a: &[&[f64]],
    b: &[f64],
) -> Result<StepOutcome> {
    let n = def.dim();
    let mut stage_fields: Vec<Vec<DrivenField>> = Vec::with_capacity(b.len());
    let mut stage_incs: Vec<DVector<f64>> = Vec::with_capacity(b.len());
    for (s, row) in a.iter().enumerate() {
        let mut xs = x.clone();
        for (j, &c) in row.iter().enumerate().take(s) {
            if c != 0.0 {
                xs.axpy(c, &stage_incs[j], 1.0);
            }
        }
        if !finite(&xs) {
            return Err(SphsError::non_finite("stage state", &xs));
        }
        let f = fields_at(def, &xs, u)?;
        stage_incs.push(combine(&f, dz, n));
        stage_fields.push(f);
    }
    let mut flows: Vec<(PortKind, DVector<f64>)> =
        stage_fields[0].iter().map(|f| (f.kind, DVector::zeros(n))).collect();
    for (s, fs) in stage_fields.iter().enumerate() {
        for (i, f) in fs.iter().enumerate() {
            let z = dz[f.driver];
            if z != 0.0 {
                flows[i].1.axpy(b[s] * z, &f.value, 1.0);
            }
        }
    }
    let mut next = x.clone();
    for (_, fl) in &flows {
        next += fl;
    }
    if !finite(&next) {
        return Err(SphsError::non_finite("state", &next));
    }
    Ok(StepOutcome { next, flows })
}

const HEUN_A: [&[f64]; 2] = [&[], &[1.0]];
const HEUN_B: [f64; 2] = [0.5, 0.5];
const RK4_A: [&[f64]; 4] = [&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]];
const RK4_B: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];

/// Heun step: `x~ = x + Phi(x) dZ`, `x' = x + 1/2 (Phi(x) + Phi(x~)) dZ`.
pub fn step_heun(def: &SphsDefinition, x: &DVector<f64>, u: &DVector<f64>, dz: &DVector<f64>) -> Result<DVector<f64>> {
    check_state(x, def.dim())?;
    Ok(rk_step(def, x, u, dz, &HEUN_A, &HEUN_B)?.next)
}

/// Classical RK4 step on the Stratonovich increments.
pub fn step_rk4(def: &SphsDefinition, x: &DVector<f64>, u: &DVector<f64>, dz: &DVector<f64>) -> Result<DVector<f64>> {
    check_state(x, def.dim())?;
    Ok(rk_step(def, x, u, dz, &RK4_A, &RK4_B)?.next)
}

fn em_step(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dz: &DVector<f64>,
    dt: f64,
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<StepOutcome> {
    let fields = fields_at(def, x, u)?;
    let n = def.dim();
    // drift*dt + Wiener parts = sum_f v_f dZ_f + correction*dt
    let mut flows: Vec<(PortKind, DVector<f64>)> = fields.iter().map(|f| (f.kind, &f.value * dz[f.driver])).collect();
    if !driver.is_fully_deterministic() {
        for (kind, c) in ito_correction_by_port(def, x, u, &fields, driver, cfg)? {
            if c.iter().any(|&v| v != 0.0) {
                flows.push((kind, c * dt));
            }
        }
    }
    let mut next = x.clone();
    for (_, fl) in &flows {
        next += fl;
    }
    if next.len() != n || !finite(&next) {
        return Err(SphsError::non_finite("state", &next));
    }
    Ok(StepOutcome { next, flows })
}

/// Euler-Maruyama step on the Itô form: `x' = x + mu(x) dt + (dZ - a dt)`-parts of `Phi(x) dZ`.
pub fn step_em(
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dz: &DVector<f64>,
    dt: f64,
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<DVector<f64>> {
    check_state(x, def.dim())?;
    Ok(em_step(def, x, u, dz, dt, driver, cfg)?.next)
}

/// One step of the configured scheme, with per-field flows.
pub fn step_detailed(
    config: &IntegratorConfig,
    def: &SphsDefinition,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dz: &DVector<f64>,
    driver: &DriverSpec,
) -> Result<StepOutcome> {
    match config.scheme {
        Scheme::StratonovichHeun => rk_step(def, x, u, dz, &HEUN_A, &HEUN_B),
        Scheme::StratonovichRk4 => rk_step(def, x, u, dz, &RK4_A, &RK4_B),
        Scheme::ItoEulerMaruyama => em_step(def, x, u, dz, config.dt, driver, &config.correction),
    }
}

/// Source of Wiener increments for a path.
pub enum Noise<'a> {
    Stream(&'a mut RandomStream),
    Path(&'a WienerPath),
}

/// Simulates one path drawing increments from `stream`.
pub fn simulate_path(
    def: &SphsDefinition,
    config: &IntegratorConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    stream: &mut RandomStream,
) -> Result<Trajectory> {
    simulate(def, config, law, driver, x0, Noise::Stream(stream))
}

/// Simulates one path along a pre-sampled Wiener path (`path.dt()` must equal `config.dt`).
pub fn simulate_on_path(
    def: &SphsDefinition,
    config: &IntegratorConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    path: &WienerPath,
) -> Result<Trajectory> {
    simulate(def, config, law, driver, x0, Noise::Path(path))
}

pub fn simulate(
    def: &SphsDefinition,
    config: &IntegratorConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    mut noise: Noise<'_>,
) -> Result<Trajectory> {
    config.check()?;
    def.check_binding(driver)?;
    check_state(x0, def.dim())?;
    let n_steps = config.n_steps();
    let nw = driver.n_wieners();
    if let Noise::Path(p) = &noise {
        if (p.dt() - config.dt).abs() > 1e-12 * config.dt || p.n_steps() < n_steps || p.n_wieners() != nw {
            return Err(SphsError::Precondition(format!(
                "wiener path (dt {}, {} steps, {} processes) does not match config (dt {}, {} steps, {} processes)",
                p.dt(),
                p.n_steps(),
                p.n_wieners(),
                config.dt,
                n_steps,
                nw
            )));
        }
    }

    let cap = n_steps / config.record_every + 2;
    let mut traj = Trajectory {
        times: Vec::with_capacity(cap),
        states: Vec::with_capacity(cap),
        hamiltonian: Vec::with_capacity(cap),
        controls: Vec::with_capacity(cap),
        outputs: Vec::with_capacity(cap),
        powers: Vec::with_capacity(cap),
        increments: Vec::with_capacity(cap),
        exploded_at: None,
    };

    let sd = config.dt.sqrt();
    let mut dw = vec![0.0; nw];
    let mut dz = DVector::zeros(driver.n_components());
    let mut dz_acc = DVector::zeros(driver.n_components());
    let mut powers = PortPowers::default();
    let mut x = x0.clone();
    let mut grad = def.grad_h(&x)?;
    let mut u = law.evaluate(def, 0.0, &x)?;

    let record = |traj: &mut Trajectory, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: PortPowers| -> Result<()> {
        traj.times.push(t);
        traj.hamiltonian.push(def.energy(x));
        traj.outputs.push(def.output(x)?);
        traj.states.push(x.clone());
        traj.controls.push(u.clone());
        traj.powers.push(p);
        Ok(())
    };
    record(&mut traj, 0.0, &x, &u, powers)?;

    for k in 0..n_steps {
        match &mut noise {
            Noise::Stream(s) => {
                for w in dw.iter_mut() {
                    *w = sd * s.standard_normal();
                }
            }
            Noise::Path(p) => dw.copy_from_slice(p.row(k)),
        }
        driver.increments_from_wiener(&dw, config.dt, &mut dz);

        let outcome = match step_detailed(config, def, &x, &u, &dz, driver) {
            Ok(o) => o,
            Err(SphsError::NonFinite { .. }) => {
                traj.exploded_at = Some(k + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        let next = outcome.next;
        if next.norm() > config.blowup_threshold {
            traj.exploded_at = Some(k + 1);
            break;
        }
        let next_grad = match def.grad_h(&next) {
            Ok(g) => g,
            Err(SphsError::NonFinite { .. }) => {
                traj.exploded_at = Some(k + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        let e_mid = (&grad + &next_grad) * 0.5;
        for (kind, flow) in &outcome.flows {
            powers.add_port(*kind, e_mid.dot(flow));
        }
        dz_acc += &dz;
        x = next;
        grad = next_grad;
        let t = (k + 1) as f64 * config.dt;
        let last = k + 1 == n_steps;
        u = match law.evaluate(def, t, &x) {
            Ok(u) => u,
            Err(SphsError::NonFinite { .. }) => {
                traj.exploded_at = Some(k + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        if (k + 1) % config.record_every == 0 || last {
            record(&mut traj, t, &x, &u, powers)?;
            traj.increments.push(dz_acc.clone());
            dz_acc.fill(0.0);
        }
    }
    Ok(traj)
}

/// `max_k |phi(x_k) - phi(x_0) - int_0^{t_k} <d phi, o dX>|` along a recorded path.
///
/// The integral is the trapezoidal sum of `d phi(x) . Phi(x) dZ` over recorded
/// intervals, using the recorded driver increments and controls.
pub fn observable_path_check(def: &SphsDefinition, traj: &Trajectory, phi: &ScalarField) -> Result<f64> {
    if traj.len() < 2 {
        return Ok(0.0);
    }
    let n = def.dim();
    let phi0 = phi.value(&traj.states[0]);
    let mut acc = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..traj.len() - 1 {
        let dz = &traj.increments[k];
        let u = &traj.controls[k];
        let flow = |x: &DVector<f64>| -> Result<f64> {
            let f = fields_at(def, x, u)?;
            Ok(phi.gradient(x).dot(&combine(&f, dz, n)))
        };
        acc += 0.5 * (flow(&traj.states[k])? + flow(&traj.states[k + 1])?);
        let r = (phi.value(&traj.states[k + 1]) - phi0 - acc).abs();
        worst = worst.max(r);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::MatrixField;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn rotation() -> SphsDefinition {
        SphsDefinition::builder("rot", 2)
            .storage(
                MatrixField::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
                MatrixField::zeros(2, 2),
                0,
            )
            .hamiltonian(ScalarField::quadratic(DMatrix::identity(2, 2)))
            .build()
            .unwrap()
    }

    fn driver(sigma: f64) -> DriverSpec {
        DriverSpec::empty(1).with_component("z", 1.0, &[sigma]).unwrap()
    }

    #[test]
    fn heun_reduces_to_deterministic_heun() {
        let def = rotation();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let dz = DVector::from_vec(vec![0.1]);
        let next = step_heun(&def, &x, &DVector::zeros(0), &dz).unwrap();
        // ODE (q', p') = (p, -q): k1 = (0, -1), k2 = f(1, -0.1) = (-0.1, -1)
        assert_relative_eq!(next[0], 1.0 + 0.05 * (0.0 - 0.1), epsilon = 1e-15);
        assert_relative_eq!(next[1], 0.05 * (-1.0 - 1.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_increment_is_identity() {
        let def = rotation();
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let dz = DVector::zeros(1);
        assert_eq!(step_heun(&def, &x, &DVector::zeros(0), &dz).unwrap(), x);
        assert_eq!(step_rk4(&def, &x, &DVector::zeros(0), &dz).unwrap(), x);
    }

    #[test]
    fn em_with_deterministic_driver_is_explicit_euler() {
        let def = rotation();
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let d = driver(0.0);
        let dz = DVector::from_vec(vec![0.01]);
        let next = step_em(
            &def,
            &x,
            &DVector::zeros(0),
            &dz,
            0.01,
            &d,
            &CorrectionConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(next[0], 1.0 + 0.01 * 0.5, epsilon = 1e-15);
        assert_relative_eq!(next[1], 0.5 - 0.01 * 1.0, epsilon = 1e-15);
    }

    #[test]
    fn additive_noise_em_equals_heun() {
        let def = SphsDefinition::builder("noise", 2)
            .noise_map(
                MatrixField::constant(DMatrix::from_column_slice(2, 1, &[0.5, -1.0])),
                vec![0],
            )
            .hamiltonian(ScalarField::constant(0.0))
            .build()
            .unwrap();
        let d = DriverSpec::empty(1).with_component("b", 0.0, &[1.0]).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let dz = DVector::from_vec(vec![0.37]);
        let em = step_em(
            &def,
            &x,
            &DVector::zeros(0),
            &dz,
            0.01,
            &d,
            &CorrectionConfig::default(),
        )
        .unwrap();
        let heun = step_heun(&def, &x, &DVector::zeros(0), &dz).unwrap();
        assert_eq!(em, heun);
    }

    #[test]
    fn zero_dynamics_stay_put() {
        let def = SphsDefinition::builder("flat", 2)
            .storage(
                MatrixField::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
                MatrixField::zeros(2, 2),
                0,
            )
            .hamiltonian(ScalarField::constant(3.0))
            .build()
            .unwrap();
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 0.01, 1.0);
        let x0 = DVector::from_vec(vec![0.4, -0.2]);
        let tr = simulate_path(
            &def,
            &cfg,
            &ControlLaw::Zero,
            &driver(1.0),
            &x0,
            &mut RandomStream::new(1, 0),
        )
        .unwrap();
        assert!(tr.states.iter().all(|x| *x == x0));
        assert_eq!(*tr.powers.last().unwrap(), PortPowers::default());
        assert_eq!(tr.len(), 101);
    }

    #[test]
    fn lossless_energy_drift_is_small() {
        let def = rotation();
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 1e-3, 1.0);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let tr = simulate_path(
            &def,
            &cfg,
            &ControlLaw::Zero,
            &driver(1.0),
            &x0,
            &mut RandomStream::new(7, 0),
        )
        .unwrap();
        let worst = tr.hamiltonian.iter().map(|h| (h - 0.5).abs()).fold(0.0, f64::max);
        assert!(worst < 5e-3, "{worst}");
        assert!(!tr.exploded());
    }

    #[test]
    fn cubic_potential_explodes() {
        // H = q^3/3 + p^2/2 with damping-free canonical J runs off to -infinity in q
        let def = SphsDefinition::builder("cubic", 2)
            .storage(
                MatrixField::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
                MatrixField::zeros(2, 2),
                0,
            )
            .hamiltonian(
                ScalarField::new(|x| x[0].powi(3) / 3.0 + 0.5 * x[1] * x[1])
                    .with_gradient(|x| DVector::from_vec(vec![x[0] * x[0], x[1]])),
            )
            .build()
            .unwrap();
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 1e-3, 10.0).with_blowup_threshold(10.0);
        let x0 = DVector::from_vec(vec![-1.0, -1.0]);
        let tr = simulate_path(
            &def,
            &cfg,
            &ControlLaw::Zero,
            &driver(0.0),
            &x0,
            &mut RandomStream::new(0, 0),
        )
        .unwrap();
        assert!(tr.exploded());
        assert!(*tr.times.last().unwrap() < 10.0);
        assert!(tr.states.iter().all(|x| x.norm() <= 10.0));
        assert_eq!(tr.states.len(), tr.hamiltonian.len());
        assert_eq!(tr.states.len(), tr.powers.len());
    }

    #[test]
    fn stream_and_presampled_path_agree() {
        let def = rotation();
        let d = driver(1.0);
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 0.01, 1.0);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let a = simulate_path(&def, &cfg, &ControlLaw::Zero, &d, &x0, &mut RandomStream::new(3, 9)).unwrap();
        let w = d.sample_wiener(0.01, 100, &mut RandomStream::new(3, 9)).unwrap();
        let b = simulate_on_path(&def, &cfg, &ControlLaw::Zero, &d, &x0, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_stride_keeps_endpoints() {
        let def = rotation();
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 0.01, 1.0).with_record_every(30);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let tr = simulate_path(
            &def,
            &cfg,
            &ControlLaw::Zero,
            &driver(0.0),
            &x0,
            &mut RandomStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(tr.len(), 5);
        assert_relative_eq!(*tr.times.last().unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(tr.increments.len(), 4);
        assert_relative_eq!(tr.increments.iter().map(|z| z[0]).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn observable_check_vanishes_for_constant() {
        let def = rotation();
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 0.01, 1.0);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let tr = simulate_path(
            &def,
            &cfg,
            &ControlLaw::Zero,
            &driver(1.0),
            &x0,
            &mut RandomStream::new(2, 0),
        )
        .unwrap();
        assert_eq!(
            observable_path_check(&def, &tr, &ScalarField::constant(2.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 0.1, 0.05);
        assert!(cfg.check().is_err());
        cfg.t_end = 1.0;
        cfg.record_every = 0;
        assert!(cfg.check().is_err());
        assert_eq!(Scheme::from_name("rk4"), Some(Scheme::StratonovichRk4));
        assert_eq!(Scheme::from_name("nope"), None);
    }
}
