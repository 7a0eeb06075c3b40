//! Energy balance, strong/weak passivity and weak dissipation audits.

use nalgebra::DVector;

use crate::calculus::{fd_directional, generator_apply, CorrectionConfig};
use crate::drivers::DriverSpec;
use crate::error::{Result, SphsError};
use crate::integrators::{PortPowers, Trajectory};
use crate::system::{check_state, SphsDefinition};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceReport {
    pub delta_h: f64,
    pub powers: PortPowers,
    /// `|dH - sum of port powers|` at the final record.
    pub residual: f64,
    /// Same, maximised over all records.
    pub max_residual: f64,
    /// Audit stopped at an explosion.
    pub truncated: bool,
}

pub fn balance_audit(traj: &Trajectory) -> Result<BalanceReport> {
    if traj.is_empty() {
        return Err(SphsError::Precondition("cannot audit an empty trajectory".into()));
    }
    let h0 = traj.hamiltonian[0];
    let mut max_residual: f64 = 0.0;
    for (h, p) in traj.hamiltonian.iter().zip(&traj.powers) {
        max_residual = max_residual.max((h - h0 - p.total()).abs());
    }
    let last = traj.len() - 1;
    let powers = traj.powers[last];
    let delta_h = traj.hamiltonian[last] - h0;
    Ok(BalanceReport {
        delta_h,
        powers,
        residual: (delta_h - powers.total()).abs(),
        max_residual,
        truncated: traj.exploded(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassivityKind {
    StrongPathwise,
    WeakMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Passive,
    Violated,
    Inconclusive,
}

impl Classification {
    pub fn name(&self) -> &'static str {
        match self {
            Classification::Passive => "passive",
            Classification::Violated => "violated",
            Classification::Inconclusive => "inconclusive",
        }
    }

    /// Passive if the interval `margin +- z se` lies above `-tol`, violated if below.
    pub fn from_interval(margin: f64, stderr: f64, tol: f64) -> Self {
        let half = Z95 * stderr;
        if margin - half > -tol {
            Classification::Passive
        } else if margin + half < -tol {
            Classification::Violated
        } else {
            Classification::Inconclusive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassivityVerdict {
    pub kind: PassivityKind,
    pub margin: f64,
    pub stderr: f64,
    pub classification: Classification,
    pub n_paths: usize,
}

/// `min_k [H(x_0) + int u.y o dZ^C - H(x_k)]`; passive iff it is `>= -tol`.
pub fn strong_passivity_check(traj: &Trajectory, tol: f64) -> Result<PassivityVerdict> {
    if traj.is_empty() {
        return Err(SphsError::Precondition("cannot check an empty trajectory".into()));
    }
    let h0 = traj.hamiltonian[0];
    let margin = traj
        .hamiltonian
        .iter()
        .zip(&traj.powers)
        .map(|(h, p)| h0 + p.control - h)
        .fold(f64::INFINITY, f64::min);
    let classification = if margin >= -tol {
        Classification::Passive
    } else {
        Classification::Violated
    };
    Ok(PassivityVerdict {
        kind: PassivityKind::StrongPathwise,
        margin,
        stderr: 0.0,
        classification,
        n_paths: 1,
    })
}

/// Terminal energy functionals of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub h0: f64,
    pub h_final: f64,
    pub powers: PortPowers,
}

impl PathSample {
    pub fn from_trajectory(traj: &Trajectory) -> Option<Self> {
        if traj.is_empty() {
            return None;
        }
        Some(Self {
            h0: traj.hamiltonian[0],
            h_final: *traj.hamiltonian.last()?,
            powers: *traj.powers.last()?,
        })
    }

    /// `H(x_0) + int u.y o dZ^C - H(x_T)`
    pub fn passivity_margin(&self) -> f64 {
        self.h0 + self.powers.control - self.h_final
    }

    /// `int <e^R, o df^R> + int <e^N, o df^N>`
    pub fn dissipation(&self) -> f64 {
        self.powers.resistive + self.powers.noise
    }
}

/// Mean and standard error, summed in slice order.
pub fn mean_stderr(values: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn weak_passivity_estimate(samples: &[PathSample], tol: f64) -> Result<PassivityVerdict> {
    if samples.len() < 2 {
        return Err(SphsError::Precondition(format!(
            "weak passivity needs at least 2 paths, got {}",
            samples.len()
        )));
    }
    let (margin, stderr) = mean_stderr(samples.iter().map(PathSample::passivity_margin));
    Ok(PassivityVerdict {
        kind: PassivityKind::WeakMean,
        margin,
        stderr,
        classification: Classification::from_interval(margin, stderr, tol),
        n_paths: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissipationEstimate {
    /// Mean resistive plus noise port power.
    pub margin: f64,
    pub stderr: f64,
    pub ci_upper: f64,
    /// Upper confidence bound `<= tol`.
    pub satisfied: bool,
    pub n_paths: usize,
}

pub fn weak_dissipation_estimate(samples: &[PathSample], tol: f64) -> Result<DissipationEstimate> {
    if samples.is_empty() {
        return Err(SphsError::Precondition(
            "weak dissipation needs at least one path".into(),
        ));
    }
    let (margin, stderr) = mean_stderr(samples.iter().map(PathSample::dissipation));
    let se = if stderr.is_nan() { 0.0 } else { stderr };
    let ci_upper = margin + Z95 * se;
    Ok(DissipationEstimate {
        margin,
        stderr: se,
        ci_upper,
        satisfied: ci_upper <= tol,
        n_paths: samples.len(),
    })
}

/// `dH.(R dH - 1/2 sum_i (D xi_i) xi_i) - 1/2 sum_i xi_i' Hess(H) xi_i`.
///
/// Nonnegative everywhere means weakly passive when the storage driver is
/// `t` and every noise port is driven by its own unit Wiener process.
pub fn pointwise_weak_passivity(def: &SphsDefinition, x: &DVector<f64>) -> Result<f64> {
    check_state(x, def.dim())?;
    let grad = def.grad_h(x)?;
    let hess = def.hamiltonian().hessian(x);
    let r = def.structure_r(x);
    let xi_field = def.noise_map();
    let xi = xi_field.eval_checked(x, "noise map")?.into_owned();
    let mut value = grad.dot(&(&r * &grad));
    let scale = CorrectionConfig::default().fd_step_scale;
    for i in 0..xi.ncols() {
        let col = xi.column(i).into_owned();
        value -= 0.5 * col.dot(&(&hess * &col));
        if !xi_field.is_constant() && col.iter().any(|&v| v != 0.0) {
            let dxi = fd_directional(
                |y: &DVector<f64>| Ok(xi_field.eval_checked(y, "noise map")?.column(i).into_owned()),
                x,
                &col,
                scale,
            )?;
            value -= 0.5 * grad.dot(&dxi);
        }
    }
    Ok(value)
}

/// `-LH(x)` with zero control: the expected instantaneous energy loss rate.
pub fn weak_passivity_rate(
    def: &SphsDefinition,
    x: &DVector<f64>,
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
) -> Result<f64> {
    let u = DVector::zeros(def.m_control());
    Ok(-generator_apply(def, def.hamiltonian(), x, &u, driver, cfg)?)
}

/// Trapezoidal integral of [`weak_passivity_rate`] along a sampled path, e.g. an ensemble mean.
pub fn rate_integral_along(
    def: &SphsDefinition,
    driver: &DriverSpec,
    cfg: &CorrectionConfig,
    times: &[f64],
    states: &[DVector<f64>],
) -> Result<f64> {
    if times.len() != states.len() {
        return Err(SphsError::dim("path states", times.len(), states.len()));
    }
    let rates = states
        .iter()
        .map(|x| weak_passivity_rate(def, x, driver, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(times
        .windows(2)
        .zip(rates.windows(2))
        .map(|(t, r)| 0.5 * (r[0] + r[1]) * (t[1] - t[0]))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::RandomStream;
    use crate::fields::{MatrixField, ScalarField};
    use crate::integrators::{simulate_path, IntegratorConfig, Scheme};
    use crate::system::ControlLaw;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn canonical() -> MatrixField {
        MatrixField::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
    }

    fn damped(d: f64, c: f64) -> SphsDefinition {
        SphsDefinition::builder("damped", 2)
            .storage(
                canonical(),
                MatrixField::constant(DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, d]))),
                0,
            )
            .noise_map(
                MatrixField::constant(DMatrix::from_column_slice(2, 1, &[0.0, c])),
                vec![1],
            )
            .hamiltonian(ScalarField::quadratic(DMatrix::identity(2, 2)))
            .dissipative(true)
            .build()
            .unwrap()
    }

    #[test]
    fn pointwise_condition_examples() {
        let x = DVector::from_vec(vec![0.0, 2.0]);
        assert_relative_eq!(
            pointwise_weak_passivity(&damped(1.0, 1.0), &x).unwrap(),
            3.5,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            pointwise_weak_passivity(&damped(1.0, 0.0), &x).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            pointwise_weak_passivity(&damped(0.0, 0.3), &x).unwrap(),
            -0.045,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pointwise_condition_matches_negative_generator() {
        let def = damped(0.7, 0.4);
        let driver = DriverSpec::empty(1)
            .with_component("t", 1.0, &[0.0])
            .unwrap()
            .with_component("b", 0.0, &[1.0])
            .unwrap();
        let x = DVector::from_vec(vec![0.3, -1.1]);
        let a = pointwise_weak_passivity(&def, &x).unwrap();
        let b = weak_passivity_rate(&def, &x, &driver, &CorrectionConfig::default()).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn state_dependent_noise_uses_jacobian() {
        // xi(x) = (0, x2): dH.(D xi) xi = x2 * x2, Hess term = x2^2
        let def = SphsDefinition::builder("mult", 2)
            .noise_map(
                MatrixField::function(2, 1, |x| DMatrix::from_column_slice(2, 1, &[0.0, x[1]])),
                vec![0],
            )
            .hamiltonian(ScalarField::quadratic(DMatrix::identity(2, 2)))
            .build()
            .unwrap();
        let x = DVector::from_vec(vec![0.5, 2.0]);
        assert_relative_eq!(pointwise_weak_passivity(&def, &x).unwrap(), -4.0, epsilon = 1e-6);
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(Classification::from_interval(1.0, 0.1, 0.0), Classification::Passive);
        assert_eq!(Classification::from_interval(-1.0, 0.1, 0.0), Classification::Violated);
        assert_eq!(
            Classification::from_interval(0.05, 0.1, 0.0),
            Classification::Inconclusive
        );
    }

    #[test]
    fn audits_on_deterministic_damping() {
        let def = damped(0.5, 0.0);
        let driver = DriverSpec::empty(1)
            .with_component("t", 1.0, &[0.0])
            .unwrap()
            .with_component("b", 0.0, &[0.0])
            .unwrap();
        let cfg = IntegratorConfig::new(Scheme::StratonovichHeun, 1e-3, 1.0);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let tr = simulate_path(
            &def,
            &cfg,
            &ControlLaw::Zero,
            &driver,
            &x0,
            &mut RandomStream::new(0, 0),
        )
        .unwrap();
        let bal = balance_audit(&tr).unwrap();
        assert!(bal.residual < 1e-10, "{}", bal.residual);
        assert!(bal.delta_h < 0.0);
        let strong = strong_passivity_check(&tr, 1e-12).unwrap();
        assert_eq!(strong.classification, Classification::Passive);
        let sample = PathSample::from_trajectory(&tr).unwrap();
        let diss = weak_dissipation_estimate(&[sample, sample], 0.0).unwrap();
        assert!(diss.satisfied);
    }

    #[test]
    fn weak_estimate_needs_two_paths() {
        let s = PathSample {
            h0: 1.0,
            h_final: 0.5,
            powers: PortPowers::default(),
        };
        assert!(weak_passivity_estimate(&[s], 0.0).is_err());
        let v = weak_passivity_estimate(&[s, s], 0.0).unwrap();
        assert_eq!(v.margin, 0.5);
        assert_eq!(v.classification, Classification::Passive);
    }

    #[test]
    fn empty_port_dissipation_is_zero() {
        let s = PathSample {
            h0: 0.5,
            h_final: 0.5,
            powers: PortPowers::default(),
        };
        let d = weak_dissipation_estimate(&[s; 4], 0.0).unwrap();
        assert_eq!(d.margin, 0.0);
        assert_eq!(d.stderr, 0.0);
    }

    #[test]
    fn rate_integral_on_a_frozen_path() {
        let s = crate::models::MassSpring {
            damping: 0.4,
            sigma: 0.0,
            ..Default::default()
        }
        .setup()
        .unwrap();
        let times = [0.0, 0.5, 1.0];
        let states = vec![DVector::from_vec(vec![0.0, 1.0]); 3];
        let v = rate_integral_along(&s.def, &s.driver, &CorrectionConfig::default(), &times, &states).unwrap();
        assert!((v - 0.4).abs() < 1e-12, "{v}");
    }
}
