//! Monte Carlo ensembles.
//!
//! Path `i` draws its noise from `RandomStream::new(master_seed, i)`, so
//! results do not depend on how paths are scheduled. Paths are simulated in
//! chunks (in parallel with the `parallel` feature) and folded sequentially in
//! path order, which keeps every summary bit-identical across thread counts.

use nalgebra::DVector;

use crate::calculus::{generator_apply, ito_drift};
use crate::drivers::{DriverSpec, RandomStream, WienerPath};
use crate::energy::{mean_stderr, PathSample, Z95};
use crate::error::{Result, SphsError};
use crate::fields::ScalarField;
use crate::integrators::{simulate_on_path, simulate_path, IntegratorConfig, PortPowers, Trajectory};
use crate::system::{ControlLaw, SphsDefinition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Data-parallel over paths; identical to `Sequential` without the `parallel` feature.
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub master_seed: u64,
    pub integrator: IntegratorConfig,
    /// Pairs paths `(2j, 2j + 1)` on `W` and `-W` and averages each pair.
    pub antithetic: bool,
    pub execution: Execution,
    pub chunk_size: usize,
}

impl EnsembleConfig {
    pub fn new(n_paths: usize, master_seed: u64, integrator: IntegratorConfig) -> Self {
        Self {
            n_paths,
            master_seed,
            integrator,
            antithetic: false,
            execution: Execution::default(),
            chunk_size: 512,
        }
    }

    pub fn sequential(mut self) -> Self {
        self.execution = Execution::Sequential;
        self
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn check(&self) -> Result<()> {
        self.integrator.check()?;
        if self.n_paths == 0 {
            return Err(SphsError::param("n_paths", "must be at least 1"));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(SphsError::param("n_paths", "must be even for antithetic pairs"));
        }
        if self.chunk_size == 0 {
            return Err(SphsError::param("chunk_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Independent samples after pairing.
    fn n_units(&self) -> usize {
        if self.antithetic {
            self.n_paths / 2
        } else {
            self.n_paths
        }
    }
}

fn parallel_map<T, F>(exec: Execution, range: std::ops::Range<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            range.into_par_iter().map(f).collect()
        }
        _ => range.map(f).collect(),
    }
}

/// Simulates path `index` of an ensemble.
pub fn simulate_member(
    def: &SphsDefinition,
    cfg: &EnsembleConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    index: usize,
) -> Result<Trajectory> {
    let ic = &cfg.integrator;
    if cfg.antithetic {
        let mut stream = RandomStream::new(cfg.master_seed, (index / 2) as u64);
        let path = driver.sample_wiener(ic.dt, ic.n_steps(), &mut stream)?;
        let path = if index % 2 == 1 { path.negated() } else { path };
        simulate_on_path(def, ic, law, driver, x0, &path)
    } else {
        let mut stream = RandomStream::new(cfg.master_seed, index as u64);
        simulate_path(def, ic, law, driver, x0, &mut stream)
    }
}

/// Applies `reduce` to every path and hands the results to `sink` in unit order.
///
/// A unit is one path, or one antithetic pair (whose two results are passed
/// together). Exploded paths reach `sink` as `None`.
fn for_each_unit<T, R, S>(
    def: &SphsDefinition,
    cfg: &EnsembleConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    reduce: R,
    mut sink: S,
) -> Result<()>
where
    T: Send,
    R: Fn(&Trajectory) -> Result<T> + Sync + Send,
    S: FnMut(Vec<Option<T>>),
{
    cfg.check()?;
    def.check_binding(driver)?;
    let per_unit = if cfg.antithetic { 2 } else { 1 };
    let mut start = 0;
    while start < cfg.n_paths {
        let end = (start + cfg.chunk_size * per_unit).min(cfg.n_paths);
        let results = parallel_map(cfg.execution, start..end, |i| -> Result<Option<T>> {
            let traj = simulate_member(def, cfg, law, driver, x0, i)?;
            if traj.exploded() {
                Ok(None)
            } else {
                reduce(&traj).map(Some)
            }
        });
        let mut unit = Vec::with_capacity(per_unit);
        for r in results {
            unit.push(r?);
            if unit.len() == per_unit {
                sink(std::mem::replace(&mut unit, Vec::with_capacity(per_unit)));
            }
        }
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub mean_state: Vec<DVector<f64>>,
    pub state_stderr: Vec<DVector<f64>>,
    pub mean_h: Vec<f64>,
    pub h_stderr: Vec<f64>,
    pub n_paths: usize,
    /// Samples entering the means (pairs count once when antithetic).
    pub n_samples: usize,
    pub n_exploded: usize,
    /// Terminal energy functionals per sample, in path order.
    pub samples: Vec<PathSample>,
    pub terminal_states: Vec<DVector<f64>>,
}

impl EnsembleSummary {
    pub fn fraction_exploded(&self) -> f64 {
        self.n_exploded as f64 / self.n_paths as f64
    }

    pub fn all_exploded(&self) -> bool {
        self.n_samples == 0
    }
}

struct PathRecord {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    h: Vec<f64>,
    sample: PathSample,
}

fn average_pair(a: &PathRecord, b: &PathRecord) -> PathRecord {
    let half = |x: f64, y: f64| 0.5 * (x + y);
    let pa = &a.sample.powers;
    let pb = &b.sample.powers;
    PathRecord {
        times: a.times.clone(),
        states: a.states.iter().zip(&b.states).map(|(x, y)| (x + y) * 0.5).collect(),
        h: a.h.iter().zip(&b.h).map(|(x, y)| half(*x, *y)).collect(),
        sample: PathSample {
            h0: half(a.sample.h0, b.sample.h0),
            h_final: half(a.sample.h_final, b.sample.h_final),
            powers: PortPowers {
                storage: half(pa.storage, pb.storage),
                resistive: half(pa.resistive, pb.resistive),
                control: half(pa.control, pb.control),
                noise: half(pa.noise, pb.noise),
            },
        },
    }
}

/// Runs `cfg.n_paths` trajectories and aggregates means and standard errors per recorded time.
pub fn run_ensemble(
    def: &SphsDefinition,
    cfg: &EnsembleConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
) -> Result<EnsembleSummary> {
    let n = def.dim();
    let mut times: Vec<f64> = Vec::new();
    let mut count = 0usize;
    let mut mean_x: Vec<DVector<f64>> = Vec::new();
    let mut m2_x: Vec<DVector<f64>> = Vec::new();
    let mut mean_h: Vec<f64> = Vec::new();
    let mut m2_h: Vec<f64> = Vec::new();
    let mut samples = Vec::new();
    let mut terminal_states = Vec::new();
    let mut n_exploded = 0usize;

    let reduce = |t: &Trajectory| -> Result<PathRecord> {
        Ok(PathRecord {
            times: t.times.clone(),
            states: t.states.clone(),
            h: t.hamiltonian.clone(),
            sample: PathSample::from_trajectory(t).expect("non-empty trajectory"),
        })
    };
    for_each_unit(def, cfg, law, driver, x0, reduce, |unit| {
        let exploded = unit.iter().filter(|r| r.is_none()).count();
        n_exploded += exploded;
        if exploded > 0 {
            return;
        }
        let rec = match unit.as_slice() {
            [Some(a)] => clone_record(a),
            [Some(a), Some(b)] => average_pair(a, b),
            _ => unreachable!("unit sizes are 1 or 2"),
        };
        if count == 0 {
            times = rec.times.clone();
            mean_x = vec![DVector::zeros(n); times.len()];
            m2_x = vec![DVector::zeros(n); times.len()];
            mean_h = vec![0.0; times.len()];
            m2_h = vec![0.0; times.len()];
        }
        count += 1;
        let c = count as f64;
        for k in 0..times.len() {
            let d = &rec.states[k] - &mean_x[k];
            mean_x[k] += &d / c;
            let d2 = &rec.states[k] - &mean_x[k];
            m2_x[k] += d.component_mul(&d2);
            let dh = rec.h[k] - mean_h[k];
            mean_h[k] += dh / c;
            m2_h[k] += dh * (rec.h[k] - mean_h[k]);
        }
        terminal_states.push(rec.states.last().expect("non-empty").clone());
        samples.push(rec.sample);
    })?;

    let se = |m2: f64| -> f64 {
        if count > 1 {
            (m2 / (count - 1) as f64 / count as f64).sqrt()
        } else {
            0.0
        }
    };
    Ok(EnsembleSummary {
        state_stderr: m2_x.iter().map(|m| m.map(se)).collect(),
        h_stderr: m2_h.iter().map(|&m| se(m)).collect(),
        times,
        mean_state: mean_x,
        mean_h,
        n_paths: cfg.n_paths,
        n_samples: count,
        n_exploded,
        samples,
        terminal_states,
    })
}

fn clone_record(r: &PathRecord) -> PathRecord {
    PathRecord {
        times: r.times.clone(),
        states: r.states.clone(),
        h: r.h.clone(),
        sample: r.sample,
    }
}

/// Mean path of a linear system, integrated from its Itô drift.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanReference {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

/// Integrates `x' = A x + b`, with `A`, `b` read off the Itô drift, by classical
/// RK4 at `dt / 10`, sampled at the integrator's record times.
///
/// Fails with [`SphsError::Nonlinear`] when the drift is not affine on probe points.
pub fn mean_ode_reference(
    def: &SphsDefinition,
    driver: &DriverSpec,
    law: &ControlLaw,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<MeanReference> {
    cfg.check()?;
    let n = def.dim();
    if x0.len() != n {
        return Err(SphsError::dim("initial state", n, x0.len()));
    }
    if matches!(law, ControlLaw::Custom(_)) {
        return Err(SphsError::Nonlinear(
            "custom control laws have no closed mean equation".into(),
        ));
    }
    let f = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let u = law.evaluate(def, 0.0, x)?;
        ito_drift(def, x, &u, driver, &cfg.correction)
    };
    let b = f(&DVector::zeros(n))?;
    let mut a = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        let e = DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 });
        a.set_column(i, &(f(&e)? - &b));
    }
    let mut stream = RandomStream::new(0x5eed, 0);
    for _ in 0..8 {
        let mut x = DVector::zeros(n);
        stream.fill_normal(x.as_mut_slice());
        x *= 2.0;
        let exact = f(&x)?;
        let lin = &a * &x + &b;
        if (&exact - &lin).norm() > 1e-6 * (1.0 + exact.norm()) {
            return Err(SphsError::Nonlinear(format!(
                "drift of {} is not affine (defect {:e} at a probe point)",
                def.name(),
                (&exact - &lin).norm()
            )));
        }
    }

    let h = cfg.dt / 10.0;
    let rhs = |x: &DVector<f64>| &a * x + &b;
    let n_steps = cfg.n_steps();
    let mut x = x0.clone();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    for k in 0..n_steps {
        for _ in 0..10 {
            let k1 = rhs(&x);
            let k2 = rhs(&(&x + &k1 * (0.5 * h)));
            let k3 = rhs(&(&x + &k2 * (0.5 * h)));
            let k4 = rhs(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        if (k + 1) % cfg.record_every == 0 || k + 1 == n_steps {
            times.push((k + 1) as f64 * cfg.dt);
            states.push(x.clone());
        }
    }
    Ok(MeanReference { times, states })
}

/// `E[phi(X_T)] - phi(x_0) - sum_k E[L phi(x_k)] dt` with its Monte Carlo error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynkinReport {
    /// Signed residual, estimated from per-path differences.
    pub residual: f64,
    pub stderr: f64,
    /// `Z95 * stderr`
    pub ci_half: f64,
    pub mean_phi_final: f64,
    pub phi0: f64,
    pub mean_generator_integral: f64,
    pub n_samples: usize,
    pub n_exploded: usize,
}

impl DynkinReport {
    /// Zero lies in the 95% interval.
    pub fn within_ci(&self) -> bool {
        self.residual.abs() <= self.ci_half
    }
}

#[derive(Debug, Clone, Copy)]
struct DynkinPath {
    phi_final: f64,
    integral: f64,
}

fn dynkin_path(
    def: &SphsDefinition,
    driver: &DriverSpec,
    cfg: &IntegratorConfig,
    observable: &ScalarField,
    traj: &Trajectory,
) -> Result<DynkinPath> {
    let mut integral = 0.0;
    for k in 0..traj.len() - 1 {
        let dt = traj.times[k + 1] - traj.times[k];
        integral += generator_apply(
            def,
            observable,
            &traj.states[k],
            &traj.controls[k],
            driver,
            &cfg.correction,
        )? * dt;
    }
    Ok(DynkinPath {
        phi_final: observable.value(traj.final_state()),
        integral,
    })
}

fn finish_dynkin(phi0: f64, paths: &[DynkinPath], n_exploded: usize) -> DynkinReport {
    let n = paths.len();
    let d = paths.iter().map(|p| p.phi_final - phi0 - p.integral);
    let (residual, stderr) = mean_stderr(d);
    let stderr = if stderr.is_nan() { 0.0 } else { stderr };
    DynkinReport {
        residual,
        stderr,
        ci_half: Z95 * stderr,
        mean_phi_final: paths.iter().map(|p| p.phi_final).sum::<f64>() / n as f64,
        phi0,
        mean_generator_integral: paths.iter().map(|p| p.integral).sum::<f64>() / n as f64,
        n_samples: n,
        n_exploded,
    }
}

fn pair_mean(unit: &[Option<DynkinPath>]) -> Option<DynkinPath> {
    let items: Option<Vec<DynkinPath>> = unit.iter().copied().collect();
    let items = items?;
    let m = items.len() as f64;
    Some(DynkinPath {
        phi_final: items.iter().map(|p| p.phi_final).sum::<f64>() / m,
        integral: items.iter().map(|p| p.integral).sum::<f64>() / m,
    })
}

/// Dynkin residual of `observable` over an ensemble (the generator is sampled every step).
pub fn dynkin_residual(
    def: &SphsDefinition,
    cfg: &EnsembleConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    observable: &ScalarField,
) -> Result<DynkinReport> {
    let mut cfg = *cfg;
    cfg.integrator.record_every = 1;
    let ic = cfg.integrator;
    let mut paths = Vec::with_capacity(cfg.n_units());
    let mut n_exploded = 0;
    for_each_unit(
        def,
        &cfg,
        law,
        driver,
        x0,
        |t| dynkin_path(def, driver, &ic, observable, t),
        |unit| {
            n_exploded += unit.iter().filter(|u| u.is_none()).count();
            if let Some(p) = pair_mean(&unit) {
                paths.push(p);
            }
        },
    )?;
    if paths.is_empty() {
        return Err(SphsError::Precondition("every path exploded".into()));
    }
    Ok(finish_dynkin(observable.value(x0), &paths, n_exploded))
}

/// Dynkin residuals at `dt` and `2 dt` on shared Wiener paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLevelDynkin {
    pub fine: DynkinReport,
    pub coarse: DynkinReport,
    /// `2 D(dt) - D(2 dt)`, removing the first-order discretization bias.
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
}

impl TwoLevelDynkin {
    /// `|D(2 dt)| / |D(dt)|`
    pub fn ratio(&self) -> f64 {
        self.coarse.residual.abs() / self.fine.residual.abs()
    }

    pub fn extrapolated_within_ci(&self) -> bool {
        self.extrapolated.abs() <= Z95 * self.extrapolated_stderr
    }
}

pub fn dynkin_two_level(
    def: &SphsDefinition,
    cfg: &EnsembleConfig,
    law: &ControlLaw,
    driver: &DriverSpec,
    x0: &DVector<f64>,
    observable: &ScalarField,
) -> Result<TwoLevelDynkin> {
    cfg.check()?;
    def.check_binding(driver)?;
    if cfg.antithetic {
        return Err(SphsError::param("antithetic", "not supported for two-level runs"));
    }
    let mut fine_cfg = cfg.integrator;
    fine_cfg.record_every = 1;
    if !fine_cfg.n_steps().is_multiple_of(2) {
        return Err(SphsError::param("dt", "fine step count must be even"));
    }
    let mut coarse_cfg = fine_cfg;
    coarse_cfg.dt *= 2.0;
    let n_steps = fine_cfg.n_steps();
    let results = {
        let mut out: Vec<Result<Option<(DynkinPath, DynkinPath)>>> = Vec::with_capacity(cfg.n_paths);
        let mut start = 0;
        while start < cfg.n_paths {
            let end = (start + cfg.chunk_size).min(cfg.n_paths);
            out.extend(parallel_map(cfg.execution, start..end, |i| {
                let mut stream = RandomStream::new(cfg.master_seed, i as u64);
                let w: WienerPath = driver.sample_wiener(fine_cfg.dt, n_steps, &mut stream)?;
                let tf = simulate_on_path(def, &fine_cfg, law, driver, x0, &w)?;
                let tc = simulate_on_path(def, &coarse_cfg, law, driver, x0, &w.coarsen(2)?)?;
                if tf.exploded() || tc.exploded() {
                    return Ok(None);
                }
                Ok(Some((
                    dynkin_path(def, driver, &fine_cfg, observable, &tf)?,
                    dynkin_path(def, driver, &coarse_cfg, observable, &tc)?,
                )))
            }));
            start = end;
        }
        out
    };
    let mut fine = Vec::new();
    let mut coarse = Vec::new();
    let mut n_exploded = 0;
    for r in results {
        match r? {
            Some((f, c)) => {
                fine.push(f);
                coarse.push(c);
            }
            None => n_exploded += 1,
        }
    }
    if fine.is_empty() {
        return Err(SphsError::Precondition("every path exploded".into()));
    }
    let phi0 = observable.value(x0);
    let extrap = fine
        .iter()
        .zip(&coarse)
        .map(|(f, c)| 2.0 * (f.phi_final - phi0 - f.integral) - (c.phi_final - phi0 - c.integral));
    let (extrapolated, se) = mean_stderr(extrap);
    Ok(TwoLevelDynkin {
        fine: finish_dynkin(phi0, &fine, n_exploded),
        coarse: finish_dynkin(phi0, &coarse, n_exploded),
        extrapolated,
        extrapolated_stderr: if se.is_nan() { 0.0 } else { se },
    })
}
