//! Subcommand execution. Every command returns a JSON summary and whether its
//! verdict held; artifacts go to the output directory.

use crate::config::{build_setup, build_structure, format_matrix_text, ConfigError, ExperimentConfig};
use nalgebra::DVector;
use serde_json::{json, Value};
use sphs::dirac::{DiracSubspace, DiracVerdict, RankTolerance};
use sphs::drivers::RandomStream;
use sphs::energy::{
    balance_audit, rate_integral_along, strong_passivity_check, weak_passivity_estimate, Classification, PathSample,
};
use sphs::ensemble::{
    dynkin_residual, dynkin_two_level, mean_ode_reference, run_ensemble, simulate_member, EnsembleConfig, Execution,
};
use sphs::fields::ScalarField;
use sphs::integrators::PortPowers;
use sphs::models::{self, ModelSetup};
use sphs::system::validate;
use sphs::SphsError;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Run(SphsError),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<SphsError> for CliError {
    fn from(e: SphsError) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Mean,
    EnergyAudit,
    Passivity,
    Dynkin,
    DiracCheck,
    DiracCompose,
    Interconnect,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Mean => "mean",
            Command::EnergyAudit => "energy_audit",
            Command::Passivity => "passivity",
            Command::Dynkin => "dynkin",
            Command::DiracCheck => "dirac_check",
            Command::DiracCompose => "dirac_compose",
            Command::Interconnect => "interconnect",
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub summary: Value,
    pub passed: bool,
    pub artifacts: Vec<PathBuf>,
}

/// Runs `cmd` and writes its JSON summary (plus any CSV) below `cfg.outputs.dir`.
pub fn run_subcommand(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let dir = PathBuf::from(&cfg.outputs.dir);
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join(cfg.outputs.csv.clone().unwrap_or_else(|| format!("{}.csv", cmd.name())));
    let json_path = dir.join(
        cfg.outputs
            .json
            .clone()
            .unwrap_or_else(|| format!("{}.json", cmd.name())),
    );
    let mut artifacts = Vec::new();
    let (body, passed) = match cmd {
        Command::Simulate => simulate(cfg, &csv_path, &mut artifacts)?,
        Command::Mean => mean(cfg, &csv_path, &mut artifacts)?,
        Command::EnergyAudit => energy_audit(cfg)?,
        Command::Passivity => passivity(cfg)?,
        Command::Dynkin => dynkin(cfg)?,
        Command::DiracCheck => dirac_check(cfg, &dir, &mut artifacts)?,
        Command::DiracCompose => dirac_compose(cfg, &dir, &mut artifacts)?,
        Command::Interconnect => interconnect(cfg, &csv_path, &mut artifacts)?,
    };
    let mut summary = body;
    summary["command"] = json!(cmd.name());
    summary["passed"] = json!(passed);
    write_json(&json_path, &summary)?;
    artifacts.push(json_path);
    Ok(Outcome {
        summary,
        passed,
        artifacts,
    })
}

pub fn to_json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    fs::write(path, to_json_text(v))
}

/// Schema of the model catalog.
pub fn list_models() -> Value {
    let entries: Vec<Value> = models::catalog()
        .iter()
        .map(|e| {
            json!({
                "name": e.name,
                "summary": e.summary,
                "state": e.state,
                "probe_domain": e.domain,
                "params": e.params.iter().map(|p| json!({
                    "name": p.name, "unit": p.unit, "default": p.default, "doc": p.doc
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({ "models": entries })
}

fn seed_for(cfg: &ExperimentConfig, setup: &ModelSetup) -> Result<u64, CliError> {
    match cfg.seed {
        Some(s) => Ok(s),
        None if !setup.def.is_stochastic_under(&setup.driver) => Ok(0),
        None => Err(ConfigError::block(
            "seed",
            "a seed is required for stochastic runs (config `seed` or --seed)",
        )
        .into()),
    }
}

fn ensemble_config(cfg: &ExperimentConfig, seed: u64) -> Result<EnsembleConfig, CliError> {
    let mut e = EnsembleConfig::new(cfg.ensemble.n_paths, seed, cfg.integrator_config()?);
    e.antithetic = cfg.ensemble.antithetic;
    e.chunk_size = cfg.ensemble.chunk_size;
    e.execution = if cfg.ensemble.execution == "sequential" {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    e.check()?;
    Ok(e)
}

fn powers_json(p: &PortPowers) -> Value {
    json!({ "storage": p.storage, "resistive": p.resistive, "control": p.control, "noise": p.noise })
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn system_name(cfg: &ExperimentConfig) -> String {
    cfg.system
        .as_ref()
        .and_then(|s| s.model.clone())
        .unwrap_or_else(|| "inline".into())
}

fn run_header(cfg: &ExperimentConfig, seed: u64) -> Value {
    json!({
        "system": system_name(cfg),
        "scheme": cfg.integrator.scheme,
        "dt": cfg.integrator.dt,
        "t_end": cfg.integrator.t_end,
        "seed": seed,
    })
}

fn merge(mut a: Value, b: Value) -> Value {
    if let (Some(ma), Value::Object(mb)) = (a.as_object_mut(), b) {
        ma.extend(mb);
    }
    a
}

fn simulate(cfg: &ExperimentConfig, csv: &Path, artifacts: &mut Vec<PathBuf>) -> Result<(Value, bool), CliError> {
    let s = cfg.setup()?;
    let seed = seed_for(cfg, &s)?;
    let ec = ensemble_config(cfg, seed)?;
    let traj = simulate_member(&s.def, &ec, &s.control, &s.driver, &s.x0, 0)?;
    traj.write_csv(fs::File::create(csv)?)?;
    artifacts.push(csv.to_path_buf());
    let body = json!({
        "n_records": traj.len(),
        "h0": traj.hamiltonian[0],
        "h_final": traj.hamiltonian.last(),
        "final_state": vec_json(traj.final_state()),
        "exploded": traj.exploded(),
        "exploded_at_step": traj.exploded_at,
        "port_powers": powers_json(traj.powers.last().expect("nonempty trajectory")),
    });
    Ok((merge(run_header(cfg, seed), body), true))
}

fn mean(cfg: &ExperimentConfig, csv: &Path, artifacts: &mut Vec<PathBuf>) -> Result<(Value, bool), CliError> {
    let s = cfg.setup()?;
    let seed = seed_for(cfg, &s)?;
    let ec = ensemble_config(cfg, seed)?;
    let sum = run_ensemble(&s.def, &ec, &s.control, &s.driver, &s.x0)?;
    let reference = match mean_ode_reference(&s.def, &s.driver, &s.control, &s.x0, &ec.integrator) {
        Ok(r) => Some(r),
        Err(SphsError::Nonlinear(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let names = cfg.state_names();
    let n = s.def.dim();
    let mut text = String::from("t");
    for prefix in ["mean", "se"] {
        for name in &names {
            text.push_str(&format!(",{prefix}_{name}"));
        }
    }
    text.push_str(",mean_H,se_H");
    if reference.is_some() {
        for name in &names {
            text.push_str(&format!(",ref_{name}"));
        }
    }
    text.push('\n');
    let mut max_z: f64 = 0.0;
    for (k, t) in sum.times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(sum.mean_state[k].iter());
        row.extend(sum.state_stderr[k].iter());
        row.push(sum.mean_h[k]);
        row.push(sum.h_stderr[k]);
        if let Some(r) = &reference {
            row.extend(r.states[k].iter());
            for i in 0..n {
                let diff = (sum.mean_state[k][i] - r.states[k][i]).abs();
                let se = sum.state_stderr[k][i];
                let z = if se > 0.0 {
                    diff / se
                } else if diff <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                max_z = max_z.max(z);
            }
        }
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(csv, text)?;
    artifacts.push(csv.to_path_buf());
    let last = sum.times.len().saturating_sub(1);
    let within = reference.as_ref().map(|_| max_z <= 3.0);
    let body = json!({
        "n_paths": sum.n_paths,
        "n_samples": sum.n_samples,
        "n_exploded": sum.n_exploded,
        "final_time": sum.times.get(last),
        "final_mean": sum.mean_state.get(last).map(vec_json),
        "final_stderr": sum.state_stderr.get(last).map(vec_json),
        "final_mean_h": sum.mean_h.get(last),
        "final_h_stderr": sum.h_stderr.get(last),
        "reference_final": reference.as_ref().and_then(|r| r.states.last()).map(vec_json),
        "max_reference_z": reference.as_ref().map(|_| max_z),
        "within_3se": within,
    });
    let passed = !sum.all_exploded() && within.unwrap_or(true);
    Ok((merge(run_header(cfg, seed), body), passed))
}

fn energy_audit(cfg: &ExperimentConfig) -> Result<(Value, bool), CliError> {
    let s = cfg.setup()?;
    let seed = seed_for(cfg, &s)?;
    let ec = ensemble_config(cfg, seed)?;
    let traj = simulate_member(&s.def, &ec, &s.control, &s.driver, &s.x0, 0)?;
    let rep = balance_audit(&traj)?;
    let v = strong_passivity_check(&traj, cfg.passivity.tol)?;
    let closed = rep.max_residual <= cfg.audit.tol;
    let body = json!({
        "delta_h": rep.delta_h,
        "port_powers": powers_json(&rep.powers),
        "residual": rep.residual,
        "max_residual": rep.max_residual,
        "balance_tol": cfg.audit.tol,
        "balance_closed": closed,
        "truncated": rep.truncated,
        "verdict": v.classification.name(),
        "margin": v.margin,
        "stderr": v.stderr,
        "n_paths": 1,
    });
    Ok((merge(run_header(cfg, seed), body), closed))
}

fn mean_of(samples: &[PathSample], f: impl Fn(&PathSample) -> f64) -> f64 {
    samples.iter().map(f).sum::<f64>() / samples.len().max(1) as f64
}

fn passivity(cfg: &ExperimentConfig) -> Result<(Value, bool), CliError> {
    let s = cfg.setup()?;
    let seed = seed_for(cfg, &s)?;
    let ec = ensemble_config(cfg, seed)?;
    let tol = cfg.passivity.tol;
    let (mut body, verdict) = if cfg.passivity.mode == "strong" {
        let mut samples = Vec::new();
        let mut worst = (f64::INFINITY, 0usize);
        let mut violations = 0usize;
        for i in 0..ec.n_paths {
            let traj = simulate_member(&s.def, &ec, &s.control, &s.driver, &s.x0, i)?;
            let v = strong_passivity_check(&traj, tol)?;
            if v.classification == Classification::Violated {
                violations += 1;
            }
            if v.margin < worst.0 {
                worst = (v.margin, i);
            }
            samples.extend(PathSample::from_trajectory(&traj));
        }
        let verdict = if violations > 0 {
            Classification::Violated
        } else {
            Classification::Passive
        };
        let body = json!({
            "mode": "strong",
            "margin": worst.0,
            "worst_path": worst.1,
            "stderr": 0.0,
            "n_paths": ec.n_paths,
            "n_violations": violations,
            "samples": samples.len(),
        });
        (merge(body, balance_means(&samples)), verdict)
    } else {
        let sum = run_ensemble(&s.def, &ec, &s.control, &s.driver, &s.x0)?;
        let w = weak_passivity_estimate(&sum.samples, tol)?;
        let along = rate_integral_along(
            &s.def,
            &s.driver,
            &ec.integrator.correction,
            &sum.times,
            &sum.mean_state,
        )?;
        let body = json!({
            "mode": "weak",
            "margin": w.margin,
            "stderr": w.stderr,
            "n_paths": w.n_paths,
            "n_exploded": sum.n_exploded,
            "rate_integral_along_mean": along,
        });
        (merge(body, balance_means(&sum.samples)), w.classification)
    };
    body["verdict"] = json!(verdict.name());
    body["tol"] = json!(tol);
    Ok((merge(run_header(cfg, seed), body), verdict != Classification::Violated))
}

fn balance_means(samples: &[PathSample]) -> Value {
    let p = PortPowers {
        storage: mean_of(samples, |s| s.powers.storage),
        resistive: mean_of(samples, |s| s.powers.resistive),
        control: mean_of(samples, |s| s.powers.control),
        noise: mean_of(samples, |s| s.powers.noise),
    };
    let delta_h = mean_of(samples, |s| s.h_final - s.h0);
    json!({
        "delta_h": delta_h,
        "port_powers": powers_json(&p),
        "residual": mean_of(samples, |s| s.h_final - s.h0 - s.powers.total()),
    })
}

fn dynkin(cfg: &ExperimentConfig) -> Result<(Value, bool), CliError> {
    let s = cfg.setup()?;
    let seed = seed_for(cfg, &s)?;
    let ec = ensemble_config(cfg, seed)?;
    let phi = match cfg.dynkin.observable.as_str() {
        "half_norm_squared" => ScalarField::quadratic(nalgebra::DMatrix::identity(s.def.dim(), s.def.dim())),
        _ => s.def.hamiltonian().clone(),
    };
    let (rep, two) = if cfg.dynkin.two_level {
        let t = dynkin_two_level(&s.def, &ec, &s.control, &s.driver, &s.x0, &phi)?;
        let extra = json!({
            "coarse_residual": t.coarse.residual,
            "coarse_stderr": t.coarse.stderr,
            "ratio": t.ratio(),
            "extrapolated": t.extrapolated,
            "extrapolated_stderr": t.extrapolated_stderr,
            "extrapolated_within_ci": t.extrapolated_within_ci(),
        });
        (t.fine, Some(extra))
    } else {
        (dynkin_residual(&s.def, &ec, &s.control, &s.driver, &s.x0, &phi)?, None)
    };
    let mut body = json!({
        "observable": cfg.dynkin.observable,
        "residual": rep.residual,
        "stderr": rep.stderr,
        "ci_half": rep.ci_half,
        "within_ci": rep.within_ci(),
        "mean_phi_final": rep.mean_phi_final,
        "phi0": rep.phi0,
        "mean_generator_integral": rep.mean_generator_integral,
        "n_samples": rep.n_samples,
        "n_exploded": rep.n_exploded,
    });
    if let Some(t) = two {
        body["two_level"] = t;
    }
    Ok((merge(run_header(cfg, seed), body), rep.within_ci()))
}

fn verdict_json(d: &DiracSubspace, v: &DiracVerdict, tol: f64) -> Value {
    json!({
        "is_dirac": v.is_dirac,
        "dimension": v.dimension,
        "expected_dimension": v.expected_dimension,
        "isotropy_residual": v.isotropy_residual,
        "normalized_residual": v.normalized_residual,
        "tol": tol,
        "ports": d.layout().blocks().iter().map(|(n, w)| json!({"name": n, "width": w})).collect::<Vec<_>>(),
    })
}

fn write_basis(dir: &Path, name: &str, d: &DiracSubspace, artifacts: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = dir.join(format!("{name}_basis.txt"));
    fs::write(&path, format_matrix_text(d.basis()))?;
    artifacts.push(path);
    Ok(())
}

fn dirac_block(cfg: &ExperimentConfig) -> Result<&crate::config::DiracBlock, CliError> {
    cfg.dirac
        .as_ref()
        .ok_or_else(|| ConfigError::block("dirac", "this subcommand needs a [dirac] block").into())
}

fn dirac_check(cfg: &ExperimentConfig, dir: &Path, artifacts: &mut Vec<PathBuf>) -> Result<(Value, bool), CliError> {
    let b = dirac_block(cfg)?;
    let d = build_structure("dirac.structure", &b.structure)?;
    let v = d.is_dirac(b.tol);
    write_basis(dir, "dirac_check", &d, artifacts)?;
    Ok((verdict_json(&d, &v, b.tol), v.is_dirac || !b.expect_dirac))
}

fn dirac_compose(cfg: &ExperimentConfig, dir: &Path, artifacts: &mut Vec<PathBuf>) -> Result<(Value, bool), CliError> {
    let b = dirac_block(cfg)?;
    let a = build_structure("dirac.structure", &b.structure)?;
    let o = b
        .other
        .as_ref()
        .ok_or_else(|| ConfigError::block("dirac", "compose needs a [dirac.other] structure"))?;
    let o = build_structure("dirac.other", o)?;
    let c = a
        .compose_with(&o, &b.shared, RankTolerance::default())
        .map_err(|e| ConfigError::block("dirac", e))?;
    let v = c.is_dirac(b.tol);
    write_basis(dir, "dirac_compose", &c, artifacts)?;
    let mut body = verdict_json(&c, &v, b.tol);
    body["shared"] = json!(b.shared);
    Ok((body, v.is_dirac || !b.expect_dirac))
}

fn interconnect(cfg: &ExperimentConfig, csv: &Path, artifacts: &mut Vec<PathBuf>) -> Result<(Value, bool), CliError> {
    let ic = cfg
        .interconnect
        .as_ref()
        .ok_or_else(|| ConfigError::block("interconnect", "this subcommand needs an [interconnect] block"))?;
    let a = cfg.setup()?;
    let b = build_setup("interconnect.system", &ic.system, ic.driver.as_ref(), None)?;
    let c = ModelSetup::interconnect(&a, &b).map_err(|e| ConfigError::block("interconnect", e))?;
    let seed = seed_for(cfg, &c)?;
    let ec = ensemble_config(cfg, seed)?;
    let mut probe_rng = RandomStream::new(seed, u64::MAX);
    let n = c.def.dim();
    let probes: Vec<DVector<f64>> = (0..32)
        .map(|_| DVector::from_fn(n, |_, _| 2.0 * probe_rng.standard_normal()))
        .collect();
    let val = validate(&c.def, &probes, 1e-10)?;
    let mut worst = (0.0f64, 0usize);
    let mut n_exploded = 0usize;
    for i in 0..ec.n_paths {
        let traj = simulate_member(&c.def, &ec, &c.control, &c.driver, &c.x0, i)?;
        if i == 0 {
            traj.write_csv(fs::File::create(csv)?)?;
            artifacts.push(csv.to_path_buf());
        }
        let h0 = traj.hamiltonian[0];
        let mut drift = traj.hamiltonian.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max);
        if traj.exploded() {
            n_exploded += 1;
            drift = f64::INFINITY;
        }
        if drift > worst.0 || i == 0 {
            worst = (drift, i);
        }
    }
    let conserved = worst.0 <= ic.tol;
    let body = json!({
        "dim": n,
        "validate": {
            "passed": val.passed,
            "skew_residual": val.skew_residual,
            "symmetry_residual": val.symmetry_residual,
            "min_r_eigenvalue": val.min_r_eigenvalue,
            "power_residual": val.power_residual,
        },
        "n_paths": ec.n_paths,
        "n_exploded": n_exploded,
        "max_energy_drift": if worst.0.is_finite() { json!(worst.0) } else { Value::Null },
        "worst_path": worst.1,
        "tol": ic.tol,
        "conserved": conserved,
        "drivers": c.driver.names(),
    });
    Ok((merge(run_header(cfg, seed), body), val.passed && conserved))
}
