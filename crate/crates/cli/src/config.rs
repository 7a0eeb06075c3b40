//! Experiment configuration: a TOML document with strict keys.
//!
//! Matrices are written either as arrays of rows or as a text block with one
//! row per line and whitespace-separated entries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sphs::dirac::DiracSubspace;
use sphs::drivers::DriverSpec;
use sphs::fields::{MatrixField, ScalarField};
use sphs::integrators::{IntegratorConfig, Scheme};
use sphs::models::{self, ModelSetup};
use sphs::system::{ControlLaw, SphsDefinition};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug)]
pub enum ConfigError {
    Parse(String),
    Block { block: String, message: String },
}

impl ConfigError {
    pub fn block(block: &str, message: impl fmt::Display) -> Self {
        ConfigError::Block {
            block: block.to_string(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Block { block, message } => write!(f, "[{block}] {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Text(String),
}

impl MatrixSpec {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    pub fn to_matrix(&self, block: &str, what: &str) -> ConfigResult<DMatrix<f64>> {
        let rows: Vec<Vec<f64>> = match self {
            MatrixSpec::Rows(r) => r.clone(),
            MatrixSpec::Text(t) => {
                parse_matrix_text(t).map_err(|e| ConfigError::block(block, format!("{what}: {e}")))?
            }
        };
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(ConfigError::block(
                block,
                format!("{what}: rows have different lengths"),
            ));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ConfigError::block(block, format!("{what}: entries must be finite")));
        }
        Ok(DMatrix::from_row_iterator(
            rows.len(),
            ncols,
            rows.into_iter().flatten(),
        ))
    }
}

/// Row-major, whitespace separated, one row per non-empty line.
pub fn parse_matrix_text(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
                .collect()
        })
        .collect()
}

pub fn format_matrix_text(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in m.row_iter() {
        let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Catalog model name; inline matrices are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "J")]
    pub j: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "R")]
    pub r: Option<MatrixSpec>,
    /// `H = x^T Q x / 2`
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "Q")]
    pub q: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dissipative: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_driver: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_drivers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_drivers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub name: String,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub loadings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig {
    pub n_wieners: usize,
    pub components: Vec<ComponentConfig>,
}

impl DriverConfig {
    pub fn from_spec(d: &DriverSpec) -> Self {
        let comps = (0..d.n_components())
            .map(|i| ComponentConfig {
                name: d.names()[i].clone(),
                drift: d.drift()[i],
                loadings: d.loadings().row(i).iter().copied().collect(),
            })
            .collect();
        DriverConfig {
            n_wieners: d.n_wieners(),
            components: comps,
        }
    }

    pub fn to_spec(&self, block: &str) -> ConfigResult<DriverSpec> {
        let mut d = DriverSpec::empty(self.n_wieners);
        for c in &self.components {
            let mut loadings = c.loadings.clone();
            if loadings.is_empty() {
                loadings = vec![0.0; self.n_wieners];
            }
            d = d
                .with_component(&c.name, c.drift, &loadings)
                .map_err(|e| ConfigError::block(block, e))?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    Zero,
    Constant {
        u: Vec<f64>,
    },
    /// `u = -K y`
    Feedback {
        k: MatrixSpec,
    },
}

impl ControlConfig {
    fn from_law(law: &ControlLaw) -> Option<Self> {
        match law {
            ControlLaw::Zero => Some(ControlConfig::Zero),
            ControlLaw::Constant(u) => Some(ControlConfig::Constant {
                u: u.iter().copied().collect(),
            }),
            ControlLaw::OutputFeedback(k) => Some(ControlConfig::Feedback {
                k: MatrixSpec::from_matrix(k),
            }),
            ControlLaw::Custom(_) => None,
        }
    }

    pub fn to_law(&self) -> ConfigResult<ControlLaw> {
        Ok(match self {
            ControlConfig::Zero => ControlLaw::Zero,
            ControlConfig::Constant { u } => ControlLaw::Constant(DVector::from_column_slice(u)),
            ControlConfig::Feedback { k } => ControlLaw::OutputFeedback(k.to_matrix("control", "k")?),
        })
    }
}

fn default_scheme() -> String {
    Scheme::default().name().to_string()
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_end() -> f64 {
    1.0
}
fn default_blowup() -> f64 {
    1e8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorBlock {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_blowup")]
    pub blowup_threshold: f64,
}

impl Default for IntegratorBlock {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            dt: default_dt(),
            t_end: default_t_end(),
            blowup_threshold: default_blowup(),
        }
    }
}

fn default_paths() -> usize {
    1000
}
fn default_execution() -> String {
    "parallel".into()
}
fn default_chunk() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub antithetic: bool,
    /// `parallel` or `sequential`
    #[serde(default = "default_execution")]
    pub execution: String,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            antithetic: false,
            execution: default_execution(),
            chunk_size: default_chunk(),
        }
    }
}

fn default_dir() -> String {
    ".".into()
}
fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsBlock {
    #[serde(default = "default_dir")]
    pub dir: String,
    /// File names inside `dir`; default to the subcommand name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<String>,
    /// Record every `stride`-th step in trajectories and mean paths.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for OutputsBlock {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            csv: None,
            json: None,
            stride: default_stride(),
        }
    }
}

fn default_mode() -> String {
    "weak".into()
}
fn default_passivity_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassivityBlock {
    /// `weak` (ensemble mean) or `strong` (every path)
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_passivity_tol")]
    pub tol: f64,
}

impl Default for PassivityBlock {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            tol: default_passivity_tol(),
        }
    }
}

fn default_audit_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditBlock {
    /// Largest accepted balance residual.
    #[serde(default = "default_audit_tol")]
    pub tol: f64,
}

impl Default for AuditBlock {
    fn default() -> Self {
        Self {
            tol: default_audit_tol(),
        }
    }
}

fn default_observable() -> String {
    "hamiltonian".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynkinBlock {
    /// `hamiltonian` or `half_norm_squared`
    #[serde(default = "default_observable")]
    pub observable: String,
    /// Also run at `2 dt` on the same paths and report the extrapolated residual.
    #[serde(default)]
    pub two_level: bool,
}

impl Default for DynkinBlock {
    fn default() -> Self {
        Self {
            observable: default_observable(),
            two_level: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    /// `graph`, `kernel`, `explicit` or `wire`
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "J")]
    pub j: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "F")]
    pub f: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "E")]
    pub e: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_r: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_c: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_n: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    /// Prefix for port names, except those in `keep`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keep: Vec<String>,
}

fn default_dirac_tol() -> f64 {
    1e-10
}
fn default_true() -> bool {
    true
}
fn default_shared() -> String {
    "control".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiracBlock {
    #[serde(default = "default_dirac_tol")]
    pub tol: f64,
    /// A failed verdict exits with status 1.
    #[serde(default = "default_true")]
    pub expect_dirac: bool,
    #[serde(default = "default_shared")]
    pub shared: String,
    pub structure: StructureConfig,
    /// Second operand of `dirac compose`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<StructureConfig>,
}

fn default_interconnect_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterconnectBlock {
    pub system: SystemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverConfig>,
    /// Largest accepted `max_t |H - H_0|` over paths.
    #[serde(default = "default_interconnect_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub integrator: IntegratorBlock,
    #[serde(default)]
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub outputs: OutputsBlock,
    #[serde(default)]
    pub passivity: PassivityBlock,
    #[serde(default)]
    pub audit: AuditBlock,
    #[serde(default)]
    pub dynkin: DynkinBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirac: Option<DiracBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interconnect: Option<InterconnectBlock>,
}

/// Parses and resolves a configuration: defaults are filled in, systems and
/// structures are built once to surface errors early.
pub fn parse_config(text: &str) -> ConfigResult<ExperimentConfig> {
    let raw: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    raw.resolved()
}

/// Serializes a configuration so that [`parse_config`] reads it back unchanged.
pub fn emit_config(cfg: &ExperimentConfig) -> ConfigResult<String> {
    toml::to_string(cfg).map_err(|e| ConfigError::Parse(e.to_string()))
}

impl ExperimentConfig {
    pub fn resolved(mut self) -> ConfigResult<Self> {
        let scheme = Scheme::from_name(&self.integrator.scheme)
            .ok_or_else(|| ConfigError::block("integrator", format!("unknown scheme {:?}", self.integrator.scheme)))?;
        self.integrator.scheme = scheme.name().to_string();
        if !matches!(self.ensemble.execution.as_str(), "parallel" | "sequential") {
            return Err(ConfigError::block(
                "ensemble",
                format!(
                    "execution must be parallel or sequential, got {:?}",
                    self.ensemble.execution
                ),
            ));
        }
        if !matches!(self.passivity.mode.as_str(), "weak" | "strong") {
            return Err(ConfigError::block(
                "passivity",
                format!("mode must be weak or strong, got {:?}", self.passivity.mode),
            ));
        }
        if !matches!(self.dynkin.observable.as_str(), "hamiltonian" | "half_norm_squared") {
            return Err(ConfigError::block(
                "dynkin",
                format!("unknown observable {:?}", self.dynkin.observable),
            ));
        }
        self.integrator_config()?
            .check()
            .map_err(|e| ConfigError::block("integrator", e))?;
        if self.outputs.stride == 0 {
            return Err(ConfigError::block("outputs", "stride must be positive"));
        }
        if let Some(sys) = self.system.take() {
            let (sys, driver, control) = resolve_system("system", sys, self.driver.take(), self.control.take())?;
            self.system = Some(sys);
            self.driver = Some(driver);
            self.control = Some(control);
        } else if self.driver.is_some() || self.control.is_some() {
            return Err(ConfigError::block(
                "system",
                "driver and control blocks need a system block",
            ));
        }
        if let Some(mut ic) = self.interconnect.take() {
            if self.system.is_none() {
                return Err(ConfigError::block(
                    "interconnect",
                    "needs a [system] block for the first subsystem",
                ));
            }
            let (sys, driver, _) = resolve_system("interconnect.system", ic.system, ic.driver.take(), None)?;
            ic.system = sys;
            ic.driver = Some(driver);
            self.interconnect = Some(ic);
        }
        if let Some(d) = &self.dirac {
            build_structure("dirac.structure", &d.structure)?;
            if let Some(o) = &d.other {
                build_structure("dirac.other", o)?;
            }
        }
        Ok(self)
    }

    pub fn integrator_config(&self) -> ConfigResult<IntegratorConfig> {
        let scheme = Scheme::from_name(&self.integrator.scheme)
            .ok_or_else(|| ConfigError::block("integrator", format!("unknown scheme {:?}", self.integrator.scheme)))?;
        Ok(IntegratorConfig::new(scheme, self.integrator.dt, self.integrator.t_end)
            .with_blowup_threshold(self.integrator.blowup_threshold)
            .with_record_every(self.outputs.stride))
    }

    /// The resolved first system with its driver, control law and initial state.
    pub fn setup(&self) -> ConfigResult<ModelSetup> {
        let sys = self
            .system
            .as_ref()
            .ok_or_else(|| ConfigError::block("system", "this subcommand needs a [system] block"))?;
        build_setup("system", sys, self.driver.as_ref(), self.control.as_ref())
    }

    /// State names for CSV headers.
    pub fn state_names(&self) -> Vec<String> {
        let sys = self.system.as_ref();
        if let Some(e) = sys.and_then(|s| s.model.as_deref()).and_then(models::entry) {
            return e.state.iter().map(|s| s.to_string()).collect();
        }
        let n = sys.and_then(|s| s.dim).unwrap_or(0);
        (1..=n).map(|i| format!("x{i}")).collect()
    }
}

fn resolve_system(
    block: &str,
    mut sys: SystemConfig,
    driver: Option<DriverConfig>,
    control: Option<ControlConfig>,
) -> ConfigResult<(SystemConfig, DriverConfig, ControlConfig)> {
    if let Some(name) = sys.model.clone() {
        let entry = models::entry(&name).ok_or_else(|| ConfigError::block(block, format!("unknown model {name:?}")))?;
        for key in sys.params.keys() {
            if !entry.params.iter().any(|p| p.name == key) {
                return Err(ConfigError::block(
                    &format!("{block}.params"),
                    format!("unknown key {key:?} for model {name}"),
                ));
            }
        }
        let inline = [&sys.j, &sys.r, &sys.q, &sys.g, &sys.xi].iter().any(|m| m.is_some())
            || sys.dim.is_some()
            || sys.dissipative.is_some()
            || sys.storage_driver.is_some()
            || sys.control_drivers.is_some()
            || sys.noise_drivers.is_some();
        if inline {
            return Err(ConfigError::block(block, "a builtin model takes params and x0 only"));
        }
        for p in entry.params {
            sys.params.entry(p.name.to_string()).or_insert(p.default);
        }
        let setup = models::build(&name, &sys.params).map_err(|e| ConfigError::block(&format!("{block}.params"), e))?;
        if sys.x0.is_none() {
            sys.x0 = Some(setup.x0.iter().copied().collect());
        }
        let driver = driver.unwrap_or_else(|| DriverConfig::from_spec(&setup.driver));
        let control = match control {
            Some(c) => c,
            None => ControlConfig::from_law(&setup.control).unwrap_or(ControlConfig::Zero),
        };
        build_setup(block, &sys, Some(&driver), Some(&control))?;
        Ok((sys, driver, control))
    } else {
        if !sys.params.is_empty() {
            return Err(ConfigError::block(block, "params need a builtin model"));
        }
        let q = sys
            .q
            .as_ref()
            .ok_or_else(|| ConfigError::block(block, "inline systems need q (H = x^T Q x / 2) or a model name"))?
            .to_matrix(block, "q")?;
        let n = sys.dim.unwrap_or(q.nrows());
        sys.dim = Some(n);
        let m = match &sys.g {
            Some(g) => g.to_matrix(block, "g")?.ncols(),
            None => 0,
        };
        let k = match &sys.xi {
            Some(x) => x.to_matrix(block, "xi")?.ncols(),
            None => 0,
        };
        sys.dissipative.get_or_insert(true);
        sys.storage_driver.get_or_insert_with(|| "z".into());
        sys.control_drivers.get_or_insert_with(|| vec!["c".into(); m]);
        if sys.noise_drivers.is_none() {
            if k > 1 {
                return Err(ConfigError::block(
                    block,
                    "noise_drivers must name one driver per xi column",
                ));
            }
            sys.noise_drivers = Some(vec!["n".into(); k]);
        }
        sys.x0.get_or_insert_with(|| vec![0.0; n]);
        let driver = driver.unwrap_or_else(|| DriverConfig::from_spec(&models::standard_driver(1.0)));
        let control = control.unwrap_or(ControlConfig::Zero);
        build_setup(block, &sys, Some(&driver), Some(&control))?;
        Ok((sys, driver, control))
    }
}

/// Builds a resolved system block.
pub fn build_setup(
    block: &str,
    sys: &SystemConfig,
    driver: Option<&DriverConfig>,
    control: Option<&ControlConfig>,
) -> ConfigResult<ModelSetup> {
    let mut setup = if let Some(name) = &sys.model {
        models::build(name, &sys.params).map_err(|e| ConfigError::block(&format!("{block}.params"), e))?
    } else {
        let driver = driver
            .ok_or_else(|| ConfigError::block(block, "inline systems need a driver"))?
            .to_spec("driver")?;
        let def = inline_definition(block, sys, &driver)?;
        ModelSetup {
            x0: DVector::zeros(def.dim()),
            def,
            driver,
            control: ControlLaw::Zero,
        }
    };
    if let Some(d) = driver {
        setup.driver = d.to_spec("driver")?;
    }
    if let Some(c) = control {
        setup.control = c.to_law()?;
    }
    if let Some(x0) = &sys.x0 {
        if x0.len() != setup.def.dim() {
            return Err(ConfigError::block(
                block,
                format!("x0 has {} entries, the state has {}", x0.len(), setup.def.dim()),
            ));
        }
        setup.x0 = DVector::from_column_slice(x0);
    }
    setup
        .def
        .check_binding(&setup.driver)
        .map_err(|e| ConfigError::block("driver", e))?;
    setup
        .control
        .evaluate(&setup.def, 0.0, &setup.x0)
        .map_err(|e| ConfigError::block("control", e))?;
    Ok(setup)
}

fn inline_definition(block: &str, sys: &SystemConfig, driver: &DriverSpec) -> ConfigResult<SphsDefinition> {
    let q = sys
        .q
        .as_ref()
        .ok_or_else(|| ConfigError::block(block, "missing q"))?
        .to_matrix(block, "q")?;
    let n = sys.dim.unwrap_or(q.nrows());
    let square = |name: &str, m: Option<&MatrixSpec>| -> ConfigResult<DMatrix<f64>> {
        let m = match m {
            Some(s) => s.to_matrix(block, name)?,
            None => DMatrix::zeros(n, n),
        };
        if m.shape() != (n, n) {
            return Err(ConfigError::block(
                block,
                format!("{name} must be {n}x{n}, got {:?}", m.shape()),
            ));
        }
        Ok(m)
    };
    let q = square("q", sys.q.as_ref())?;
    let j = square("j", sys.j.as_ref())?;
    let r = square("r", sys.r.as_ref())?;
    let find = |name: &str| -> ConfigResult<usize> {
        driver
            .index_of(name)
            .ok_or_else(|| ConfigError::block(block, format!("driver component {name:?} is not defined")))
    };
    let storage = find(sys.storage_driver.as_deref().unwrap_or("z"))?;
    let mut b = SphsDefinition::builder("inline", n)
        .storage(MatrixField::constant(j), MatrixField::constant(r), storage)
        .hamiltonian(ScalarField::quadratic(q))
        .dissipative(sys.dissipative.unwrap_or(true));
    let cols = |name: &str, spec: &MatrixSpec| -> ConfigResult<DMatrix<f64>> {
        let m = spec.to_matrix(block, name)?;
        if m.nrows() != n {
            return Err(ConfigError::block(
                block,
                format!("{name} must have {n} rows, got {}", m.nrows()),
            ));
        }
        Ok(m)
    };
    if let Some(g) = &sys.g {
        let g = cols("g", g)?;
        let names = sys
            .control_drivers
            .clone()
            .unwrap_or_else(|| vec!["c".into(); g.ncols()]);
        let idx = names.iter().map(|s| find(s)).collect::<ConfigResult<Vec<_>>>()?;
        b = b.input_map(MatrixField::constant(g), idx);
    }
    if let Some(xi) = &sys.xi {
        let xi = cols("xi", xi)?;
        let names = sys
            .noise_drivers
            .clone()
            .unwrap_or_else(|| vec!["n".into(); xi.ncols()]);
        let idx = names.iter().map(|s| find(s)).collect::<ConfigResult<Vec<_>>>()?;
        b = b.noise_map(MatrixField::constant(xi), idx);
    }
    b.build().map_err(|e| ConfigError::block(block, e))
}

/// Builds a Dirac structure block.
pub fn build_structure(block: &str, s: &StructureConfig) -> ConfigResult<DiracSubspace> {
    let need = |m: &Option<MatrixSpec>, name: &str| -> ConfigResult<DMatrix<f64>> {
        m.as_ref()
            .ok_or_else(|| ConfigError::block(block, format!("kind {} needs {name}", s.kind)))?
            .to_matrix(block, name)
    };
    let err = |e: sphs::SphsError| ConfigError::block(block, e);
    let d = match s.kind.as_str() {
        "graph" => DiracSubspace::graph(&need(&s.j, "j")?).map_err(err)?,
        "kernel" => DiracSubspace::from_kernel(&need(&s.f, "f")?, &need(&s.e, "e")?, 1e-9).map_err(err)?,
        "explicit" => {
            let j = need(&s.j, "j")?;
            let n = j.nrows();
            let opt = |m: &Option<MatrixSpec>, name: &str| -> ConfigResult<DMatrix<f64>> {
                match m {
                    Some(spec) => spec.to_matrix(block, name),
                    None => Ok(DMatrix::zeros(n, 0)),
                }
            };
            DiracSubspace::from_explicit(
                &j,
                &opt(&s.g_r, "g_r")?,
                &opt(&s.g_c, "g_c")?,
                &opt(&s.g_n, "g_n")?,
                1e-9,
            )
            .map_err(err)?
        }
        "wire" => {
            let width = s
                .width
                .ok_or_else(|| ConfigError::block(block, "kind wire needs width"))?;
            let from = s.from.as_deref().unwrap_or("in");
            let to = s.to.as_deref().unwrap_or("out");
            DiracSubspace::wire(width, from, to).map_err(err)?
        }
        other => {
            return Err(ConfigError::block(
                block,
                format!("unknown kind {other:?} (graph, kernel, explicit, wire)"),
            ))
        }
    };
    match &s.prefix {
        Some(p) => {
            let keep: Vec<&str> = s.keep.iter().map(String::as_str).collect();
            d.with_prefix(p, &keep).map_err(err)
        }
        None => Ok(d),
    }
}
