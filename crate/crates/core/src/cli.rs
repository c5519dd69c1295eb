//! Run configuration, scenario presets and output files.
//!
//! A configuration is a TOML document. It may name a `preset`; every other key
//! then overrides the preset value (tables merge, arrays are replaced). Keys
//! unknown to [`RunConfig`] are rejected. Tolerances can also be overridden from
//! the environment as `PFL_<SECTION>_<KEY>` for the `alg2` and `fv` sections,
//! e.g. `PFL_ALG2_TOL=1e-7`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alg2::{sample_nodal, to_cell_averages, Alg2Config, Alg2Solver, Alg2Trajectory};
use crate::diagnostics::{
    compare_fields, fit_exponential_tail, relative_energy_series, steady_state_residual, steady_state_two_phase,
    total_square_distance_check, Check, DiagnosticsSeries,
};
use crate::fv::{FvConfig, FvProblem, FvTrajectory};
use crate::mesh::{BoxDomain, FvMesh, Point, Quadrature, SpatialGrid};
use crate::physics::{total_energy, CapillaryModel, Phase, PhaseSet, SaturationState};

pub const PRESETS: [&str; 3] = ["two_phase_bc", "three_phase", "energy_decay"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit status: 2 for bad input, 3 for solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Alg2,
    Fv,
    Both,
}

impl SolverKind {
    pub fn alg2(self) -> bool {
        matches!(self, SolverKind::Alg2 | SolverKind::Both)
    }

    pub fn fv(self) -> bool {
        matches!(self, SolverKind::Fv | SolverKind::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub viscosity: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub permeability: f64,
    pub gravity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum CapillaryConfig {
    BrooksCorey { alpha: f64 },
    Linear { alpha: f64 },
    Quadratic { alpha1: f64, alpha2: f64 },
}

impl CapillaryConfig {
    pub fn model(&self) -> CapillaryModel {
        match *self {
            CapillaryConfig::BrooksCorey { alpha } => CapillaryModel::BrooksCorey { alpha },
            CapillaryConfig::Linear { alpha } => CapillaryModel::LinearTwoPhase { alpha },
            CapillaryConfig::Quadratic { alpha1, alpha2 } => CapillaryModel::QuadraticThreePhase { alpha1, alpha2 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub saturation: Vec<f64>,
}

/// Initial saturations; every evaluated vector is normalized to sum 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Uniform { saturation: Vec<f64> },
    /// `background` everywhere except inside the boxes; later boxes win.
    Blocks { background: Vec<f64>, blocks: Vec<Block> },
    /// `s_phase = amplitude · exp(−rate |x − center|²)`, remainder in phase 0.
    Gaussian { phase: usize, amplitude: f64, rate: f64, center: Vec<f64> },
}

impl InitialConfig {
    fn raw(&self, x: Point, n: usize) -> Vec<f64> {
        match self {
            InitialConfig::Uniform { saturation } => saturation.clone(),
            InitialConfig::Blocks { background, blocks } => {
                let inside = |b: &Block| (0..b.lo.len()).all(|a| x[a] >= b.lo[a] && x[a] <= b.hi[a]);
                blocks.iter().rev().find(|b| inside(b)).map_or_else(|| background.clone(), |b| b.saturation.clone())
            }
            InitialConfig::Gaussian { phase, amplitude, rate, center } => {
                let r2: f64 = center.iter().enumerate().map(|(a, c)| (x[a] - c).powi(2)).sum();
                let v = amplitude * (-rate * r2).exp();
                let mut s = vec![0.0; n];
                s[*phase] = v;
                s[0] += 1.0 - v;
                s
            }
        }
    }

    /// Saturation vector at `x`, normalized.
    pub fn eval(&self, x: Point, n: usize) -> Vec<f64> {
        let mut s = self.raw(x, n);
        let total: f64 = s.iter().sum();
        for v in &mut s {
            *v /= total;
        }
        s
    }

    fn validate(&self, n: usize, dim: usize) -> Result<(), ConfigError> {
        let check_vec = |field: &str, s: &[f64]| {
            if s.len() != n {
                return Err(invalid(field, format!("expected {n} saturations, found {}", s.len())));
            }
            if s.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !(s.iter().sum::<f64>() > 0.0) {
                return Err(invalid(field, "saturations must be nonnegative with a positive sum"));
            }
            Ok(())
        };
        match self {
            InitialConfig::Uniform { saturation } => check_vec("initial.saturation", saturation),
            InitialConfig::Blocks { background, blocks } => {
                check_vec("initial.background", background)?;
                for b in blocks {
                    check_vec("initial.blocks.saturation", &b.saturation)?;
                    if b.lo.len() != dim || b.hi.len() != dim {
                        return Err(invalid("initial.blocks", format!("corners must have {dim} coordinates")));
                    }
                }
                Ok(())
            }
            InitialConfig::Gaussian { phase, amplitude, rate, center } => {
                if *phase == 0 || *phase >= n {
                    return Err(invalid("initial.phase", format!("must lie in 1..{n}")));
                }
                if !(*amplitude >= 0.0 && *amplitude <= 1.0) || !(*rate >= 0.0) {
                    return Err(invalid("initial.amplitude", "amplitude in [0, 1] and rate ≥ 0 required"));
                }
                if center.len() != dim {
                    return Err(invalid("initial.center", format!("must have {dim} coordinates")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub tau: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Alg2Settings {
    pub r: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub n_inner: usize,
    pub mass_tol: f64,
    pub relaxation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance: Option<f64>,
    pub accelerate: bool,
    pub time_length: f64,
    pub accept_unconverged: bool,
}

impl Default for Alg2Settings {
    fn default() -> Self {
        let c = Alg2Config::default();
        Self {
            r: c.r,
            tol: c.tol,
            max_iter: c.max_iter,
            n_inner: c.n_inner,
            mass_tol: c.mass_tol,
            relaxation: c.relaxation,
            balance: c.balance,
            accelerate: c.accelerate,
            time_length: c.time_length,
            accept_unconverged: c.accept_unconverged,
        }
    }
}

impl Alg2Settings {
    pub fn config(&self) -> Alg2Config {
        Alg2Config {
            r: self.r,
            tol: self.tol,
            max_iter: self.max_iter,
            n_inner: self.n_inner,
            mass_tol: self.mass_tol,
            accept_unconverged: self.accept_unconverged,
            balance: self.balance,
            accelerate: self.accelerate,
            relaxation: self.relaxation,
            time_length: self.time_length,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FvSettings {
    pub newton_tol: f64,
    pub max_newton: usize,
    pub tau_min: f64,
}

impl Default for FvSettings {
    fn default() -> Self {
        let c = FvConfig::default();
        Self { newton_tol: c.newton_tol, max_newton: c.max_newton, tau_min: c.tau_min }
    }
}

impl FvSettings {
    pub fn config(&self) -> FvConfig {
        FvConfig { newton_tol: self.newton_tol, max_newton: self.max_newton, tau_min: self.tau_min, ..FvConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub snapshots: Vec<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("output"), snapshots: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverKind,
    pub domain: DomainConfig,
    pub grid: GridConfig,
    pub phases: Vec<PhaseConfig>,
    pub physics: PhysicsConfig,
    pub capillary: CapillaryConfig,
    pub initial: InitialConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub alg2: Alg2Settings,
    #[serde(default)]
    pub fv: FvSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

fn water_oil(oil_viscosity: f64) -> Vec<PhaseConfig> {
    vec![PhaseConfig { viscosity: 1.0, density: 1.0 }, PhaseConfig { viscosity: oil_viscosity, density: 0.87 }]
}

fn tuned_alg2() -> Alg2Settings {
    Alg2Settings { r: 10.0, accelerate: true, time_length: 0.05, ..Alg2Settings::default() }
}

/// Built-in scenarios.
///
/// * `two_phase_bc`: unit square, water below an oil block (`s_1 = 0.9`) filling
///   the left half, Brooks–Corey capillarity with `α = 1`, 200 steps of 0.05.
/// * `three_phase`: gas, oil and water in three vertical bands, quadratic
///   capillarity, `μ = (1, 50, 0.1)`, `ρ = (1, 0.87, 0.1)`.
/// * `energy_decay`: `(−1, 1)²`, Gaussian oil bump `e^{−4|x|²}`, `π_1 = s_1/2`.
///
/// All use `κ = 1` and `g = (0, −1)`.
pub fn preset(name: &str) -> Option<RunConfig> {
    let unit = DomainConfig { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] };
    let physics = PhysicsConfig { permeability: 1.0, gravity: vec![0.0, -1.0] };
    let cfg = match name {
        "two_phase_bc" => RunConfig {
            solver: SolverKind::Both,
            domain: unit,
            grid: GridConfig { cells: vec![50, 50] },
            phases: water_oil(10.0),
            physics,
            capillary: CapillaryConfig::BrooksCorey { alpha: 1.0 },
            initial: InitialConfig::Blocks {
                background: vec![1.0, 0.0],
                blocks: vec![Block { lo: vec![0.0, 0.0], hi: vec![0.5, 1.0], saturation: vec![0.1, 0.9] }],
            },
            time: TimeConfig { tau: 0.05, t_end: 10.0 },
            alg2: tuned_alg2(),
            fv: FvSettings::default(),
            output: OutputConfig { dir: PathBuf::from("output/two_phase_bc"), snapshots: vec![2.5, 5.0, 7.5, 10.0] },
        },
        "three_phase" => {
            let band = |lo: f64, hi: f64, s: [f64; 3]| Block { lo: vec![lo, 0.0], hi: vec![hi, 1.0], saturation: s.to_vec() };
            RunConfig {
                solver: SolverKind::Both,
                domain: unit,
                grid: GridConfig { cells: vec![50, 50] },
                phases: vec![
                    PhaseConfig { viscosity: 1.0, density: 1.0 },
                    PhaseConfig { viscosity: 50.0, density: 0.87 },
                    PhaseConfig { viscosity: 0.1, density: 0.1 },
                ],
                physics,
                capillary: CapillaryConfig::Quadratic { alpha1: 1.0, alpha2: 1.0 },
                initial: InitialConfig::Blocks {
                    background: vec![1.0, 0.0, 0.0],
                    blocks: vec![band(0.0, 1.0 / 3.0, [0.0, 0.0, 1.0]), band(1.0 / 3.0, 2.0 / 3.0, [0.0, 1.0, 0.0])],
                },
                time: TimeConfig { tau: 0.05, t_end: 10.0 },
                alg2: Alg2Settings { max_iter: 20000, ..tuned_alg2() },
                fv: FvSettings::default(),
                output: OutputConfig {
                    dir: PathBuf::from("output/three_phase"),
                    snapshots: vec![0.1, 1.25, 2.5, 5.0, 10.0],
                },
            }
        }
        "energy_decay" => RunConfig {
            solver: SolverKind::Both,
            domain: DomainConfig { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0] },
            grid: GridConfig { cells: vec![20, 20] },
            phases: water_oil(10.0),
            physics,
            capillary: CapillaryConfig::Linear { alpha: 0.5 },
            initial: InitialConfig::Gaussian { phase: 1, amplitude: 1.0, rate: 4.0, center: vec![0.0, 0.0] },
            time: TimeConfig { tau: 0.05, t_end: 4.0 },
            alg2: tuned_alg2(),
            fv: FvSettings::default(),
            output: OutputConfig { dir: PathBuf::from("output/energy_decay"), snapshots: Vec::new() },
        },
        _ => return None,
    };
    Some(cfg)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

const INTEGER_KEYS: [&str; 3] = ["max_iter", "n_inner", "max_newton"];

/// Applies `PFL_ALG2_*` and `PFL_FV_*` variables to the matching sections.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix("PFL_") else { continue };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = ["alg2", "fv"]
            .iter()
            .find_map(|s| rest.strip_prefix(&format!("{s}_")).map(|k| (*s, k.to_string())))
        else {
            continue;
        };
        let value = if raw == "true" || raw == "false" {
            toml::Value::Boolean(raw == "true")
        } else if INTEGER_KEYS.contains(&key.as_str()) {
            toml::Value::Integer(raw.parse().map_err(|_| invalid(&name, format!("`{raw}` is not an integer")))?)
        } else {
            toml::Value::Float(raw.parse().map_err(|_| invalid(&name, format!("`{raw}` is not a number")))?)
        };
        let sec = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match sec {
            toml::Value::Table(t) => {
                t.insert(key, value);
            }
            _ => return Err(invalid(section, "must be a table")),
        }
    }
    Ok(())
}

fn resolve(text: &str, env: Vec<(String, String)>) -> Result<RunConfig, ConfigError> {
    let mut user: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut table = match user.remove("preset") {
        Some(toml::Value::String(name)) => {
            let p = preset(&name).ok_or_else(|| invalid("preset", format!("unknown preset `{name}`")))?;
            toml::Table::try_from(&p).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        Some(_) => return Err(invalid("preset", "must be a string")),
        None => toml::Table::new(),
    };
    merge(&mut table, user);
    apply_env_overrides(&mut table, env)?;
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses configuration text without consulting the environment.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    resolve(text, Vec::new())
}

/// Parses configuration text with `PFL_` overrides from the process environment.
pub fn parse_config_str_with_env(text: &str) -> Result<RunConfig, ConfigError> {
    resolve(text, std::env::vars().collect())
}

/// Reads a configuration file; a bare preset name is accepted as well.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(source) => {
            let name = path.to_string_lossy();
            if PRESETS.contains(&name.as_ref()) {
                format!("preset = \"{name}\"\n")
            } else {
                return Err(ConfigError::Io { path: path.to_path_buf(), source });
            }
        }
    };
    parse_config_str_with_env(&text)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn dim(&self) -> usize {
        self.domain.lo.len()
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.dim();
        if d != 1 && d != 2 {
            return Err(invalid("domain.lo", "dimension must be 1 or 2"));
        }
        if self.domain.hi.len() != d {
            return Err(invalid("domain.hi", "must match domain.lo"));
        }
        if (0..d).any(|a| !(self.domain.hi[a] > self.domain.lo[a])) {
            return Err(invalid("domain", "hi must exceed lo on every axis"));
        }
        if self.grid.cells.len() != d || self.grid.cells.contains(&0) {
            return Err(invalid("grid.cells", format!("expected {d} positive counts")));
        }
        if self.physics.gravity.len() != d {
            return Err(invalid("physics.gravity", format!("expected {d} components")));
        }
        if !(self.physics.permeability > 0.0) {
            return Err(invalid("physics.permeability", "must be positive"));
        }
        if self.n_phases() < 2 {
            return Err(invalid("phases", "at least two phases required"));
        }
        if self.phases.iter().any(|p| !(p.viscosity > 0.0) || !(p.density >= 0.0)) {
            return Err(invalid("phases", "viscosities must be positive and densities nonnegative"));
        }
        let model = self.capillary.model();
        model.validate().map_err(|e| invalid("capillary", e.to_string()))?;
        if model.n_phases() != self.n_phases() {
            return Err(invalid("capillary", format!("model needs {} phases, {} given", model.n_phases(), self.n_phases())));
        }
        self.initial.validate(self.n_phases(), d)?;
        if !(self.time.tau > 0.0) || !self.time.tau.is_finite() {
            return Err(invalid("time.tau", "must be positive"));
        }
        if !(self.time.t_end >= self.time.tau) || !self.time.t_end.is_finite() {
            return Err(invalid("time.t_end", "must be at least tau"));
        }
        if self.output.snapshots.iter().any(|&t| !(t >= 0.0 && t <= self.time.t_end)) {
            return Err(invalid("output.snapshots", "times must lie in [0, t_end]"));
        }
        if self.solver.alg2() {
            self.alg2.config().validate().map_err(|e| invalid("alg2", e.to_string()))?;
            let n = self.alg2_steps();
            if (n as f64 * self.time.tau - self.time.t_end).abs() > 1e-9 * self.time.t_end {
                return Err(invalid("time.t_end", "must be a multiple of tau for alg2"));
            }
            for &t in &self.output.snapshots {
                if ((t / self.time.tau).round() * self.time.tau - t).abs() > 1e-9 * t.max(1.0) {
                    return Err(invalid("output.snapshots", format!("{t} is not a multiple of tau")));
                }
            }
        }
        if self.solver.fv() {
            let f = &self.fv;
            if !(f.newton_tol > 0.0) || f.max_newton == 0 || !(f.tau_min > 0.0) {
                return Err(invalid("fv", "newton_tol, max_newton and tau_min must be positive"));
            }
        }
        Ok(())
    }

    pub fn alg2_steps(&self) -> usize {
        (self.time.t_end / self.time.tau).round() as usize
    }

    pub fn domain_box(&self) -> BoxDomain {
        if self.dim() == 1 {
            BoxDomain::interval(self.domain.lo[0], self.domain.hi[0])
        } else {
            BoxDomain::rectangle([self.domain.lo[0], self.domain.lo[1]], [self.domain.hi[0], self.domain.hi[1]])
        }
    }

    pub fn grid(&self) -> Result<SpatialGrid, ConfigError> {
        let ny = if self.dim() == 2 { self.grid.cells[1] } else { 1 };
        SpatialGrid::new(self.domain_box(), self.grid.cells[0], ny).map_err(|e| invalid("grid", e.to_string()))
    }

    pub fn phase_set(&self) -> Result<PhaseSet, ConfigError> {
        let g = &self.physics.gravity;
        let gravity = [g[0], g.get(1).copied().unwrap_or(0.0)];
        let phases = self.phases.iter().map(|p| Phase { viscosity: p.viscosity, density: p.density }).collect();
        PhaseSet::new(phases, self.physics.permeability, gravity).map_err(|e| invalid("phases", e.to_string()))
    }

    /// Initial state sampled at cell centers.
    pub fn initial_cells(&self, mesh: &FvMesh) -> SaturationState {
        let n = self.n_phases();
        let mut st = SaturationState::new(n, mesh.n_cells());
        for (k, c) in mesh.cells.iter().enumerate() {
            for (i, v) in self.initial.eval(c.center, n).into_iter().enumerate() {
                st.set(k, i, v);
            }
        }
        st
    }

    /// Initial state sampled at grid nodes.
    pub fn initial_nodes(&self, grid: &SpatialGrid) -> SaturationState {
        sample_nodal(grid, self.n_phases(), |x| self.initial.eval(x, self.n_phases())[1..].to_vec())
    }
}

/// CSV `x,y,s_0,...,s_N`, one row per point, with exactly round-tripping values.
pub fn write_snapshot(state: &SaturationState, points: &[Point], path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "x,y")?;
    for i in 0..state.n_phases {
        write!(out, ",s_{i}")?;
    }
    writeln!(out)?;
    for (k, p) in points.iter().enumerate() {
        write!(out, "{:e},{:e}", p[0], p[1])?;
        for v in state.cell(k) {
            write!(out, ",{v:e}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

pub fn read_snapshot(path: &Path) -> std::io::Result<(Vec<Point>, SaturationState)> {
    let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| bad("empty snapshot".into()))??;
    let n = header.split(',').count().checked_sub(2).filter(|&n| n > 0).ok_or_else(|| bad("bad header".into()))?;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", ln + 2)))?;
        if fields.len() != n + 2 {
            return Err(bad(format!("line {}: expected {} fields", ln + 2, n + 2)));
        }
        points.push([fields[0], fields[1]]);
        values.extend_from_slice(&fields[2..]);
    }
    Ok((points, SaturationState { n_phases: n, values }))
}

fn stamp(t: f64) -> String {
    format!("t{t:08.4}")
}

/// What a run produced.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
    pub alg2: Option<Alg2Trajectory>,
    pub fv: Option<FvTrajectory>,
}

fn series_checks(prefix: &str, series: &DiagnosticsSeries, tol_mass: f64, tol_pos: f64, tol_simplex: f64) -> Vec<Check> {
    let recs = &series.records;
    let e0 = recs.first().map_or(0.0, |r| r.energy);
    let slack = 1e-8 * (1.0 + e0.abs());
    let drift = series.max_mass_drift();
    let min_s = recs.iter().map(|r| r.min_saturation).fold(f64::INFINITY, f64::min);
    let simplex = recs.iter().map(|r| r.simplex_violation).fold(0.0, f64::max);
    let worst_rise = recs.windows(2).map(|w| w[1].energy - w[0].energy).fold(f64::NEG_INFINITY, f64::max);
    vec![
        Check { name: format!("{prefix} mass"), passed: drift <= tol_mass, detail: format!("max relative drift {drift:.3e} (bound {tol_mass:.0e})") },
        Check { name: format!("{prefix} positivity"), passed: min_s >= -tol_pos, detail: format!("min saturation {min_s:.3e}") },
        Check { name: format!("{prefix} simplex"), passed: simplex <= tol_simplex, detail: format!("max violation {simplex:.3e}") },
        Check {
            name: format!("{prefix} energy"),
            passed: worst_rise <= slack,
            detail: format!("largest one-step increase {worst_rise:.3e} (slack {slack:.1e})"),
        },
    ]
}

fn fv_dissipation_check(series: &DiagnosticsSeries) -> Check {
    let recs = &series.records;
    let slack = 1e-8 * (1.0 + recs.first().map_or(0.0, |r| r.energy.abs()));
    let mut worst = f64::NEG_INFINITY;
    let mut min_d = f64::INFINITY;
    for w in recs.windows(2) {
        let d = w[1].dissipation.unwrap_or(0.0);
        min_d = min_d.min(d);
        worst = worst.max(w[1].energy + w[1].tau * d - w[0].energy);
    }
    Check {
        name: "fv dissipation".into(),
        passed: worst <= slack && min_d >= 0.0,
        detail: format!("max E_n + τD_n − E_(n−1) = {worst:.3e}, min D = {min_d:.3e}"),
    }
}

/// Relative energy against the two-phase equilibrium of the same mass, with its
/// checks. Returns the equilibrium energy, or `None` for other phase counts.
fn energy_decay_checks<Q: Quadrature + ?Sized>(
    prefix: &str,
    series: &DiagnosticsSeries,
    quad: &Q,
    model: &CapillaryModel,
    phases: &PhaseSet,
    dir: &Path,
    report: &mut RunReport,
) -> Result<Option<f64>, RunError> {
    let Some(first) = series.records.first() else { return Ok(None) };
    if model.n_phases() != 2 {
        return Ok(None);
    }
    let solver_err = |e: String| RunError::Solver(format!("{prefix} steady state: {e}"));
    let omega = quad.total_weight();
    let mass = first.masses[1].clamp(0.0, omega);
    let steady = steady_state_two_phase(quad, model, phases, mass).map_err(|e| solver_err(e.to_string()))?;
    let s_inf = steady.to_state();
    let e_inf = total_energy(&s_inf, quad, model, phases).map_err(|e| solver_err(e.to_string()))?;
    let residual = steady_state_residual(&steady, quad, model, phases);
    let mass_err = (s_inf.mass(1, quad) - mass).abs();
    report.checks.push(Check {
        name: format!("{prefix} steady state"),
        passed: residual <= 1e-10 && mass_err <= 1e-12 * omega,
        detail: format!("γ = {:.6e}, residual {residual:.3e}, mass error {mass_err:.3e}", steady.gamma),
    });

    let rel = relative_energy_series(series, e_inf);
    let times = series.times();
    let path = dir.join(format!("{prefix}_relative_energy.csv"));
    let mut f = BufWriter::new(fs::File::create(&path)?);
    writeln!(f, "t,relative_energy")?;
    for (t, v) in times.iter().zip(&rel) {
        writeln!(f, "{t:.14e},{v:.14e}")?;
    }
    f.flush()?;
    report.files.push(path);

    let slack = 1e-8 * (1.0 + first.energy.abs());
    let min_rel = rel.iter().copied().fold(f64::INFINITY, f64::min);
    let worst_rise = rel.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    report.checks.push(Check {
        name: format!("{prefix} relative energy"),
        passed: min_rel >= -slack && worst_rise <= slack,
        detail: format!("min {min_rel:.3e}, largest increase {worst_rise:.3e} (slack {slack:.1e})"),
    });
    if let Some(fit) = fit_exponential_tail(&times, &rel) {
        report.checks.push(Check {
            name: format!("{prefix} decay fit"),
            passed: fit.slope < 0.0 && fit.r2 >= 0.9,
            detail: format!("slope {:.4e}, R² {:.4} over {} points", fit.slope, fit.r2, fit.points),
        });
    }
    Ok(Some(e_inf))
}

fn write_series(path: &Path, series: &DiagnosticsSeries) -> std::io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    series.write_csv(&mut f)?;
    f.flush()
}

fn write_alg2_log(path: &Path, traj: &Alg2Trajectory) -> std::io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,iters,primal_res,dual_res,energy,action")?;
    for (n, s) in traj.steps.iter().enumerate() {
        let e = traj.series.records[n + 1].energy;
        writeln!(f, "{},{},{:.14e},{:.14e},{:.14e},{:.14e}", n + 1, s.iterations, s.primal, s.dual, e, s.action)?;
    }
    f.flush()
}

/// Runs the configured solvers and writes every output into `config.output.dir`.
pub fn run(config: &RunConfig) -> Result<RunReport, RunError> {
    config.validate()?;
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)?;
    let mut report = RunReport::default();
    let archived = dir.join("config.toml");
    fs::write(&archived, config.to_toml())?;
    report.files.push(archived);

    let grid = config.grid()?;
    let mesh = grid.fv_mesh().map_err(|e| invalid("grid", e.to_string()))?;
    let phases = config.phase_set()?;
    let model = config.capillary.model();
    let centers: Vec<Point> = mesh.cells.iter().map(|c| c.center).collect();
    let snaps = &config.output.snapshots;
    let tau = config.time.tau;
    let mut failure: Option<RunError> = None;
    let mut alg2_snaps: Vec<(f64, SaturationState)> = Vec::new();
    let mut fv_snaps: Vec<(f64, SaturationState)> = Vec::new();

    if config.solver.alg2() {
        let solver = Alg2Solver::new(&grid, model.clone(), phases.clone(), config.alg2.config())
            .map_err(|e| RunError::Solver(e.to_string()))?;
        let s0 = config.initial_nodes(&grid);
        let steps: Vec<usize> = snaps.iter().map(|t| (t / tau).round() as usize).collect();
        let mut io_err = None;
        let result = solver.run_trajectory(&s0, tau, config.alg2_steps(), |n, _, st| {
            for (k, &step) in steps.iter().enumerate() {
                if step == n {
                    let cells = to_cell_averages(&grid, st);
                    let path = dir.join(format!("alg2_{}.csv", stamp(snaps[k])));
                    if let Err(e) = write_snapshot(&cells, &centers, &path) {
                        io_err = Some(e);
                    }
                    report.files.push(path);
                    alg2_snaps.push((snaps[k], cells));
                }
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let traj = match result {
            Ok(t) => t,
            Err(int) => {
                failure = Some(RunError::Solver(format!("alg2: {}", int.error)));
                int.partial
            }
        };
        let p = dir.join("alg2_diagnostics.csv");
        write_series(&p, &traj.series)?;
        report.files.push(p);
        let p = dir.join("alg2_convergence.csv");
        write_alg2_log(&p, &traj)?;
        report.files.push(p);
        report.checks.extend(series_checks("alg2", &traj.series, 1e-6, 1e-8, 1e-6));
        let quad = solver.quadrature();
        let e_inf = energy_decay_checks("alg2", &traj.series, &quad, &model, &phases, &dir, &mut report)?;
        let actions: Vec<f64> = traj.steps.iter().map(|s| s.action).collect();
        let tsd = total_square_distance_check(&actions, &traj.series.energies(), tau, e_inf);
        report.checks.push(Check {
            name: "alg2 total square distance".into(),
            passed: tsd.pass,
            detail: format!("Σ 2A/τ = {:.6e} ≤ 2(E0 − inf E) = {:.6e}, margin {:.3e}", tsd.lhs, tsd.rhs, tsd.margin),
        });
        report.alg2 = Some(traj);
    }

    if config.solver.fv() && failure.is_none() {
        let problem = FvProblem::new(mesh.clone(), model.clone(), phases.clone(), config.fv.config())
            .map_err(|e| RunError::Solver(e.to_string()))?;
        let s0 = config.initial_cells(&mesh);
        let mut io_err = None;
        let result = problem.run_fv_trajectory(&s0, tau, config.time.t_end, snaps, |_, t, st| {
            for &ts in snaps {
                if (t - ts).abs() <= 1e-12 * ts.max(1.0) && !fv_snaps.iter().any(|(s, _)| *s == ts) {
                    let path = dir.join(format!("fv_{}.csv", stamp(ts)));
                    if let Err(e) = write_snapshot(st, &centers, &path) {
                        io_err = Some(e);
                    }
                    report.files.push(path);
                    fv_snaps.push((ts, st.clone()));
                }
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let traj = match result {
            Ok(t) => t,
            Err(int) => {
                failure = Some(RunError::Solver(format!("fv: {}", int.error)));
                int.partial
            }
        };
        let p = dir.join("fv_diagnostics.csv");
        write_series(&p, &traj.series)?;
        report.files.push(p);
        report.checks.extend(series_checks("fv", &traj.series, 1e-12, 1e-9, 1e-9));
        report.checks.push(fv_dissipation_check(&traj.series));
        energy_decay_checks("fv", &traj.series, &mesh, &model, &phases, &dir, &mut report)?;
        report.checks.push(Check {
            name: "fv step control".into(),
            passed: true,
            detail: format!("{} accepted, {} rejected", traj.steps.len(), traj.rejected_steps),
        });
        report.fv = Some(traj);
    }

    for (t, a) in &alg2_snaps {
        let Some((_, b)) = fv_snaps.iter().find(|(s, _)| s == t) else { continue };
        let cmp = compare_fields(a, b, &mesh).map_err(|e| RunError::Solver(e.to_string()))?;
        let path = dir.join(format!("compare_{}.csv", stamp(*t)));
        write_snapshot(&cmp.difference, &centers, &path)?;
        report.files.push(path);
        let l1: Vec<String> = cmp.l1.iter().map(|v| format!("{v:.6e}")).collect();
        report.checks.push(Check {
            name: format!("compare t={t}"),
            passed: true,
            detail: format!("L1 alg2 − fv per phase [{}]", l1.join(", ")),
        });
    }

    let summary = dir.join("summary.txt");
    let mut text = String::new();
    for c in &report.checks {
        text.push_str(&format!("{c}\n"));
    }
    if let Some(e) = &failure {
        text.push_str(&format!("ERROR {e}\n"));
    }
    fs::write(&summary, text)?;
    report.files.push(summary);
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
