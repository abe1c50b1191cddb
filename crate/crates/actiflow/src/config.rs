//! Run configuration: a strict JSON document that fully determines a
//! simulation.
//!
//! Unknown keys are rejected, defaults are explicit, and a parsed config
//! echoes back to JSON losslessly, so the copy written into a results
//! directory reproduces the run exactly when replayed. Validation happens
//! at load time and names the violated requirement — in particular the
//! initial-energy floor `e0 >= c3`, which the time stepper needs for its
//! minimum principle.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, PiecewiseLinear};
use crate::graphs::RegularizationLevel;
use crate::grid::{read_snapshot, Field2, FlowState, Grid, GridError, SidePair};
use crate::solver::SolverParams;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(serde_json::Error),
    Invalid(String),
    Grid(GridError),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
            ConfigError::Grid(e) => write!(f, "invalid grid block: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError::Parse(e)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    /// Periodic in x (walls otherwise). Defaults to the channel layout:
    /// periodic in x, walls in y.
    #[serde(default = "default_true")]
    pub periodic_x: bool,
    #[serde(default)]
    pub periodic_y: bool,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid, ConfigError> {
        let side = |p: bool| if p { SidePair::Periodic } else { SidePair::Walls };
        Grid::new(self.nx, self.ny, self.lx, self.ly, side(self.periodic_x), side(self.periodic_y))
            .map_err(ConfigError::Grid)
    }
}

/// Breakpoint table for one temperature-dependent coefficient.
pub type Table = Vec<(f64, f64)>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct CoefficientTables {
    pub nu: Table,
    pub gamma: Table,
    pub kappa: Table,
    #[serde(default)]
    pub tau1: Table,
    #[serde(default)]
    pub tau2: Table,
    #[serde(default)]
    pub sigma1: Table,
    #[serde(default)]
    pub sigma2: Table,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    /// Named preset; mutually exclusive with `tables`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<CoefficientTables>,
    /// Structural-constant overrides (defaults from the preset otherwise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c3: Option<f64>,
}

impl CoefficientsConfig {
    pub fn build(&self) -> Result<CoefficientSet, ConfigError> {
        let mut cs = match (&self.preset, &self.tables) {
            (Some(name), None) => CoefficientSet::preset(name).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "unknown coefficient preset {name:?} (available: {})",
                    CoefficientSet::preset_names().join(", ")
                ))
            })?,
            (None, Some(tables)) => {
                let line = |t: &Table, what: &str| -> Result<PiecewiseLinear, ConfigError> {
                    if t.is_empty() {
                        return Ok(PiecewiseLinear::constant(0.0));
                    }
                    let (xs, ys) = t.iter().cloned().unzip();
                    PiecewiseLinear::new(xs, ys).map_err(|e| {
                        ConfigError::Invalid(format!("coefficient table {what}: {e}"))
                    })
                };
                let mut cs = CoefficientSet::newtonian();
                cs.nu = line(&tables.nu, "nu")?;
                cs.gamma = line(&tables.gamma, "gamma")?;
                cs.kappa = line(&tables.kappa, "kappa")?;
                cs.tau1 = line(&tables.tau1, "tau1")?;
                cs.tau2 = line(&tables.tau2, "tau2")?;
                cs.sigma1 = line(&tables.sigma1, "sigma1")?;
                cs.sigma2 = line(&tables.sigma2, "sigma2")?;
                cs
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "coefficients block: give either a preset or tables, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "coefficients block: a preset or tables is required".into(),
                ))
            }
        };
        if let Some(c0) = self.c0 {
            cs.c0 = c0;
        }
        if let Some(c1) = self.c1 {
            cs.c1 = c1;
        }
        if let Some(c2) = self.c2 {
            cs.c2 = c2;
        }
        if let Some(c3) = self.c3 {
            cs.c3 = c3;
        }
        let report = cs.validate(512);
        if !report.is_valid() {
            return Err(ConfigError::Invalid(format!(
                "coefficient set fails validation: {report}"
            )));
        }
        Ok(cs)
    }
}

fn default_picard_tol() -> f64 {
    1e-9
}

fn default_picard_max() -> usize {
    60
}

fn default_steady_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    pub k: u32,
    /// Pressure relaxation; omitted → `1e-4 * hx * hy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_max")]
    pub picard_max: usize,
    #[serde(default)]
    pub body_force: [f64; 2],
    #[serde(default)]
    pub stop_when_steady: bool,
    #[serde(default = "default_steady_tol")]
    pub steady_tol: f64,
}

impl SolverConfig {
    pub fn build(&self, g: &Grid) -> Result<SolverParams, ConfigError> {
        if !(self.dt > 0.0) {
            return Err(ConfigError::Invalid(format!("solver.dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "solver.t_final must be nonnegative, got {}",
                self.t_final
            )));
        }
        let k = RegularizationLevel::new(self.k)
            .map_err(|e| ConfigError::Invalid(format!("solver.k: {e}")))?;
        let epsilon = match self.epsilon {
            Some(e) if e > 0.0 => e,
            Some(e) => {
                return Err(ConfigError::Invalid(format!(
                    "solver.epsilon must be positive, got {e}"
                )))
            }
            None => 1e-4 * g.hx() * g.hy(),
        };
        let mut p = SolverParams::new(self.dt, self.t_final, k, epsilon);
        p.picard_tol = self.picard_tol;
        p.picard_max = self.picard_max;
        p.body_force = self.body_force;
        p.stop_when_steady = self.stop_when_steady;
        p.steady_tol = self.steady_tol;
        Ok(p)
    }
}

fn default_e0() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// "rest", "eddy", "channel_mix", "taylor_green", or "snapshot".
    pub preset: String,
    /// Uniform initial internal energy (ignored when `e0_bands` is given).
    #[serde(default = "default_e0")]
    pub e0: f64,
    /// Horizontal bands of equal height with these energies, bottom first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e0_bands: Option<Vec<f64>>,
    /// Stream-function amplitude of the primary eddy.
    #[serde(default)]
    pub amplitude: f64,
    /// Amplitude of the secondary shear mode (channel_mix only).
    #[serde(default)]
    pub amplitude2: f64,
    /// Snapshot file to start from (preset "snapshot" only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
}

impl InitialConfig {
    pub fn build(&self, g: &Grid, cs: &CoefficientSet) -> Result<FlowState, ConfigError> {
        let mut state = match self.preset.as_str() {
            "rest" => g.zero_state(),
            "eddy" => eddy_state(g, self.amplitude),
            "channel_mix" => channel_mix_state(g, self.amplitude, self.amplitude2),
            "taylor_green" => taylor_green_state(g, self.amplitude)?,
            "snapshot" => {
                let path = self.snapshot.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("initial preset \"snapshot\" requires a snapshot path".into())
                })?;
                let (gs, state) = read_snapshot(Path::new(path))
                    .map_err(|e| ConfigError::Invalid(format!("cannot read snapshot {path}: {e}")))?;
                if gs != *g {
                    return Err(ConfigError::Invalid(format!(
                        "snapshot grid {}x{} does not match the config grid {}x{}",
                        gs.nx, gs.ny, g.nx, g.ny
                    )));
                }
                return check_floor(state, cs);
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown initial preset {other:?} (expected rest, eddy, channel_mix, taylor_green, or snapshot)"
                )))
            }
        };
        match &self.e0_bands {
            Some(bands) if bands.is_empty() => {
                return Err(ConfigError::Invalid("initial.e0_bands must not be empty".into()))
            }
            Some(bands) => {
                let nb = bands.len();
                for j in 0..g.ny {
                    let band = (j * nb) / g.ny;
                    for i in 0..g.nx {
                        *state.e.at_mut(i, j) = bands[band];
                    }
                }
            }
            None => state.e.fill(self.e0),
        }
        state.enforce_impermeability(g);
        check_floor(state, cs)
    }
}

fn check_floor(state: FlowState, cs: &CoefficientSet) -> Result<FlowState, ConfigError> {
    let min_e = state.e.min();
    if min_e < cs.c3 - 1e-12 {
        return Err(ConfigError::Invalid(format!(
            "initial internal energy must satisfy e0 >= c3 everywhere: min e0 = {min_e}, c3 = {}",
            cs.c3
        )));
    }
    Ok(state)
}

/// Divergence-free eddy from the stream function
/// `psi = a sin(2 pi x / Lx) sin^2(pi y / Ly)` (vanishes on y-walls).
pub fn eddy_state(g: &Grid, a: f64) -> FlowState {
    stream_function_state(g, |x, y| {
        a * (2.0 * std::f64::consts::PI * x / g.lx).sin()
            * (std::f64::consts::PI * y / g.ly).sin().powi(2)
    })
}

/// Eddy plus a wall-to-wall shear mode:
/// `psi = a sin(2 pi x / Lx) sin^2(pi y / Ly) + a2 sin(pi y / Ly)`.
pub fn channel_mix_state(g: &Grid, a: f64, a2: f64) -> FlowState {
    stream_function_state(g, |x, y| {
        a * (2.0 * std::f64::consts::PI * x / g.lx).sin()
            * (std::f64::consts::PI * y / g.ly).sin().powi(2)
            + a2 * (std::f64::consts::PI * y / g.ly).sin()
    })
}

/// Fully periodic Taylor-Green vortex scaled so `max |u| = a`.
pub fn taylor_green_state(g: &Grid, a: f64) -> Result<FlowState, ConfigError> {
    if g.bc_x != SidePair::Periodic || g.bc_y != SidePair::Periodic {
        return Err(ConfigError::Invalid(
            "initial preset \"taylor_green\" requires a fully periodic grid".into(),
        ));
    }
    let kx = 2.0 * std::f64::consts::PI / g.lx;
    Ok(stream_function_state(g, move |x, y| {
        let ky = 2.0 * std::f64::consts::PI / g.ly;
        (a / ky) * (kx * x).sin() * (ky * y).sin()
    }))
}

/// Builds an exactly divergence-free velocity from nodal samples of a
/// stream function: `u = d psi / dy`, `v = -d psi / dx` by face
/// differences.
pub fn stream_function_state(g: &Grid, psi: impl Fn(f64, f64) -> f64) -> FlowState {
    let (mx, my) = g.node_dims();
    let nodes = Field2::from_fn(mx, my, |i, j| psi(i as f64 * g.hx(), j as f64 * g.hy()));
    let mut s = g.zero_state();
    let (ux, uy) = g.u_dims();
    for j in 0..uy {
        for i in 0..ux {
            let jn = (j + 1) % my;
            *s.u.at_mut(i, j) = (nodes.at(i, jn) - nodes.at(i, j)) / g.hy();
        }
    }
    let (vx, vy) = g.v_dims();
    for j in 0..vy {
        for i in 0..vx {
            let ie = (i + 1) % mx;
            *s.v.at_mut(i, j) = -(nodes.at(ie, j) - nodes.at(i, j)) / g.hx();
        }
    }
    s.enforce_impermeability(g);
    s
}

fn default_output_dir() -> String {
    "results/run".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output_dir")]
    pub directory: String,
    /// Keep a snapshot every this many steps (0 = final only).
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: default_output_dir(), snapshot_every: 0 }
    }
}

/// A complete, self-contained run description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub grid: GridConfig,
    pub coefficients: CoefficientsConfig,
    pub solver: SolverConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Everything needed to run: the validated, materialized config.
#[derive(Debug)]
pub struct BuiltConfig {
    pub grid: Grid,
    pub coefficients: CoefficientSet,
    pub params: SolverParams,
    pub initial: FlowState,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<SimConfig, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Validates and materializes every block.
    pub fn build(&self) -> Result<BuiltConfig, ConfigError> {
        let grid = self.grid.build()?;
        let coefficients = self.coefficients.build()?;
        let params = self.solver.build(&grid)?;
        let initial = self.initial.build(&grid, &coefficients)?;
        Ok(BuiltConfig { grid, coefficients, params, initial })
    }
}
