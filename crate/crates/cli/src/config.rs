//! Experiment configuration: a TOML document with dotted overrides.

use std::path::{Path, PathBuf};

use mfchain::chain::measure::{ProbVector, TimeGrid};
use mfchain::chain::space::{validate_generator, Generator, StateSpace};
use mfchain::control::{ControlGrid, ControlProblem, SolveOptions};
use mfchain::mean_field::{birth_death_rates, schlogl_model, PicardOptions};
use mfchain::model::{IntensityModel, QuadraticCost, TabulatedModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub reference: Option<ReferenceConfig>,
    pub initial: InitialConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub cost: CostConfig,
    pub control: Option<ControlConfig>,
    pub game: Option<GameConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Intensity model; `||mu||_1` is the first absolute moment of the law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `lambda_01 = up + up_mean ||mu||_1 + up_u u + up_v v`, and likewise
    /// for `lambda_10` with the `down` coefficients.
    TwoState {
        up: f64,
        down: f64,
        #[serde(default)]
        up_mean: f64,
        #[serde(default)]
        down_mean: f64,
        #[serde(default)]
        up_u: f64,
        #[serde(default)]
        down_u: f64,
        #[serde(default)]
        up_v: f64,
        #[serde(default)]
        down_v: f64,
        floor: f64,
    },
    /// Birth-death Schlögl model on `0..n` with upward rate
    /// `up + ||mu||_1 + up_v v` and downward rate `down + down_u u`.
    Schlogl {
        n: usize,
        up: f64,
        down: f64,
        #[serde(default = "default_band")]
        band: usize,
        #[serde(default)]
        down_u: f64,
        #[serde(default)]
        up_v: f64,
    },
    /// Affine rates `base + mean ||mu||_1 + u_coeffs u + v_coeffs v`.
    Tabulated {
        labels: Option<Vec<i64>>,
        base: Vec<Vec<f64>>,
        mean: Option<Vec<Vec<f64>>>,
        u_coeffs: Option<Vec<Vec<f64>>>,
        v_coeffs: Option<Vec<Vec<f64>>>,
        floor: f64,
    },
}

fn default_band() -> usize {
    2
}

/// Reference generator `g`; defaults to the model's base rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub rates: Vec<Vec<f64>>,
}

/// Exactly one of `law`, `dirac` or `uniform = true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub law: Option<Vec<f64>>,
    pub dirac: Option<usize>,
    #[serde(default)]
    pub uniform: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub cells: usize,
}

/// Coefficients of `f = state_i + u_quad u^2 + u_lin u + v_quad v^2 + v_lin v
/// + uv u v + mean ||mu||_1` and `h = terminal_i + terminal_mean ||mu_T||_1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub state: Option<Vec<f64>>,
    #[serde(default)]
    pub u_quad: f64,
    #[serde(default)]
    pub u_lin: f64,
    #[serde(default)]
    pub v_quad: f64,
    #[serde(default)]
    pub v_lin: f64,
    #[serde(default)]
    pub uv: f64,
    #[serde(default)]
    pub mean: f64,
    pub terminal: Option<Vec<f64>>,
    #[serde(default)]
    pub terminal_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub actions: Vec<f64>,
    /// Coarse cells of the brute-force oracle; omitted means no oracle.
    pub coarse_cells: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_mc_paths")]
    pub mc_paths: usize,
}

fn default_eps() -> f64 {
    1e-6
}

fn default_mc_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub u_actions: Vec<f64>,
    pub v_actions: Vec<f64>,
    #[serde(default = "default_isaacs_tol")]
    pub isaacs_tol: f64,
    #[serde(default = "default_saddle_tol")]
    pub saddle_tol: f64,
    /// Coarse cells of the full deviation enumeration; `0` skips it and
    /// omitted picks the largest count within the guard.
    pub coarse_cells: Option<usize>,
}

fn default_isaacs_tol() -> f64 {
    mfchain::game::ISAACS_TOL
}

fn default_saddle_tol() -> f64 {
    mfchain::game::SADDLE_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_iter")]
    pub picard_max_iter: usize,
    #[serde(default = "default_iter")]
    pub policy_max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_iter() -> usize {
    50
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { picard_tol: default_tol(), picard_max_iter: default_iter(), policy_max_iter: default_iter() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_mc_paths")]
    pub n_paths: usize,
    /// Exponent of the moment bound `E[exp(alpha/2 |x|_T)] <= kappa0`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Write every path to `paths.csv`.
    #[serde(default = "default_true")]
    pub write_paths: bool,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n_paths: default_mc_paths(), alpha: default_alpha(), write_paths: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parse `text`, apply `key=value` overrides and deserialize.
pub fn parse(text: &str, overrides: &[String]) -> Result<(ExperimentConfig, String), CliError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let canonical = toml::to_string(&doc).map_err(|e| config_err(e.to_string()))?;
    let cfg: ExperimentConfig = toml::from_str(&canonical).map_err(|e| config_err(e.to_string()))?;
    cfg.validate()?;
    Ok((cfg, canonical))
}

/// Read and parse a config file.
pub fn load(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, String), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, overrides)
}

/// SHA-256 of the canonical (post-override) document.
pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn apply_override(doc: &mut toml::Table, game: &str) -> Result<(), CliError> {
    let (key, raw) = game.split_once('=').ok_or_else(|| config_err(format!("override `{game}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table =
            entry.as_table_mut().ok_or_else(|| config_err(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be positive, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        positive("grid.horizon", self.grid.horizon)?;
        if self.grid.cells == 0 {
            return Err(config_err("grid.cells must be at least 1"));
        }
        positive("solver.picard_tol", self.solver.picard_tol)?;
        if self.solver.picard_max_iter == 0 || self.solver.policy_max_iter == 0 {
            return Err(config_err("solver iteration limits must be at least 1"));
        }
        let set = [self.initial.law.is_some(), self.initial.dirac.is_some(), self.initial.uniform];
        if set.iter().filter(|b| **b).count() != 1 {
            return Err(config_err("initial: give exactly one of `law`, `dirac` or `uniform = true`"));
        }
        if let Some(c) = &self.control {
            positive("control.eps", c.eps)?;
            if c.actions.is_empty() {
                return Err(config_err("control.actions must not be empty"));
            }
        }
        if let Some(g) = &self.game {
            positive("game.isaacs_tol", g.isaacs_tol)?;
            positive("game.saddle_tol", g.saddle_tol)?;
            if g.u_actions.is_empty() || g.v_actions.is_empty() {
                return Err(config_err("game action grids must not be empty"));
            }
        }
        positive("simulate.alpha", self.simulate.alpha)?;
        if self.simulate.n_paths == 0 {
            return Err(config_err("simulate.n_paths must be at least 1"));
        }
        build(self)?;
        Ok(())
    }

    pub fn require_seed(&self, what: &str) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| config_err(format!("`seed` is required for {what}")))
    }
}

/// Model objects built from a config.
pub struct Built {
    pub model: TabulatedModel,
    pub cost: QuadraticCost,
    pub gen: Generator,
    pub xi: ProbVector,
    pub grid: TimeGrid,
    pub picard: PicardOptions,
    pub solve: SolveOptions,
}

impl Built {
    pub fn problem(&self) -> ControlProblem<'_> {
        ControlProblem {
            model: &self.model,
            cost: &self.cost,
            gen: &self.gen,
            xi: self.xi.clone(),
            grid: self.grid.clone(),
            picard: self.picard.clone(),
        }
    }

    pub fn space(&self) -> &StateSpace {
        self.model.space()
    }
}

fn two_by_two(a01: f64, a10: f64) -> Vec<Vec<f64>> {
    vec![vec![0.0, a01], vec![a10, 0.0]]
}

fn build_model(m: &ModelConfig) -> Result<TabulatedModel, CliError> {
    let e = |err: mfchain::Error| config_err(format!("model: {err}"));
    match m {
        ModelConfig::TwoState { up, down, up_mean, down_mean, up_u, down_u, up_v, down_v, floor } => {
            TabulatedModel::new(StateSpace::new(2).map_err(e)?, &two_by_two(*up, *down), *floor)
                .and_then(|t| t.with_mean_coeffs(&two_by_two(*up_mean, *down_mean)))
                .and_then(|t| t.with_u_coeffs(&two_by_two(*up_u, *down_u)))
                .and_then(|t| t.with_v_coeffs(&two_by_two(*up_v, *down_v)))
                .map_err(e)
        }
        ModelConfig::Schlogl { n, up, down, band, down_u, up_v } => {
            if *n < 2 {
                return Err(config_err("model.n must be at least 2"));
            }
            let nu = birth_death_rates(*n, *up, *down);
            let band_coeffs = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
                (0..*n).map(|i| (0..*n).map(|j| f(i, j)).collect()).collect()
            };
            let u = band_coeffs(&|i, j| if i > 0 && j == i - 1 { *down_u } else { 0.0 });
            let v = band_coeffs(&|i, j| if j == i + 1 { *up_v } else { 0.0 });
            schlogl_model(&nu, *band).and_then(|t| t.with_u_coeffs(&u)).and_then(|t| t.with_v_coeffs(&v)).map_err(e)
        }
        ModelConfig::Tabulated { labels, base, mean, u_coeffs, v_coeffs, floor } => {
            let space = match labels {
                Some(l) => StateSpace::with_labels(l.clone()),
                None => StateSpace::new(base.len()),
            }
            .map_err(e)?;
            let mut t = TabulatedModel::new(space, base, *floor).map_err(e)?;
            if let Some(c) = mean {
                t = t.with_mean_coeffs(c).map_err(e)?;
            }
            if let Some(c) = u_coeffs {
                t = t.with_u_coeffs(c).map_err(e)?;
            }
            if let Some(c) = v_coeffs {
                t = t.with_v_coeffs(c).map_err(e)?;
            }
            Ok(t)
        }
    }
}

fn vec_or_zero(v: &Option<Vec<f64>>, n: usize, name: &str) -> Result<Vec<f64>, CliError> {
    match v {
        Some(v) if v.len() == n => Ok(v.clone()),
        Some(v) => Err(config_err(format!("{name} has {} entries, the state space has {n}", v.len()))),
        None => Ok(vec![0.0; n]),
    }
}

/// Build the model, cost, reference chain, initial law and grid.
pub fn build(cfg: &ExperimentConfig) -> Result<Built, CliError> {
    let model = build_model(&cfg.model)?;
    let n = model.n();
    let gen = match &cfg.reference {
        Some(r) => validate_generator(&r.rates).map_err(|e| config_err(format!("reference.rates: {e}")))?,
        None => model.base_generator().map_err(|e| config_err(format!("model base rates: {e}")))?,
    };
    mfchain::model::check_shared_support(&model, &gen).map_err(|e| config_err(format!("reference: {e}")))?;
    let xi = if let Some(l) = &cfg.initial.law {
        ProbVector::new(l.clone()).map_err(|e| config_err(format!("initial.law: {e}")))?
    } else if let Some(d) = cfg.initial.dirac {
        if d >= n {
            return Err(config_err(format!("initial.dirac = {d} is outside 0..{n}")));
        }
        ProbVector::dirac(n, d)
    } else {
        ProbVector::uniform(n)
    };
    if xi.n() != n {
        return Err(config_err(format!("initial.law has {} entries, the state space has {n}", xi.n())));
    }
    let c = &cfg.cost;
    let cost = QuadraticCost {
        space: model.space().clone(),
        state: vec_or_zero(&c.state, n, "cost.state")?,
        u_quad: c.u_quad,
        u_lin: c.u_lin,
        v_quad: c.v_quad,
        v_lin: c.v_lin,
        uv: c.uv,
        mean: c.mean,
        terminal: vec_or_zero(&c.terminal, n, "cost.terminal")?,
        terminal_mean: c.terminal_mean,
    };
    let grid = TimeGrid::uniform(cfg.grid.horizon, cfg.grid.cells).map_err(|e| config_err(format!("grid: {e}")))?;
    let picard = PicardOptions {
        tol: cfg.solver.picard_tol,
        max_iter: cfg.solver.picard_max_iter,
        initial: None,
        entropy: true,
    };
    let solve = SolveOptions { tol: cfg.solver.picard_tol, max_iter: cfg.solver.policy_max_iter };
    Ok(Built { model, cost, gen, xi, grid, picard, solve })
}

/// Action grids from the config.
pub fn control_grid(values: &[f64], name: &str) -> Result<ControlGrid, CliError> {
    ControlGrid::new(values.to_vec()).map_err(|e| config_err(format!("{name}: {e}")))
}
