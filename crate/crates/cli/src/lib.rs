//! Configuration-driven experiment runner.
//!
//! One TOML file describes an experiment (model, ε values, horizon, step,
//! ensemble size, seed, snapshot times, systems to run); the subcommands
//! `simulate`, `sweep`, `exit-times` and `check` consume it and emit
//! plot-ready CSV plus JSON metadata into the output directory. Outputs
//! are a pure function of the config: rerunning a config reproduces every
//! file byte for byte.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use slowfast::averaging::{make_quadrature, QuadKind, QuadratureRule};
use slowfast::ensemble::{
    exit_time_stats, moment_report, noise_floor, run_ensemble, wasserstein1, Ensemble,
    MOMENT_ORDERS,
};
use slowfast::equations::{
    build_averaged_action, build_deterministic_averaged, build_effective,
    build_effective_modified, build_full,
};
use slowfast::checks::{check_coercivity, check_rank, resonance_scan};
use slowfast::models::{build_model, ModelConfig, ModelIngredients};
use slowfast::sde::{derive_path_seed, PathConfig, Scheme, SdeSystem, State};
use slowfast::state::DomainBox;
use slowfast::{CVec, Complex64, RVec};

/// Errors with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2: malformed or inconsistent configuration.
    Config(String),
    /// Exit code 3: numerical failure (PSD breakdown, divergence threshold).
    Numerical(String),
    /// Exit code 1: I/O trouble.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn numerical(e: slowfast::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub run: RunSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub averaging: AveragingSection,
    pub output: OutputSection,
    #[serde(default)]
    pub exit: Option<ExitSection>,
    #[serde(default)]
    pub check: CheckSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub epsilons: Vec<f64>,
    pub dtau: f64,
    pub t_final: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub snapshot_times: Vec<f64>,
    /// Which systems to run: full | averaged_action | effective |
    /// effective_modified | deterministic.
    pub systems: Vec<String>,
    #[serde(default = "default_scheme")]
    pub scheme: String,
}

fn default_scheme() -> String {
    "splitting".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Initial state as `[re, im]` pairs.
    pub v0: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingSection {
    /// tensor | lattice | monte-carlo
    #[serde(default = "default_quad_kind")]
    pub kind: String,
    /// Points per dimension (tensor) or total (lattice, monte-carlo).
    #[serde(default = "default_quad_points")]
    pub points: usize,
    #[serde(default)]
    pub mc_seed: u64,
}

fn default_quad_kind() -> String {
    "tensor".to_string()
}

fn default_quad_points() -> usize {
    32
}

impl Default for AveragingSection {
    fn default() -> Self {
        Self {
            kind: default_quad_kind(),
            points: default_quad_points(),
            mc_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSection {
    /// Per-coordinate box radii `C_j`.
    pub box_radii: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default)]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    #[serde(default = "default_s_max")]
    pub s_max: u32,
    #[serde(default = "default_check_samples")]
    pub samples: usize,
    /// Horizon of the moment-growth probe; the trend is fitted over its
    /// second half so transient relaxation is not mistaken for growth.
    #[serde(default = "default_probe_t")]
    pub probe_t: f64,
    #[serde(default = "default_probe_paths")]
    pub probe_paths: usize,
}

fn default_alpha2() -> f64 {
    1.0
}

fn default_s_max() -> u32 {
    10
}

fn default_check_samples() -> usize {
    64
}

fn default_probe_t() -> f64 {
    6.0
}

fn default_probe_paths() -> usize {
    512
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            alpha1: 0.0,
            alpha2: default_alpha2(),
            s_max: default_s_max(),
            samples: default_check_samples(),
            probe_t: default_probe_t(),
            probe_paths: default_probe_paths(),
        }
    }
}

/// Parses a config from TOML text (no filesystem access; also the fuzzing
/// entry point). Structural errors and semantic violations both land in
/// `CliError::Config`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

const KNOWN_SYSTEMS: [&str; 5] = [
    "full",
    "averaged_action",
    "effective",
    "effective_modified",
    "deterministic",
];

fn validate_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let n = cfg.model.n;
    if n == 0 {
        return Err(CliError::Config("model.n must be at least 1".into()));
    }
    let run = &cfg.run;
    if run.epsilons.is_empty() {
        return Err(CliError::Config("run.epsilons must not be empty".into()));
    }
    if run.epsilons.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(CliError::Config("epsilons must be positive and finite".into()));
    }
    let mut sorted = run.epsilons.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config("epsilons must be distinct".into()));
    }
    if !(run.dtau > 0.0) || !run.dtau.is_finite() {
        return Err(CliError::Config("run.dtau must be positive".into()));
    }
    if !(run.t_final >= run.dtau) {
        return Err(CliError::Config("run.t_final must be at least dtau".into()));
    }
    if run.n_paths < 2 {
        return Err(CliError::Config("run.n_paths must be at least 2".into()));
    }
    if run.snapshot_times.is_empty() {
        return Err(CliError::Config("run.snapshot_times must not be empty".into()));
    }
    if run
        .snapshot_times
        .iter()
        .any(|&t| !(0.0..=run.t_final + 1e-12).contains(&t))
    {
        return Err(CliError::Config(
            "snapshot times must lie in [0, t_final]".into(),
        ));
    }
    if run.systems.is_empty() {
        return Err(CliError::Config("run.systems must not be empty".into()));
    }
    for s in &run.systems {
        if !KNOWN_SYSTEMS.contains(&s.as_str()) {
            return Err(CliError::Config(format!(
                "unknown system '{s}' (known: {})",
                KNOWN_SYSTEMS.join(", ")
            )));
        }
    }
    if !matches!(run.scheme.as_str(), "splitting" | "euler") {
        return Err(CliError::Config(format!(
            "unknown scheme '{}' (splitting | euler)",
            run.scheme
        )));
    }
    if cfg.initial.v0.len() != n {
        return Err(CliError::Config(format!(
            "initial.v0 must have {n} entries, got {}",
            cfg.initial.v0.len()
        )));
    }
    if cfg
        .initial
        .v0
        .iter()
        .any(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(CliError::Config("initial.v0 entries must be finite".into()));
    }
    if !matches!(cfg.averaging.kind.as_str(), "tensor" | "lattice" | "monte-carlo") {
        return Err(CliError::Config(format!(
            "unknown averaging kind '{}' (tensor | lattice | monte-carlo)",
            cfg.averaging.kind
        )));
    }
    if cfg.averaging.points < 2 {
        return Err(CliError::Config("averaging.points must be at least 2".into()));
    }
    if let Some(exit) = &cfg.exit {
        if exit.box_radii.len() != n {
            return Err(CliError::Config(format!(
                "exit.box_radii must have {n} entries"
            )));
        }
        if exit.box_radii.iter().any(|&c| !(c > 0.0)) {
            return Err(CliError::Config("exit.box_radii must be positive".into()));
        }
    }
    if cfg.check.alpha1 < 0.0 {
        return Err(CliError::Config("check.alpha1 must be non-negative".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared experiment plumbing
// ---------------------------------------------------------------------------

struct Experiment {
    cfg: ExperimentConfig,
    model: ModelIngredients,
    rule: QuadratureRule,
    v0: State,
}

impl Experiment {
    fn prepare(cfg: ExperimentConfig) -> Result<Self, CliError> {
        let model = build_model(&cfg.model).map_err(|e| CliError::Config(e.to_string()))?;
        let kind = match cfg.averaging.kind.as_str() {
            "tensor" => QuadKind::Tensor,
            "lattice" => QuadKind::Lattice,
            _ => QuadKind::MonteCarlo {
                seed: cfg.averaging.mc_seed,
            },
        };
        let rule = make_quadrature(cfg.model.n, cfg.averaging.points, kind)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let v0 = State::Complex(CVec::from_iterator(
            cfg.model.n,
            cfg.initial.v0.iter().map(|p| Complex64::new(p[0], p[1])),
        ));
        fs::create_dir_all(&cfg.output.dir)?;
        Ok(Self {
            cfg,
            model,
            rule,
            v0,
        })
    }

    fn scheme(&self) -> Scheme {
        match self.cfg.run.scheme.as_str() {
            "euler" => Scheme::Euler,
            _ => Scheme::Splitting,
        }
    }

    fn path_cfg(&self, seed: u64) -> PathConfig {
        PathConfig {
            dtau: self.cfg.run.dtau,
            t_final: self.cfg.run.t_final,
            seed,
            scheme: self.scheme(),
        }
    }

    /// Per-system seed stream, derived from the master seed and a stable
    /// ordinal so adding systems never reshuffles existing ones.
    fn system_seed(&self, ordinal: u64) -> u64 {
        derive_path_seed(self.cfg.run.master_seed, 0x5115_0000 + ordinal)
    }

    fn build_system(&self, name: &str, eps: f64) -> Result<SdeSystem, CliError> {
        let m = &self.model;
        match name {
            "full" => build_full(&m.hamiltonian, &m.perturbation, &m.dispersion, eps),
            "averaged_action" => build_averaged_action(&m.perturbation, &m.dispersion, &self.rule),
            "effective" => build_effective(&m.perturbation, &m.dispersion, &self.rule),
            "effective_modified" => {
                build_effective_modified(&m.perturbation, &m.dispersion, &self.rule)
            }
            other => return Err(CliError::Config(format!("system '{other}' cannot be built"))),
        }
        .map_err(numerical)
    }

    fn initial_for(&self, name: &str) -> State {
        if name == "averaged_action" {
            State::Action(self.v0.actions())
        } else {
            self.v0.clone()
        }
    }

    fn run_system(
        &self,
        name: &str,
        eps: f64,
        ordinal: u64,
    ) -> Result<Ensemble, CliError> {
        let sys = self.build_system(name, eps)?;
        let cfg = self.path_cfg(self.system_seed(ordinal));
        let ens = run_ensemble(
            &sys,
            &self.initial_for(name),
            self.cfg.run.n_paths,
            &cfg,
            &self.cfg.run.snapshot_times,
            name,
        )
        .map_err(numerical)?;
        if ens.divergence_warning() {
            return Err(CliError::Numerical(format!(
                "system '{name}' (eps = {eps}): {} of {} paths diverged",
                ens.diverged_count(),
                ens.n_requested()
            )));
        }
        Ok(ens)
    }
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

/// Writes bytes atomically (temp file in the target directory, then
/// rename).
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .ok_or_else(|| CliError::Io(format!("no parent directory for {}", path.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

/// Snapshot CSV: one row per (path, snapshot, coordinate) holding the
/// action value.
fn write_snapshot_csv(path: &Path, ens: &Ensemble) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["path_id", "tau", "coordinate", "value"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for &tau in ens.snapshot_taus() {
        let states = ens.states_at(tau).map_err(numerical)?;
        for (path_id, state) in states.iter().enumerate() {
            let actions = state.actions();
            for k in 0..actions.len() {
                wtr.write_record([
                    path_id.to_string(),
                    format!("{tau}"),
                    k.to_string(),
                    format!("{}", actions[k]),
                ])
                .map_err(|e| CliError::Io(e.to_string()))?;
            }
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| CliError::Io(e.to_string()))?;
    atomic_write(path, &bytes)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    version: &'a str,
    master_seed: u64,
    config: &'a ExperimentConfig,
    /// Model parameters with every default filled in.
    resolved_model: Option<&'a ModelConfig>,
    warnings: Vec<String>,
    systems: Vec<SystemMetadata>,
}

#[derive(Serialize)]
struct SystemMetadata {
    system: String,
    eps: Option<f64>,
    file: String,
    n_paths: usize,
    diverged: usize,
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// `simulate`: run every requested system and write snapshot CSVs plus
/// metadata.
pub fn cmd_simulate(cfg: ExperimentConfig) -> Result<(), CliError> {
    let exp = Experiment::prepare(cfg)?;
    let out = exp.cfg.output.dir.clone();
    let mut systems_meta = Vec::new();
    let mut warnings = Vec::new();
    if exp.cfg.run.systems.iter().any(|s| s == "averaged_action")
        && !exp.model.dispersion.is_constant()
    {
        let msg = "state-dependent dispersion: uniqueness of the averaged action equation \
                   is not guaranteed; its law is reported for comparison only"
            .to_string();
        eprintln!("warning: {msg}");
        warnings.push(msg);
    }
    let mut ordinal = 0u64;
    for name in exp.cfg.run.systems.clone() {
        match name.as_str() {
            "full" => {
                for &eps in &exp.cfg.run.epsilons {
                    let ens = exp.run_system("full", eps, ordinal)?;
                    ordinal += 1;
                    let file = format!("snapshots_full_eps{eps}.csv");
                    write_snapshot_csv(&out.join(&file), &ens)?;
                    systems_meta.push(SystemMetadata {
                        system: "full".into(),
                        eps: Some(eps),
                        file,
                        n_paths: ens.n_requested(),
                        diverged: ens.diverged_count(),
                    });
                }
            }
            "deterministic" => {
                let ode = build_deterministic_averaged(&exp.model.perturbation, &exp.rule)
                    .map_err(numerical)?;
                let grid = ode
                    .integrate(&exp.v0.actions(), exp.cfg.run.dtau, exp.cfg.run.t_final)
                    .map_err(numerical)?;
                let file = "snapshots_deterministic.csv".to_string();
                let mut wtr = csv::Writer::from_writer(Vec::new());
                wtr.write_record(["path_id", "tau", "coordinate", "value"])
                    .map_err(|e| CliError::Io(e.to_string()))?;
                for &snap in &exp.cfg.run.snapshot_times {
                    let idx = ((snap / exp.cfg.run.dtau).round() as usize).min(grid.len() - 1);
                    let (tau, actions) = &grid[idx];
                    for k in 0..actions.len() {
                        wtr.write_record([
                            "0".to_string(),
                            format!("{tau}"),
                            k.to_string(),
                            format!("{}", actions[k]),
                        ])
                        .map_err(|e| CliError::Io(e.to_string()))?;
                    }
                }
                let bytes = wtr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
                atomic_write(&out.join(&file), &bytes)?;
                systems_meta.push(SystemMetadata {
                    system: name.clone(),
                    eps: None,
                    file,
                    n_paths: 1,
                    diverged: 0,
                });
            }
            other => {
                let ens = exp.run_system(other, exp.cfg.run.epsilons[0], ordinal)?;
                ordinal += 1;
                let file = format!("snapshots_{other}.csv");
                write_snapshot_csv(&out.join(&file), &ens)?;
                systems_meta.push(SystemMetadata {
                    system: other.into(),
                    eps: None,
                    file,
                    n_paths: ens.n_requested(),
                    diverged: ens.diverged_count(),
                });
            }
        }
    }
    let meta = RunMetadata {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        master_seed: exp.cfg.run.master_seed,
        config: &exp.cfg,
        resolved_model: exp.model.resolved.as_ref(),
        warnings,
        systems: systems_meta,
    };
    atomic_write(&out.join("metadata.json"), &json_bytes(&meta)?)
}

#[derive(Serialize)]
struct SweepRow {
    eps: f64,
    tau: f64,
    coordinate: usize,
    distance: f64,
    floor: f64,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    command: &'a str,
    version: &'a str,
    master_seed: u64,
    /// Per (tau, coordinate): true when the distance sequence is
    /// non-increasing within 2x the noise floor.
    monotone_within_floor: Vec<SweepFlag>,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct SweepFlag {
    tau: f64,
    coordinate: usize,
    monotone: bool,
    final_distance: f64,
    final_floor: f64,
    final_within_2x_floor: bool,
}

/// `sweep`: full-vs-effective Wasserstein distances across the ε list.
pub fn cmd_epsilon_sweep(cfg: ExperimentConfig) -> Result<(), CliError> {
    if cfg.run.epsilons.len() < 3 {
        return Err(CliError::Config(
            "epsilon sweep needs at least 3 epsilon values".into(),
        ));
    }
    if cfg.run.n_paths < 100 {
        return Err(CliError::Config(
            "comparison runs need n_paths >= 100".into(),
        ));
    }
    let exp = Experiment::prepare(cfg)?;
    let out = exp.cfg.output.dir.clone();
    let mut epsilons = exp.cfg.run.epsilons.clone();
    epsilons.sort_by(|a, b| b.partial_cmp(a).unwrap()); // descending

    let eff = exp.run_system("effective", epsilons[0], 1000)?;
    let n = exp.cfg.model.n;
    let mut rows: Vec<SweepRow> = Vec::new();
    for (i, &eps) in epsilons.iter().enumerate() {
        let full = exp.run_system("full", eps, i as u64)?;
        for &tau in &exp.cfg.run.snapshot_times {
            let d_full = full.action_distribution(tau).map_err(numerical)?;
            let d_eff = eff.action_distribution(tau).map_err(numerical)?;
            let w = wasserstein1(&d_full, &d_eff).map_err(numerical)?;
            let floor_full = noise_floor(&full, tau).map_err(numerical)?;
            let floor_eff = noise_floor(&eff, tau).map_err(numerical)?;
            for k in 0..n {
                rows.push(SweepRow {
                    eps,
                    tau,
                    coordinate: k,
                    distance: w.per_coordinate[k],
                    floor: floor_full.per_coordinate[k].max(floor_eff.per_coordinate[k]),
                });
            }
        }
    }

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["eps", "tau", "coordinate", "distance", "floor"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for r in &rows {
        wtr.write_record([
            format!("{}", r.eps),
            format!("{}", r.tau),
            r.coordinate.to_string(),
            format!("{}", r.distance),
            format!("{}", r.floor),
        ])
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    atomic_write(&out.join("sweep.csv"), &bytes)?;

    let mut flags = Vec::new();
    for &tau in &exp.cfg.run.snapshot_times {
        for k in 0..n {
            let seq: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.tau == tau && r.coordinate == k)
                .collect();
            let mut monotone = true;
            for w in seq.windows(2) {
                if w[1].distance > w[0].distance + 2.0 * w[1].floor.max(w[0].floor) {
                    monotone = false;
                }
            }
            let last = seq.last().expect("non-empty sweep");
            flags.push(SweepFlag {
                tau,
                coordinate: k,
                monotone,
                final_distance: last.distance,
                final_floor: last.floor,
                final_within_2x_floor: last.distance <= 2.0 * last.floor,
            });
        }
    }
    let summary = SweepSummary {
        command: "sweep",
        version: env!("CARGO_PKG_VERSION"),
        master_seed: exp.cfg.run.master_seed,
        monotone_within_floor: flags,
        config: &exp.cfg,
    };
    atomic_write(&out.join("sweep.json"), &json_bytes(&summary)?)
}

#[derive(Serialize)]
struct ExitSummary<'a> {
    command: &'a str,
    version: &'a str,
    master_seed: u64,
    n_paths: usize,
    exits: usize,
    reliable: bool,
    exponent: Option<f64>,
    constant: Option<f64>,
    sup_cdf_over_sqrt_lambda: Option<f64>,
    config: &'a ExperimentConfig,
}

/// `exit-times`: first-passage CDF out of the configured box plus a
/// power-law fit.
pub fn cmd_exit_times(cfg: ExperimentConfig) -> Result<(), CliError> {
    let Some(exit) = cfg.exit.clone() else {
        return Err(CliError::Config("exit-times needs an [exit] section".into()));
    };
    let exp = Experiment::prepare(cfg)?;
    let out = exp.cfg.output.dir.clone();
    let bbox = DomainBox::new(RVec::from_vec(exit.box_radii.clone()))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let eps = exp.cfg.run.epsilons[0];
    let sys = exp.build_system("full", eps)?;
    let cfg_path = exp.path_cfg(exp.system_seed(2000));
    let report = exit_time_stats(&sys, &exp.v0, &bbox, exp.cfg.run.n_paths, &cfg_path)
        .map_err(|e| match e {
            slowfast::Error::Invalid(msg) => CliError::Config(msg),
            other => numerical(other),
        })?;
    if !report.reliable {
        eprintln!(
            "warning: only {} exits observed; the CDF fit is unreliable",
            report.exits
        );
    }

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["lambda", "p_exit"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for (l, p) in report.lambdas.iter().zip(report.cdf.iter()) {
        wtr.write_record([format!("{l}"), format!("{p}")])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    atomic_write(&out.join("exit_cdf.csv"), &bytes)?;

    let summary = ExitSummary {
        command: "exit-times",
        version: env!("CARGO_PKG_VERSION"),
        master_seed: exp.cfg.run.master_seed,
        n_paths: report.n_paths,
        exits: report.exits,
        reliable: report.reliable,
        exponent: report.fit.as_ref().map(|f| f.exponent),
        constant: report.fit.as_ref().map(|f| f.constant),
        sup_cdf_over_sqrt_lambda: report.fit.as_ref().map(|f| f.sup_cdf_over_sqrt),
        config: &exp.cfg,
    };
    atomic_write(&out.join("exit_fit.json"), &json_bytes(&summary)?)
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    command: &'a str,
    version: &'a str,
    master_seed: u64,
    a1_nonresonance: CheckA1,
    a2_regularity: &'a str,
    a3_a5_moments: CheckMoments,
    a4_noise_rank: CheckA4,
    coercivity: CheckCoercivity,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct CheckA1 {
    samples: usize,
    flagged: usize,
    min_ratio: f64,
    pass: bool,
}

#[derive(Serialize)]
struct CheckA4 {
    samples: usize,
    flagged: usize,
    min_sigma_min: f64,
    pass: bool,
}

#[derive(Serialize)]
struct CheckCoercivity {
    alpha1: f64,
    alpha2: f64,
    max_margin: f64,
    pass: bool,
}

#[derive(Serialize)]
struct CheckMoments {
    orders: Vec<u32>,
    slopes: Vec<f64>,
    flagged: Vec<bool>,
    pass: bool,
}

/// `check`: assumption report (non-resonance, noise rank, coercivity,
/// moment boundedness probe). Report-only: always exits 0.
pub fn cmd_check(cfg: ExperimentConfig) -> Result<(), CliError> {
    use rand::{Rng, SeedableRng};
    let exp = Experiment::prepare(cfg)?;
    let out = exp.cfg.output.dir.clone();
    let n = exp.cfg.model.n;
    let count = exp.cfg.check.samples.max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(exp.cfg.run.master_seed ^ 0xC4EC);

    let mut i_samples: Vec<RVec> = vec![exp.v0.actions()];
    for _ in 0..count {
        i_samples.push(RVec::from_fn(n, |_, _| rng.random_range(0.05..2.0)));
    }
    let a1 = resonance_scan(&exp.model.hamiltonian, &i_samples, exp.cfg.check.s_max)
        .map_err(numerical)?;
    let min_ratio = a1
        .samples
        .iter()
        .map(|s| s.min_ratio)
        .fold(f64::INFINITY, f64::min);

    let mut v_samples: Vec<CVec> = Vec::with_capacity(count);
    for _ in 0..count {
        v_samples.push(CVec::from_fn(n, |_, _| {
            Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        }));
    }
    let a4 = check_rank(&exp.model.dispersion, &v_samples).map_err(numerical)?;
    let min_sigma = a4
        .samples
        .iter()
        .map(|s| s.sigma_min)
        .fold(f64::INFINITY, f64::min);

    let coercivity = check_coercivity(
        &exp.model.perturbation,
        &v_samples,
        exp.cfg.check.alpha1,
        exp.cfg.check.alpha2,
    )
    .map_err(numerical)?;

    // moment-growth probe on the full system with the first epsilon; the
    // trend is fitted over the second half of the probe horizon so that
    // relaxation toward equilibrium is not reported as growth
    let sys = exp.build_system("full", exp.cfg.run.epsilons[0])?;
    let probe_t = exp.cfg.check.probe_t.max(8.0 * exp.cfg.run.dtau);
    let probe_cfg = PathConfig {
        dtau: exp.cfg.run.dtau,
        t_final: probe_t,
        seed: exp.system_seed(3000),
        scheme: exp.scheme(),
    };
    let probe_times: Vec<f64> = (0..5)
        .map(|j| probe_t * (0.5 + 0.125 * j as f64))
        .collect();
    let probe_n = exp.cfg.check.probe_paths.max(2);
    let ens = run_ensemble(&sys, &exp.v0, probe_n, &probe_cfg, &probe_times, "probe")
        .map_err(numerical)?;
    let moments = moment_report(&ens, &MOMENT_ORDERS).map_err(numerical)?;

    let summary = CheckSummary {
        command: "check",
        version: env!("CARGO_PKG_VERSION"),
        master_seed: exp.cfg.run.master_seed,
        a1_nonresonance: CheckA1 {
            samples: i_samples.len(),
            flagged: a1.flagged_count,
            min_ratio,
            pass: a1.flagged_count == 0,
        },
        a2_regularity: "not machine-checkable: local Lipschitz continuity and polynomial growth \
                        of the model fields are a user obligation",
        a3_a5_moments: CheckMoments {
            orders: MOMENT_ORDERS.to_vec(),
            slopes: moments.growth.iter().map(|g| g.slope).collect(),
            flagged: moments.growth.iter().map(|g| g.flagged).collect(),
            pass: moments.growth.iter().all(|g| !g.flagged),
        },
        a4_noise_rank: CheckA4 {
            samples: v_samples.len(),
            flagged: a4.flagged_count,
            min_sigma_min: min_sigma,
            pass: a4.flagged_count == 0,
        },
        coercivity: CheckCoercivity {
            alpha1: exp.cfg.check.alpha1,
            alpha2: exp.cfg.check.alpha2,
            max_margin: coercivity.max_margin,
            pass: coercivity.pass,
        },
        config: &exp.cfg,
    };
    atomic_write(&out.join("check.json"), &json_bytes(&summary)?)
}
