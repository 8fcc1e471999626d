//! Parallel Monte Carlo ensembles and the statistics used to compare
//! action laws: empirical distributions, Wasserstein-1 distances,
//! moment tables, exit times and stationary estimates.
//!
//! Determinism contract: every statistic is a pure function of
//! `(master seed, configuration)`. Paths carry independent seeds derived
//! from the master seed, results are collected in path order, and all
//! reductions run sequentially after the parallel join, so worker count
//! never changes a number.

use rayon::prelude::*;

use crate::sde::{
    derive_path_seed, integrate_observe, sample_wiener_increments, PathConfig, SdeSystem, State,
    StepDecision,
};
use crate::state::DomainBox;
use crate::{Error, Result};

/// Moment orders probed by the boundedness checks ("first few moments").
pub const MOMENT_ORDERS: [u32; 3] = [1, 2, 4];

/// Quantile-grid size for distances between unequal-size samples.
const QUANTILE_GRID: usize = 512;

/// Snapshot states of `N` independent paths.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// Grid-aligned snapshot times.
    snapshot_taus: Vec<f64>,
    /// Per path: `None` when the path diverged, else one state per
    /// snapshot time.
    paths: Vec<Option<Vec<State>>>,
    pub master_seed: u64,
    pub tag: String,
    dtau: f64,
}

impl Ensemble {
    pub fn n_requested(&self) -> usize {
        self.paths.len()
    }

    pub fn diverged_count(&self) -> usize {
        self.paths.iter().filter(|p| p.is_none()).count()
    }

    pub fn n_effective(&self) -> usize {
        self.paths.len() - self.diverged_count()
    }

    /// True when more than 10% of the paths diverged; statistics on the
    /// remainder are still returned but should not be trusted.
    pub fn divergence_warning(&self) -> bool {
        10 * self.diverged_count() > self.n_requested()
    }

    pub fn snapshot_taus(&self) -> &[f64] {
        &self.snapshot_taus
    }

    fn snapshot_slot(&self, tau: f64) -> Result<usize> {
        self.snapshot_taus
            .iter()
            .position(|&t| (t - tau).abs() <= 0.5 * self.dtau + 1e-12)
            .ok_or(Error::UnknownSnapshot { tau })
    }

    /// Non-diverged states at a snapshot time, in path order.
    pub fn states_at(&self, tau: f64) -> Result<Vec<&State>> {
        let slot = self.snapshot_slot(tau)?;
        Ok(self
            .paths
            .iter()
            .filter_map(|p| p.as_ref().map(|snaps| &snaps[slot]))
            .collect())
    }

    /// Per-coordinate action distribution at a snapshot time.
    pub fn action_distribution(&self, tau: f64) -> Result<EmpiricalDistribution> {
        let states = self.states_at(tau)?;
        distribution_of_states(&states)
    }

    /// Splits the ensemble by path index into two halves and returns their
    /// action distributions (the Monte Carlo noise-floor construction).
    pub fn half_distributions(
        &self,
        tau: f64,
    ) -> Result<(EmpiricalDistribution, EmpiricalDistribution)> {
        let slot = self.snapshot_slot(tau)?;
        let mid = self.paths.len() / 2;
        let first: Vec<&State> = self.paths[..mid]
            .iter()
            .filter_map(|p| p.as_ref().map(|s| &s[slot]))
            .collect();
        let second: Vec<&State> = self.paths[mid..]
            .iter()
            .filter_map(|p| p.as_ref().map(|s| &s[slot]))
            .collect();
        Ok((
            distribution_of_states(&first)?,
            distribution_of_states(&second)?,
        ))
    }
}

fn distribution_of_states(states: &[&State]) -> Result<EmpiricalDistribution> {
    let Some(first) = states.first() else {
        return Err(Error::invalid("no surviving paths in snapshot"));
    };
    let dim = first.dim();
    let mut per_coord = vec![Vec::with_capacity(states.len()); dim];
    for s in states {
        let actions = s.actions();
        for k in 0..dim {
            per_coord[k].push(actions[k]);
        }
    }
    EmpiricalDistribution::from_unsorted(per_coord)
}

/// Runs `n` independent paths of `sys` from `x0` and collects the states
/// at the requested snapshot times (rounded to the step grid).
/// Deterministic given `cfg.seed`; diverged paths are dropped from
/// statistics and counted.
pub fn run_ensemble(
    sys: &SdeSystem,
    x0: &State,
    n: usize,
    cfg: &PathConfig,
    snapshot_times: &[f64],
    tag: impl Into<String>,
) -> Result<Ensemble> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::invalid("ensembles need at least two paths"));
    }
    if snapshot_times.is_empty() {
        return Err(Error::invalid("at least one snapshot time is required"));
    }
    let steps = cfg.steps();
    for &t in snapshot_times {
        if !(0.0..=cfg.dtau * steps as f64 + 1e-12).contains(&t) {
            return Err(Error::invalid(format!(
                "snapshot time {t} outside the integration window"
            )));
        }
    }
    let mut snap_indices: Vec<usize> = snapshot_times.iter().map(|&t| cfg.step_index(t)).collect();
    snap_indices.sort_unstable();
    snap_indices.dedup();
    let snapshot_taus: Vec<f64> = snap_indices.iter().map(|&i| i as f64 * cfg.dtau).collect();

    let paths: Vec<Result<Option<Vec<State>>>> = (0..n as u64)
        .into_par_iter()
        .map(|path_idx| {
            let seed = derive_path_seed(cfg.seed, path_idx);
            let table =
                sample_wiener_increments(sys.noise_dim(), steps, cfg.dtau, seed, sys.noise_kind());
            let mut snaps: Vec<State> = Vec::with_capacity(snap_indices.len());
            let mut cursor = 0usize;
            let outcome = integrate_observe(sys, x0, &table, cfg.scheme, |idx, state| {
                while cursor < snap_indices.len() && snap_indices[cursor] == idx {
                    snaps.push(state.clone());
                    cursor += 1;
                }
                StepDecision::Continue
            })?;
            Ok(if outcome.diverged { None } else { Some(snaps) })
        })
        .collect();
    let paths = paths.into_iter().collect::<Result<Vec<_>>>()?;

    Ok(Ensemble {
        snapshot_taus,
        paths,
        master_seed: cfg.seed,
        tag: tag.into(),
        dtau: cfg.dtau,
    })
}

/// Per-coordinate sorted samples of a scalar observable (actions).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    per_coord: Vec<Vec<f64>>,
}

impl EmpiricalDistribution {
    pub fn from_unsorted(mut per_coord: Vec<Vec<f64>>) -> Result<Self> {
        if per_coord.is_empty() || per_coord[0].is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        let len = per_coord[0].len();
        if per_coord.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("ragged sample columns"));
        }
        if per_coord.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("empirical distribution"));
        }
        for c in per_coord.iter_mut() {
            c.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        }
        Ok(Self { per_coord })
    }

    pub fn dim(&self) -> usize {
        self.per_coord.len()
    }

    pub fn len(&self) -> usize {
        self.per_coord[0].len()
    }

    /// Sorted samples of coordinate `k`.
    pub fn coord(&self, k: usize) -> &[f64] {
        &self.per_coord[k]
    }

    pub fn mean(&self, k: usize) -> f64 {
        let c = &self.per_coord[k];
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// Empirical quantile (left-continuous inverse CDF).
    pub fn quantile(&self, k: usize, q: f64) -> f64 {
        let c = &self.per_coord[k];
        let idx = ((q * c.len() as f64).ceil() as usize).clamp(1, c.len()) - 1;
        c[idx]
    }
}

/// Per-coordinate Wasserstein-1 distances and their maximum.
#[derive(Debug, Clone)]
pub struct W1Report {
    pub per_coordinate: Vec<f64>,
    pub max: f64,
}

/// Wasserstein-1 distance between two per-coordinate sample sets: for
/// equal sizes the mean absolute difference of sorted samples, otherwise a
/// 512-point quantile-grid coupling.
pub fn wasserstein1(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> Result<W1Report> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            what: "wasserstein1",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut per = Vec::with_capacity(a.dim());
    for k in 0..a.dim() {
        let (sa, sb) = (a.coord(k), b.coord(k));
        let d = if sa.len() == sb.len() {
            sa.iter()
                .zip(sb.iter())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / sa.len() as f64
        } else {
            (0..QUANTILE_GRID)
                .map(|j| {
                    let q = (j as f64 + 0.5) / QUANTILE_GRID as f64;
                    (a.quantile(k, q) - b.quantile(k, q)).abs()
                })
                .sum::<f64>()
                / QUANTILE_GRID as f64
        };
        per.push(d);
    }
    let max = per.iter().cloned().fold(0.0, f64::max);
    Ok(W1Report {
        per_coordinate: per,
        max,
    })
}

/// Monte Carlo noise floor at a snapshot: the distance between the two
/// half-ensembles. Comparisons should be read against a small multiple of
/// this floor.
pub fn noise_floor(ens: &Ensemble, tau: f64) -> Result<W1Report> {
    let (first, second) = ens.half_distributions(tau)?;
    wasserstein1(&first, &second)
}

#[derive(Debug, Clone)]
pub struct MomentRow {
    pub tau: f64,
    pub order: u32,
    /// `E ‖x‖^order` over surviving paths (state norm: `|v|` or `|I|`).
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct GrowthFlag {
    pub order: u32,
    /// Slope of the linear fit of `ln E‖x‖^m` against τ.
    pub slope: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    pub growth: Vec<GrowthFlag>,
}

/// Moment table over the snapshot times with a growth-trend flag per
/// order (slope of log-moment vs τ above 0.1).
pub fn moment_report(ens: &Ensemble, orders: &[u32]) -> Result<MomentReport> {
    let mut rows = Vec::new();
    for &tau in ens.snapshot_taus() {
        let states = ens.states_at(tau)?;
        if states.is_empty() {
            return Err(Error::invalid("no surviving paths for moment report"));
        }
        for &order in orders {
            let value = states
                .iter()
                .map(|s| match s {
                    State::Complex(v) => v.norm().powi(order as i32),
                    State::Action(i) => i.norm().powi(order as i32),
                })
                .sum::<f64>()
                / states.len() as f64;
            rows.push(MomentRow { tau, order, value });
        }
    }
    let mut growth = Vec::new();
    for &order in orders {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.order == order && r.value > 0.0)
            .map(|r| (r.tau, r.value.ln()))
            .collect();
        let slope = if pts.len() >= 2 { fit_slope(&pts) } else { 0.0 };
        growth.push(GrowthFlag {
            order,
            slope,
            flagged: slope > 0.1,
        });
    }
    Ok(MomentReport { rows, growth })
}

fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Power-law fit of the exit-time CDF over the window `0.01 ≤ P ≤ 0.5`.
#[derive(Debug, Clone)]
pub struct ExitFit {
    /// Fitted exponent `p` in `P(θ ≤ λ) ≈ C λ^p`.
    pub exponent: f64,
    pub constant: f64,
    /// `max P(θ≤λ)/√λ` over the fit window.
    pub sup_cdf_over_sqrt: f64,
}

#[derive(Debug, Clone)]
pub struct ExitReport {
    pub lambdas: Vec<f64>,
    pub cdf: Vec<f64>,
    pub exits: usize,
    pub n_paths: usize,
    /// Present when at least two CDF points fall into the fit window.
    pub fit: Option<ExitFit>,
    /// False when fewer than 50 exits were observed (fit unreliable).
    pub reliable: bool,
}

/// First-passage statistics out of the box `Q = {|v_j| ≤ C_j}`: exit time
/// per path (first grid time outside), empirical CDF on a log-spaced λ
/// grid, and a least-squares power-law fit in the central window.
/// Diverged paths count as exits at their divergence time.
pub fn exit_time_stats(
    sys: &SdeSystem,
    x0: &State,
    bbox: &DomainBox,
    n: usize,
    cfg: &PathConfig,
) -> Result<ExitReport> {
    cfg.validate()?;
    let State::Complex(v0) = x0 else {
        return Err(Error::invalid(
            "exit-time studies run on the complex-space system",
        ));
    };
    if bbox.dim() != v0.len() {
        return Err(Error::Dimension {
            what: "exit box",
            expected: v0.len(),
            got: bbox.dim(),
        });
    }
    if !v0
        .iter()
        .zip(bbox.radii().iter())
        .all(|(vj, &cj)| vj.norm() < cj)
    {
        return Err(Error::invalid(
            "initial state must lie strictly inside the box",
        ));
    }
    if n < 2 {
        return Err(Error::invalid("exit study needs at least two paths"));
    }
    let steps = cfg.steps();

    let exit_times: Vec<Result<Option<f64>>> = (0..n as u64)
        .into_par_iter()
        .map(|path_idx| {
            let seed = derive_path_seed(cfg.seed, path_idx);
            let table =
                sample_wiener_increments(sys.noise_dim(), steps, cfg.dtau, seed, sys.noise_kind());
            let mut exit: Option<f64> = None;
            let outcome = integrate_observe(sys, x0, &table, cfg.scheme, |idx, state| {
                let inside = match state {
                    State::Complex(v) => bbox.contains(v),
                    State::Action(_) => true,
                };
                if !inside {
                    exit = Some(idx as f64 * cfg.dtau);
                    StepDecision::Stop
                } else {
                    StepDecision::Continue
                }
            })?;
            if exit.is_none() && outcome.diverged {
                exit = Some((outcome.last_step + 1) as f64 * cfg.dtau);
            }
            Ok(exit)
        })
        .collect();
    let exit_times = exit_times.into_iter().collect::<Result<Vec<_>>>()?;

    let mut thetas: Vec<f64> = exit_times.iter().filter_map(|t| *t).collect();
    thetas.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let exits = thetas.len();

    let t_final = steps as f64 * cfg.dtau;
    let grid = 64;
    let lambdas: Vec<f64> = (0..grid)
        .map(|j| {
            let f = j as f64 / (grid - 1) as f64;
            cfg.dtau * (t_final / cfg.dtau).powf(f)
        })
        .collect();
    let cdf: Vec<f64> = lambdas
        .iter()
        .map(|&lam| {
            let count = thetas.partition_point(|&t| t <= lam + 1e-15);
            count as f64 / n as f64
        })
        .collect();

    let window: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(cdf.iter())
        .filter(|&(_, &p)| (0.01..=0.5).contains(&p))
        .map(|(&l, &p)| (l.ln(), p.ln()))
        .collect();
    let fit = if window.len() >= 2 {
        let slope = fit_slope(&window);
        let my = window.iter().map(|p| p.1).sum::<f64>() / window.len() as f64;
        let mx = window.iter().map(|p| p.0).sum::<f64>() / window.len() as f64;
        let constant = (my - slope * mx).exp();
        let sup = lambdas
            .iter()
            .zip(cdf.iter())
            .filter(|&(_, &p)| (0.01..=0.5).contains(&p))
            .map(|(&l, &p)| p / l.sqrt())
            .fold(0.0f64, f64::max);
        Some(ExitFit {
            exponent: slope,
            constant,
            sup_cdf_over_sqrt: sup,
        })
    } else {
        None
    };

    Ok(ExitReport {
        lambdas,
        cdf,
        exits,
        n_paths: n,
        fit,
        reliable: exits >= 50,
    })
}

/// Pooled post-burn-in action distribution, with a stationarity check
/// comparing the first and second halves of the time window against the
/// Monte Carlo noise floor.
#[derive(Debug, Clone)]
pub struct StationaryEstimate {
    pub distribution: EmpiricalDistribution,
    /// Distance between the early and late halves of the window.
    pub halves_distance: W1Report,
    /// Path-split noise floor of the pooled distribution.
    pub floor: W1Report,
    pub warning: Option<String>,
}

/// Pools action snapshots on `(burn_in, t_final]` into one distribution
/// (16 snapshot times). Warns when the window halves disagree beyond 3×
/// the noise floor or when the estimate is degenerate (zero floor).
pub fn stationary_estimate(
    sys: &SdeSystem,
    x0: &State,
    burn_in: f64,
    t_final: f64,
    n: usize,
    cfg: &PathConfig,
) -> Result<StationaryEstimate> {
    if !(burn_in >= 0.0) || burn_in >= t_final {
        return Err(Error::invalid("need 0 <= burn_in < t_final"));
    }
    let snaps = 16;
    let times: Vec<f64> = (0..snaps)
        .map(|j| burn_in + (j as f64 + 1.0) * (t_final - burn_in) / snaps as f64)
        .collect();
    let cfg = PathConfig { t_final, ..*cfg };
    let ens = run_ensemble(sys, x0, n, &cfg, &times, "stationary")?;
    let dim = sys.dim();

    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let mut early: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let mut late: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let mut pooled_first: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let mut pooled_second: Vec<Vec<f64>> = vec![Vec::new(); dim];
    let snapshot_taus = ens.snapshot_taus().to_vec();
    for (pos, &tau) in snapshot_taus.iter().enumerate() {
        let states = ens.states_at(tau)?;
        let mid = states.len() / 2;
        for (i, s) in states.iter().enumerate() {
            let actions = s.actions();
            for k in 0..dim {
                pooled[k].push(actions[k]);
                if pos < snapshot_taus.len() / 2 {
                    early[k].push(actions[k]);
                } else {
                    late[k].push(actions[k]);
                }
                if i < mid {
                    pooled_first[k].push(actions[k]);
                } else {
                    pooled_second[k].push(actions[k]);
                }
            }
        }
    }
    let distribution = EmpiricalDistribution::from_unsorted(pooled)?;
    let halves_distance = wasserstein1(
        &EmpiricalDistribution::from_unsorted(early)?,
        &EmpiricalDistribution::from_unsorted(late)?,
    )?;
    let floor = wasserstein1(
        &EmpiricalDistribution::from_unsorted(pooled_first)?,
        &EmpiricalDistribution::from_unsorted(pooled_second)?,
    )?;
    let warning = if floor.max == 0.0 {
        Some("degenerate estimate: zero noise floor (no randomness reached the actions)".to_string())
    } else if halves_distance.max > 3.0 * floor.max {
        Some(format!(
            "window halves differ by {:.3e} > 3x noise floor {:.3e}: not stationary yet",
            halves_distance.max, floor.max
        ))
    } else {
        None
    };
    Ok(StationaryEstimate {
        distribution,
        halves_distance,
        floor,
        warning,
    })
}
