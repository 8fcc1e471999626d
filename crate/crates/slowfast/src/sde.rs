//! SDE systems and their integrators.
//!
//! Conventions, fixed once for the whole crate:
//! - Itô calculus throughout.
//! - A complex Wiener process is `βᶜ = β⁺ + iβ⁻` with independent standard
//!   real parts, so `E|Δβᶜ|² = 2·dtau`. Sampled complex increments are laid
//!   out interleaved per component: `(re_1, im_1, re_2, im_2, …)`.
//! - The stiff rotation of the full system is integrated exactly
//!   (rotation-first Lie-Trotter splitting); its cost and stability are
//!   independent of ε.
//! - The averaged action equation has square-root coefficient
//!   singularities on `∂ℝ₊ⁿ`; its stepper is full-truncation Euler, which
//!   never evaluates coefficients at negative actions and maps `ℝ₊ⁿ` into
//!   itself.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fields::IntegrableHamiltonian;
use crate::state::{actions_of, rotate};
use crate::{CMat, CVec, Error, RMat, RVec, Result};

/// Real or complex driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Complex,
    Real,
}

/// Time-stepping scheme for complex-space systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Plain Euler-Maruyama (the stiff term, when present, joins the drift).
    Euler,
    /// Exact rotation, then Euler-Maruyama on the perturbation.
    Splitting,
}

pub type ComplexDriftFn = Arc<dyn Fn(&CVec) -> Result<CVec> + Send + Sync>;
pub type ComplexDispersionFn = Arc<dyn Fn(&CVec) -> Result<CMat> + Send + Sync>;
pub type ActionDriftFn = Arc<dyn Fn(&RVec) -> Result<RVec> + Send + Sync>;
pub type ActionDispersionFn = Arc<dyn Fn(&RVec) -> Result<RMat> + Send + Sync>;

/// Stiff rotation part `i ε⁻¹ diag{∇_k H(I)} v` of the full system.
#[derive(Clone)]
pub struct StiffPart {
    pub hamiltonian: IntegrableHamiltonian,
    pub eps: f64,
}

/// SDE on `ℂⁿ` driven by complex noise, optionally stiff.
#[derive(Clone)]
pub struct ComplexSde {
    pub dim: usize,
    /// Number of driving complex Wiener components.
    pub noise_dim: usize,
    pub drift: ComplexDriftFn,
    pub dispersion: ComplexDispersionFn,
    pub stiff: Option<StiffPart>,
}

/// SDE on `ℝ₊ⁿ` (actions) driven by real noise.
#[derive(Clone)]
pub struct ActionSde {
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: ActionDriftFn,
    pub dispersion: ActionDispersionFn,
}

/// A drift/dispersion pair over one of the two state spaces.
#[derive(Clone)]
pub enum SdeSystem {
    Complex(ComplexSde),
    Action(ActionSde),
}

impl SdeSystem {
    pub fn dim(&self) -> usize {
        match self {
            SdeSystem::Complex(s) => s.dim,
            SdeSystem::Action(s) => s.dim,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match self {
            SdeSystem::Complex(s) => s.noise_dim,
            SdeSystem::Action(s) => s.noise_dim,
        }
    }

    pub fn noise_kind(&self) -> NoiseKind {
        match self {
            SdeSystem::Complex(_) => NoiseKind::Complex,
            SdeSystem::Action(_) => NoiseKind::Real,
        }
    }

    /// Width of one increment row: `2m` for complex noise, `m` for real.
    pub fn increment_width(&self) -> usize {
        match self.noise_kind() {
            NoiseKind::Complex => 2 * self.noise_dim(),
            NoiseKind::Real => self.noise_dim(),
        }
    }
}

/// A state of either system kind.
#[derive(Debug, Clone, PartialEq)]
pub enum State {
    Complex(CVec),
    Action(RVec),
}

impl State {
    pub fn dim(&self) -> usize {
        match self {
            State::Complex(v) => v.len(),
            State::Action(i) => i.len(),
        }
    }

    /// Actions of the state: `I_k = ½|v_k|²` on complex space, identity on
    /// action space.
    pub fn actions(&self) -> RVec {
        match self {
            State::Complex(v) => actions_of(v),
            State::Action(i) => i.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            State::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
            State::Action(i) => i.iter().all(|x| x.is_finite()),
        }
    }

    pub fn as_complex(&self) -> Option<&CVec> {
        match self {
            State::Complex(v) => Some(v),
            State::Action(_) => None,
        }
    }
}

/// Slow-time integration parameters.
#[derive(Debug, Clone, Copy)]
pub struct PathConfig {
    pub dtau: f64,
    pub t_final: f64,
    pub seed: u64,
    pub scheme: Scheme,
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dtau > 0.0) || !self.dtau.is_finite() {
            return Err(Error::invalid("dtau must be positive"));
        }
        if !(self.t_final >= self.dtau) {
            return Err(Error::invalid("t_final must be at least dtau"));
        }
        Ok(())
    }

    /// Step count, rounded up so the grid covers `[0, t_final]`.
    pub fn steps(&self) -> usize {
        (self.t_final / self.dtau - 1e-9).ceil().max(1.0) as usize
    }

    /// Grid index of slow time `t` (nearest grid point, clamped).
    pub fn step_index(&self, t: f64) -> usize {
        ((t / self.dtau).round().max(0.0) as usize).min(self.steps())
    }
}

/// Deterministic per-path seed derived from a master seed (splitmix64).
pub fn derive_path_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Table of Wiener increments, one row per step.
#[derive(Debug, Clone)]
pub struct WienerTable {
    pub steps: usize,
    /// Row width: `m` for real noise, `2m` interleaved for complex.
    pub width: usize,
    pub dtau: f64,
    data: Vec<f64>,
}

impl WienerTable {
    pub fn row(&self, step: usize) -> &[f64] {
        &self.data[step * self.width..(step + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sums groups of `factor` consecutive rows into one coarse table with
    /// step `factor · dtau` (used by step-refinement studies).
    pub fn coarsen(&self, factor: usize) -> WienerTable {
        assert!(factor >= 1 && self.steps % factor == 0);
        let steps = self.steps / factor;
        let mut data = vec![0.0; steps * self.width];
        for coarse in 0..steps {
            for sub in 0..factor {
                let row = self.row(coarse * factor + sub);
                for (acc, &x) in data[coarse * self.width..(coarse + 1) * self.width]
                    .iter_mut()
                    .zip(row)
                {
                    *acc += x;
                }
            }
        }
        WienerTable {
            steps,
            width: self.width,
            dtau: self.dtau * factor as f64,
            data,
        }
    }
}

/// Samples i.i.d. Gaussian increments with variance `dtau` per real
/// component. Complex noise gets two real components per Wiener component
/// (`E|Δβᶜ|² = 2·dtau`), laid out interleaved `(re, im)`. Fully determined
/// by the seed.
pub fn sample_wiener_increments(
    m: usize,
    steps: usize,
    dtau: f64,
    seed: u64,
    kind: NoiseKind,
) -> WienerTable {
    let width = match kind {
        NoiseKind::Complex => 2 * m,
        NoiseKind::Real => m,
    };
    let scale = dtau.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..steps * width)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    WienerTable {
        steps,
        width,
        dtau,
        data,
    }
}

// ---------------------------------------------------------------------------
// Single steps
// ---------------------------------------------------------------------------

/// `B(v) · Δβᶜ` with interleaved real increments.
fn apply_complex_noise(bmat: &CMat, dbeta: &[f64], out: &mut CVec) {
    let (n, m) = bmat.shape();
    debug_assert_eq!(dbeta.len(), 2 * m);
    for k in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..m {
            acc += bmat[(k, j)] * Complex64::new(dbeta[2 * j], dbeta[2 * j + 1]);
        }
        out[k] += acc;
    }
}

fn complex_em_core(sys: &ComplexSde, v: &CVec, dbeta: &[f64], dtau: f64, with_stiff: bool) -> Result<CVec> {
    let drift = (sys.drift)(v)?;
    let mut next = v.clone();
    next.axpy(Complex64::new(dtau, 0.0), &drift, Complex64::new(1.0, 0.0));
    if with_stiff {
        if let Some(stiff) = &sys.stiff {
            let freq = stiff.hamiltonian.frequencies(&actions_of(v));
            let factor = dtau / stiff.eps;
            for k in 0..v.len() {
                next[k] += Complex64::new(0.0, freq[k] * factor) * v[k];
            }
        }
    }
    let bmat = (sys.dispersion)(v)?;
    apply_complex_noise(&bmat, dbeta, &mut next);
    if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("euler step state"));
    }
    Ok(next)
}

/// One Euler-Maruyama step `x' = x + drift·dtau + dispersion·Δβ`. On a
/// stiff complex system the rotation term joins the drift (use the
/// splitting step for stiff integration).
pub fn euler_maruyama_step(sys: &SdeSystem, x: &State, dbeta: &[f64], dtau: f64) -> Result<State> {
    match (sys, x) {
        (SdeSystem::Complex(s), State::Complex(v)) => {
            Ok(State::Complex(complex_em_core(s, v, dbeta, dtau, true)?))
        }
        (SdeSystem::Action(s), State::Action(i)) => {
            let drift = (s.drift)(i)?;
            let g = (s.dispersion)(i)?;
            let mut next = i.clone();
            next.axpy(dtau, &drift, 1.0);
            for k in 0..i.len() {
                let mut acc = 0.0;
                for j in 0..g.ncols() {
                    acc += g[(k, j)] * dbeta[j];
                }
                next[k] += acc;
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("euler step state"));
            }
            Ok(State::Action(next))
        }
        _ => Err(Error::invalid("state kind does not match system kind")),
    }
}

/// Lie-Trotter step for the stiff system: exact rotation by
/// `∇H(I(v))·dtau/ε`, then Euler-Maruyama on the perturbation at the
/// rotated point.
pub fn splitting_step(sys: &ComplexSde, v: &CVec, dbeta: &[f64], dtau: f64) -> Result<CVec> {
    let Some(stiff) = &sys.stiff else {
        return Err(Error::invalid("splitting step needs a stiff rotation part"));
    };
    let freq = stiff.hamiltonian.frequencies(&actions_of(v));
    let factor = dtau / stiff.eps;
    let omega = RVec::from_iterator(v.len(), freq.iter().map(|&f| f * factor));
    let half = rotate(v, &omega);
    complex_em_core(sys, &half, dbeta, dtau, false)
}

/// Full-truncation Euler step for the action equation: coefficients are
/// evaluated at `I⁺ = max(I, 0)` and the result is clamped back onto
/// `ℝ₊ⁿ`, so square roots never see negative arguments.
pub fn action_step_truncated(sys: &ActionSde, actions: &RVec, dbeta: &[f64], dtau: f64) -> Result<RVec> {
    let plus = actions.map(|x| x.max(0.0));
    let drift = (sys.drift)(&plus)?;
    let g = (sys.dispersion)(&plus)?;
    let mut next = plus.clone();
    next.axpy(dtau, &drift, 1.0);
    for k in 0..plus.len() {
        let mut acc = 0.0;
        for j in 0..g.ncols() {
            acc += g[(k, j)] * dbeta[j];
        }
        next[k] += acc;
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("truncated action step"));
    }
    Ok(next.map(|x| x.max(0.0)))
}

fn step_state(sys: &SdeSystem, x: &State, dbeta: &[f64], dtau: f64, scheme: Scheme) -> Result<State> {
    match (sys, x) {
        (SdeSystem::Complex(s), State::Complex(v)) => {
            let next = match (scheme, &s.stiff) {
                (Scheme::Splitting, Some(_)) => splitting_step(s, v, dbeta, dtau)?,
                _ => complex_em_core(s, v, dbeta, dtau, true)?,
            };
            Ok(State::Complex(next))
        }
        (SdeSystem::Action(s), State::Action(i)) => {
            Ok(State::Action(action_step_truncated(s, i, dbeta, dtau)?))
        }
        _ => Err(Error::invalid("state kind does not match system kind")),
    }
}

// ---------------------------------------------------------------------------
// Path integration
// ---------------------------------------------------------------------------

/// Whether to keep integrating after an observer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDecision {
    Continue,
    Stop,
}

/// Outcome of an observed integration.
#[derive(Debug, Clone, Copy)]
pub struct IntegrateOutcome {
    /// Last completed step index (state at `τ = last_step · dtau`).
    pub last_step: usize,
    pub diverged: bool,
}

/// Drives a path with the given increments, invoking the observer with
/// `(step_index, state)` for the initial state (index 0) and after every
/// step. A non-finite step flags the path as diverged and stops it.
pub fn integrate_observe<F>(
    sys: &SdeSystem,
    x0: &State,
    table: &WienerTable,
    scheme: Scheme,
    mut observe: F,
) -> Result<IntegrateOutcome>
where
    F: FnMut(usize, &State) -> StepDecision,
{
    if x0.dim() != sys.dim() {
        return Err(Error::Dimension {
            what: "integrate initial state",
            expected: sys.dim(),
            got: x0.dim(),
        });
    }
    if table.width != sys.increment_width() {
        return Err(Error::Dimension {
            what: "integrate increment width",
            expected: sys.increment_width(),
            got: table.width,
        });
    }
    let mut x = x0.clone();
    if observe(0, &x) == StepDecision::Stop {
        return Ok(IntegrateOutcome {
            last_step: 0,
            diverged: false,
        });
    }
    for step in 0..table.steps {
        match step_state(sys, &x, table.row(step), table.dtau, scheme) {
            Ok(next) => x = next,
            Err(Error::NonFinite(_)) => {
                return Ok(IntegrateOutcome {
                    last_step: step,
                    diverged: true,
                })
            }
            Err(e) => return Err(e),
        }
        if observe(step + 1, &x) == StepDecision::Stop {
            return Ok(IntegrateOutcome {
                last_step: step + 1,
                diverged: false,
            });
        }
    }
    Ok(IntegrateOutcome {
        last_step: table.steps,
        diverged: false,
    })
}

/// A realized trajectory on the slow-time grid.
#[derive(Debug, Clone)]
pub struct Path {
    pub dtau: f64,
    pub states: Vec<State>,
    /// True when the path hit a non-finite state; `states` then holds the
    /// partial path up to the last finite point.
    pub diverged: bool,
}

impl Path {
    pub fn tau(&self, idx: usize) -> f64 {
        idx as f64 * self.dtau
    }
}

/// Integrates one path with increments from the given table.
pub fn integrate_with_table(
    sys: &SdeSystem,
    x0: &State,
    table: &WienerTable,
    scheme: Scheme,
) -> Result<Path> {
    let mut states = Vec::with_capacity(table.steps + 1);
    let outcome = integrate_observe(sys, x0, table, scheme, |_, x| {
        states.push(x.clone());
        StepDecision::Continue
    })?;
    Ok(Path {
        dtau: table.dtau,
        states,
        diverged: outcome.diverged,
    })
}

/// Samples increments from `cfg.seed` and integrates over
/// `⌈t_final/dtau⌉` steps.
pub fn integrate_path(sys: &SdeSystem, x0: &State, cfg: &PathConfig) -> Result<Path> {
    cfg.validate()?;
    let table = sample_wiener_increments(
        sys.noise_dim(),
        cfg.steps(),
        cfg.dtau,
        cfg.seed,
        sys.noise_kind(),
    );
    integrate_with_table(sys, x0, &table, cfg.scheme)
}

// ---------------------------------------------------------------------------
// Classical RK4 (deterministic averaged equation, oscillator orbits)
// ---------------------------------------------------------------------------

/// One classical Runge-Kutta step for `ẋ = rhs(x)`.
pub fn rk4_step<F>(rhs: &F, x: &RVec, dt: f64) -> Result<RVec>
where
    F: Fn(&RVec) -> Result<RVec> + ?Sized,
{
    let k1 = rhs(x)?;
    let k2 = rhs(&(x + 0.5 * dt * &k1))?;
    let k3 = rhs(&(x + 0.5 * dt * &k2))?;
    let k4 = rhs(&(x + dt * &k3))?;
    Ok(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Integrates `ẋ = rhs(x)` with RK4 on a fixed grid, returning every node.
pub fn rk4_path<F>(rhs: &F, x0: &RVec, dt: f64, t_final: f64) -> Result<Vec<(f64, RVec)>>
where
    F: Fn(&RVec) -> Result<RVec> + ?Sized,
{
    if !(dt > 0.0) || !(t_final >= dt) {
        return Err(Error::invalid("rk4_path needs 0 < dt <= t_final"));
    }
    let steps = (t_final / dt - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push((0.0, x.clone()));
    for step in 0..steps {
        x = rk4_step(rhs, &x, dt)?;
        out.push(((step + 1) as f64 * dt, x.clone()));
    }
    Ok(out)
}
