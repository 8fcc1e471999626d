//! Action-angle construction for the 1-dof oscillator `q̈ = −Q(q)` with
//! odd convex restoring force `Q` and potential `V` (`V' = Q`, `V(0) = 0`).
//!
//! With `E = ½p² + V(q)` and turning point `V(q_max) = E`:
//!
//! ```text
//! I(E) = (1/π) ∫_{−q_max}^{q_max} √(2(E − V(q))) dq,
//! T(E) = 2 ∫_{−q_max}^{q_max} dq / √(2(E − V(q))),   ω = 2π/T = dE/dI.
//! ```
//!
//! The substitution `q = q_max sin ψ` removes the square-root endpoint
//! singularity, leaving smooth integrands for Gauss-Legendre quadrature.
//! The angle is the orbit time from the reference point
//! `(q, p) = (q_max, 0⁻)` scaled by ω, which matches the harmonic map
//! `v = √ω q − i p/√ω` (so `φ = ω t`).
//!
//! A chain site map memoizes `I(E)`, `ω(E)` and the inverse `E(I)` on an
//! energy grid with monotone-cubic interpolation; the grid is immutable
//! after the build phase.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::{Arc, OnceLock};

use crate::fields::IntegrableHamiltonian;
use crate::sde::rk4_step;
use crate::state::reduce_angle;
use crate::{Error, RVec, Result};

/// Number of Gauss-Legendre nodes for the period/action integrals.
const GL_NODES: usize = 64;

/// Odd convex restoring force with its potential.
#[derive(Clone)]
pub struct OscillatorPotential {
    force: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    potential: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Small-amplitude expansion `Q(q) = αq + βq³ + o(q⁴)`.
    pub alpha: f64,
    pub beta: f64,
}

impl OscillatorPotential {
    pub fn new(
        force: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        potential: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(Error::invalid("potential expansion needs alpha > 0, beta > 0"));
        }
        let pot = Self {
            force,
            potential,
            alpha,
            beta,
        };
        pot.validate()?;
        Ok(pot)
    }

    /// `Q(q) = αq + βq³`, `V(q) = ½αq² + ¼βq⁴`.
    pub fn quartic(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(
            Arc::new(move |q| alpha * q + beta * q * q * q),
            Arc::new(move |q| 0.5 * alpha * q * q + 0.25 * beta * q.powi(4)),
            alpha,
            beta,
        )
    }

    pub fn force(&self, q: f64) -> f64 {
        (self.force)(q)
    }

    pub fn potential(&self, q: f64) -> f64 {
        (self.potential)(q)
    }

    /// Oddness of `Q` and positivity of `Q'` on a deterministic sample set.
    fn validate(&self) -> Result<()> {
        let samples = 1000;
        for i in 0..samples {
            let q = -10.0 + 20.0 * (i as f64 + 0.5) / samples as f64;
            let odd = (self.force(q) + self.force(-q)).abs();
            if odd > 1e-12 * (1.0 + self.force(q).abs()) {
                return Err(Error::invalid(format!("restoring force is not odd at q = {q}")));
            }
            let dq = 1e-5;
            let slope = (self.force(q + dq) - self.force(q - dq)) / (2.0 * dq);
            if slope <= 0.0 {
                return Err(Error::invalid(format!("restoring force is not increasing at q = {q}")));
            }
        }
        Ok(())
    }
}

fn gl_table() -> &'static (Vec<f64>, Vec<f64>) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    TABLE.get_or_init(|| gauss_legendre(GL_NODES))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton on the Legendre
/// recurrence).
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev initial guess
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Turning point `q_max > 0` with `V(q_max) = E` (doubling bracket, then
/// bisection).
fn turning_point(pot: &OscillatorPotential, e: f64) -> Result<f64> {
    if !(e > 0.0) {
        return Err(Error::invalid(format!("oscillator energy must be positive, got {e}")));
    }
    let mut hi = 1.0;
    let mut guard = 0;
    while pot.potential(hi) < e {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::invalid("failed to bracket the turning point (potential not confining?)"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pot.potential(mid) < e {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Action `I(E)` and frequency `ω(E) = 2π/T(E)` of the closed orbit at
/// energy `E > 0`.
pub fn oscillator_action(pot: &OscillatorPotential, e: f64) -> Result<(f64, f64)> {
    let q_max = turning_point(pot, e)?;
    let (nodes, weights) = gl_table();
    // ψ ∈ [−π/2, π/2], q = q_max sin ψ
    let mut action = 0.0;
    let mut period = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        let psi = FRAC_PI_2 * x;
        let (s, c) = psi.sin_cos();
        let q = q_max * s;
        let kinetic = (2.0 * (e - pot.potential(q))).max(0.0);
        let speed = kinetic.sqrt();
        action += w * speed * c;
        if speed > 0.0 {
            period += w * c / speed;
        }
    }
    // Jacobian dq = q_max cos ψ dψ, interval scale π/2
    let action = action * q_max * FRAC_PI_2 / PI;
    let period = 2.0 * period * q_max * FRAC_PI_2;
    if !action.is_finite() || !period.is_finite() || period <= 0.0 {
        return Err(Error::NonFinite("oscillator period integral"));
    }
    Ok((action, TAU / period))
}

/// Orbit time from the reference point `(q_max, 0⁻)` to the phase point
/// with coordinate `q` on the lower branch (`p ≤ 0`):
/// `t = ∫_q^{q_max} ds / √(2(E − V(s)))`.
fn lower_branch_time(pot: &OscillatorPotential, e: f64, q_max: f64, q: f64) -> f64 {
    let psi_q = (q / q_max).clamp(-1.0, 1.0).asin();
    let (nodes, weights) = gl_table();
    let half = 0.5 * (FRAC_PI_2 - psi_q);
    let mid = 0.5 * (FRAC_PI_2 + psi_q);
    let mut t = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        let psi = mid + half * x;
        let (s, c) = psi.sin_cos();
        let kinetic = (2.0 * (e - pot.potential(q_max * s))).max(f64::MIN_POSITIVE);
        t += w * c / kinetic.sqrt();
    }
    t * q_max * half
}

/// Monotone cubic (Fritsch-Carlson) interpolant.
#[derive(Debug, Clone)]
struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl MonotoneCubic {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::invalid("interpolant needs at least two matching nodes"));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("interpolation abscissae must be strictly increasing"));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = y
            .windows(2)
            .zip(h.iter())
            .map(|(w, &hh)| (w[1] - w[0]) / hh)
            .collect();
        let mut d = vec![0.0; n];
        d[0] = endpoint_slope(h[0], h.get(1).copied().unwrap_or(h[0]), delta[0], delta.get(1).copied().unwrap_or(delta[0]));
        d[n - 1] = endpoint_slope(
            h[n - 2],
            if n >= 3 { h[n - 3] } else { h[n - 2] },
            delta[n - 2],
            if n >= 3 { delta[n - 3] } else { delta[n - 2] },
        );
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                d[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        Ok(Self { x, y, d })
    }

    fn eval(&self, xq: f64) -> f64 {
        let n = self.x.len();
        if xq <= self.x[0] {
            return self.y[0] + self.d[0] * (xq - self.x[0]);
        }
        if xq >= self.x[n - 1] {
            return self.y[n - 1] + self.d[n - 1] * (xq - self.x[n - 1]);
        }
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.x[mid] <= xq {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = self.x[hi] - self.x[lo];
        let t = (xq - self.x[lo]) / h;
        let (y0, y1) = (self.y[lo], self.y[hi]);
        let (d0, d1) = (self.d[lo], self.d[hi]);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + h * d0 * (t3 - 2.0 * t2 + t)
            + y1 * (-2.0 * t3 + 3.0 * t2)
            + h * d1 * (t3 - t2)
    }

    fn x_max(&self) -> f64 {
        *self.x.last().unwrap()
    }
}

fn endpoint_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Memoized action-angle map of one oscillator site.
pub struct OscillatorMap {
    pot: OscillatorPotential,
    e_grid_max: f64,
    i_of_e: MonotoneCubic,
    omega_of_e: MonotoneCubic,
    e_of_i: MonotoneCubic,
}

impl OscillatorMap {
    /// Tabulates `I(E)` and `ω(E)` on `[0, e_max]` (zero-energy limits are
    /// exact: `I(0) = 0`, `ω(0) = √α`) with `grid` geometric points.
    pub fn build(pot: OscillatorPotential, e_max: f64, grid: usize) -> Result<Self> {
        if !(e_max > 0.0) || grid < 16 {
            return Err(Error::invalid("oscillator map needs e_max > 0 and grid >= 16"));
        }
        let e_lo = e_max * 1e-8;
        let ratio = (e_max / e_lo).powf(1.0 / (grid - 1) as f64);
        let mut es = Vec::with_capacity(grid + 1);
        let mut is = Vec::with_capacity(grid + 1);
        let mut oms = Vec::with_capacity(grid + 1);
        es.push(0.0);
        is.push(0.0);
        oms.push(pot.alpha.sqrt());
        let mut e = e_lo;
        for _ in 0..grid {
            let (i, om) = oscillator_action(&pot, e)?;
            es.push(e);
            is.push(i);
            oms.push(om);
            e *= ratio;
        }
        let i_of_e = MonotoneCubic::new(es.clone(), is.clone())?;
        let omega_of_e = MonotoneCubic::new(es.clone(), oms)?;
        let e_of_i = MonotoneCubic::new(is, es)?;
        Ok(Self {
            pot,
            e_grid_max: e_max,
            i_of_e,
            omega_of_e,
            e_of_i,
        })
    }

    pub fn potential(&self) -> &OscillatorPotential {
        &self.pot
    }

    /// Interpolated `I(E)`; direct quadrature above the grid.
    pub fn action(&self, e: f64) -> Result<f64> {
        if e <= 0.0 {
            return if e == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::invalid("negative oscillator energy"))
            };
        }
        if e > self.e_grid_max {
            return Ok(oscillator_action(&self.pot, e)?.0);
        }
        Ok(self.i_of_e.eval(e).max(0.0))
    }

    /// Interpolated `ω(E)`; direct quadrature above the grid.
    pub fn frequency_of_energy(&self, e: f64) -> Result<f64> {
        if e < 0.0 {
            return Err(Error::invalid("negative oscillator energy"));
        }
        if e > self.e_grid_max {
            return Ok(oscillator_action(&self.pot, e)?.1);
        }
        Ok(self.omega_of_e.eval(e))
    }

    /// Inverse map `E(I)`; Newton refinement above the grid.
    pub fn energy_of_action(&self, i: f64) -> Result<f64> {
        if i < 0.0 {
            return Err(Error::invalid("negative action"));
        }
        if i <= self.e_of_i.x_max() {
            return Ok(self.e_of_i.eval(i).max(0.0));
        }
        // above the table: solve I(E) = i by bracketed bisection with
        // direct quadrature
        let mut hi = self.e_grid_max.max(1.0);
        let mut guard = 0;
        while oscillator_action(&self.pot, hi)?.0 < i {
            hi *= 2.0;
            guard += 1;
            if guard > 100 {
                return Err(Error::invalid("action out of invertible range"));
            }
        }
        let mut lo = self.e_grid_max;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if oscillator_action(&self.pot, mid)?.0 < i {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn frequency_of_action(&self, i: f64) -> Result<f64> {
        self.frequency_of_energy(self.energy_of_action(i)?)
    }

    /// `(q, p) → (I, φ)`: energy, action, and orbit time from the
    /// reference point `(q_max, 0⁻)` scaled by ω.
    pub fn to_action_angle(&self, q: f64, p: f64) -> Result<(f64, f64)> {
        let e = 0.5 * p * p + self.pot.potential(q);
        if e <= 0.0 {
            return Err(Error::invalid("action-angle map is singular at the origin"));
        }
        let q_max = turning_point(&self.pot, e)?;
        let (i, omega) = oscillator_action(&self.pot, e)?;
        let t_lower = lower_branch_time(&self.pot, e, q_max, q.clamp(-q_max, q_max));
        let period = TAU / omega;
        let t = if p <= 0.0 { t_lower } else { period - t_lower };
        Ok((i, reduce_angle(omega * t)))
    }

    /// `(I, φ) → (q, p)`: integrate the orbit from the reference point for
    /// time `φ/ω` (RK4 on a period-scaled grid).
    pub fn from_action_angle(&self, i: f64, phi: f64) -> Result<(f64, f64)> {
        if !(i > 0.0) {
            return if i == 0.0 {
                Ok((0.0, 0.0))
            } else {
                Err(Error::invalid("negative action"))
            };
        }
        let e = self.energy_of_action(i)?;
        let (_, omega) = oscillator_action(&self.pot, e)?;
        let q_max = turning_point(&self.pot, e)?;
        let t_target = reduce_angle(phi) / omega;
        if t_target == 0.0 {
            return Ok((q_max, 0.0));
        }
        let period = TAU / omega;
        let steps = ((t_target / period) * 4096.0).ceil().max(8.0) as usize;
        let dt = t_target / steps as f64;
        let pot = self.pot.clone();
        let rhs = move |x: &RVec| -> Result<RVec> {
            Ok(RVec::from_vec(vec![x[1], -pot.force(x[0])]))
        };
        let mut x = RVec::from_vec(vec![q_max, 0.0]);
        for _ in 0..steps {
            x = rk4_step(&rhs, &x, dt)?;
        }
        Ok((x[0], x[1]))
    }
}

/// Hamiltonian of the uncoupled chain in per-site action variables:
/// `H(I) = Σ_k E(I_k)`, `∇_k H = ω(E(I_k))`.
pub fn chain_hamiltonian(map: Arc<OscillatorMap>) -> IntegrableHamiltonian {
    let m_energy = map.clone();
    let energy = Arc::new(move |i: &RVec| {
        i.iter()
            .map(|&ik| m_energy.energy_of_action(ik.max(0.0)).unwrap_or(f64::NAN))
            .sum()
    });
    let grad = Arc::new(move |i: &RVec| {
        RVec::from_iterator(
            i.len(),
            i.iter()
                .map(|&ik| map.frequency_of_action(ik.max(0.0)).unwrap_or(f64::NAN)),
        )
    });
    IntegrableHamiltonian::new(energy, Some(grad))
}
