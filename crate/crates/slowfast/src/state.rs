//! Complex states, action-angle coordinates and rotation flows.
//!
//! The state of the perturbed system is a vector `v ∈ ℂⁿ`. Its slow/fast
//! split is `I_j = ½|v_j|²`, `φ_j = arg v_j`, so `v_j = √(2I_j) e^{iφ_j}`.
//! Angles are kept in `[0, 2π)`; the angle of a zero coordinate is set to 0
//! so the transforms are total functions.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::fields::IntegrableHamiltonian;
use crate::{CVec, Error, RVec, Result};

/// Action-angle coordinates `(I, φ) ∈ ℝ₊ⁿ × 𝕋ⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAngle {
    actions: RVec,
    angles: RVec,
}

impl ActionAngle {
    /// Builds a validated action-angle point. Angles are reduced to
    /// `[0, 2π)` and forced to 0 on coordinates with zero action.
    pub fn new(actions: RVec, angles: RVec) -> Result<Self> {
        if actions.len() != angles.len() {
            return Err(Error::Dimension {
                what: "ActionAngle",
                expected: actions.len(),
                got: angles.len(),
            });
        }
        if actions.iter().any(|i| !i.is_finite()) || angles.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("ActionAngle"));
        }
        if let Some(bad) = actions.iter().find(|&&i| i < 0.0) {
            return Err(Error::invalid(format!("negative action {bad}")));
        }
        let mut angles = angles.map(reduce_angle);
        for (phi, &i) in angles.iter_mut().zip(actions.iter()) {
            if i == 0.0 {
                *phi = 0.0;
            }
        }
        Ok(Self { actions, angles })
    }

    pub fn dim(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &RVec {
        &self.actions
    }

    pub fn angles(&self) -> &RVec {
        &self.angles
    }
}

/// Box `Q = {v : |v_j| ≤ C_j}` used by the exit-time studies.
#[derive(Debug, Clone)]
pub struct DomainBox {
    radii: RVec,
}

impl DomainBox {
    pub fn new(radii: RVec) -> Result<Self> {
        if radii.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("box radii must be positive and finite"));
        }
        Ok(Self { radii })
    }

    pub fn dim(&self) -> usize {
        self.radii.len()
    }

    pub fn radii(&self) -> &RVec {
        &self.radii
    }

    /// True when `|v_j| ≤ C_j` for every coordinate.
    pub fn contains(&self, v: &CVec) -> bool {
        v.iter()
            .zip(self.radii.iter())
            .all(|(vj, &cj)| vj.norm_sqr() <= cj * cj)
    }
}

/// Reduces an angle to `[0, 2π)`.
pub fn reduce_angle(phi: f64) -> f64 {
    let r = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Actions `I_k = ½|v_k|²` of a complex state.
pub fn actions_of(v: &CVec) -> RVec {
    RVec::from_iterator(v.len(), v.iter().map(|vk| 0.5 * vk.norm_sqr()))
}

/// `(I, φ)` coordinates of `v`; the angle of a zero coordinate is 0.
pub fn to_action_angle(v: &CVec) -> ActionAngle {
    let actions = actions_of(v);
    let angles = RVec::from_iterator(
        v.len(),
        v.iter().map(|vk| {
            if vk.re == 0.0 && vk.im == 0.0 {
                0.0
            } else {
                reduce_angle(vk.im.atan2(vk.re))
            }
        }),
    );
    ActionAngle { actions, angles }
}

/// Reconstructs `v_j = √(2I_j) e^{iφ_j}`.
pub fn from_action_angle(aa: &ActionAngle) -> CVec {
    CVec::from_iterator(
        aa.dim(),
        aa.actions.iter().zip(aa.angles.iter()).map(|(&i, &phi)| {
            let r = (2.0 * i).sqrt();
            Complex64::new(r * phi.cos(), r * phi.sin())
        }),
    )
}

/// Applies the rotation operator `Φ_ω = diag(e^{iω_1}, …, e^{iω_n})`.
pub fn rotate(v: &CVec, omega: &RVec) -> CVec {
    debug_assert_eq!(v.len(), omega.len());
    CVec::from_iterator(
        v.len(),
        v.iter()
            .zip(omega.iter())
            .map(|(vk, &w)| vk * Complex64::new(w.cos(), w.sin())),
    )
}

/// Exact flow of the stiff rotation term over a slow-time step `dtau`:
/// each coordinate is rotated by `∇_k H(I(v)) · dtau / eps`. Actions are
/// invariant along this flow.
pub fn unperturbed_flow(v: &CVec, h: &IntegrableHamiltonian, eps: f64, dtau: f64) -> CVec {
    let freq = h.frequencies(&actions_of(v));
    let scale = dtau / eps;
    let omega = RVec::from_iterator(v.len(), freq.iter().map(|&f| f * scale));
    rotate(v, &omega)
}
