//! Assumption checkers: non-resonance of the frequency map, rank of the
//! dispersion matrix and coercivity of the perturbation.
//!
//! These conditions are measure-theoretic or asymptotic, so the checkers
//! report margins and flags instead of hard-failing.

use nalgebra::linalg::SVD;

use crate::fields::{DispersionField, IntegrableHamiltonian, PerturbationField};
use crate::{CVec, Error, RVec, Result};

/// Samples below `σ_min ≥ RANK_TOL · σ_max` are flagged as rank-deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Frequency/integer-vector ratios below this are flagged as near-resonant.
pub const RESONANCE_TOL: f64 = 1e-6;

/// Per-sample singular-value summary of `B(v)`.
#[derive(Debug, Clone)]
pub struct RankSample {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct RankReport {
    pub samples: Vec<RankSample>,
    pub flagged_count: usize,
}

impl RankReport {
    pub fn all_full_rank(&self) -> bool {
        self.flagged_count == 0
    }
}

/// Smallest singular value of `B(v)` at each sample; a sample is flagged
/// when `σ_min < 1e-10 σ_max` (numerically rank-deficient noise).
pub fn check_rank(b: &DispersionField, v_samples: &[CVec]) -> Result<RankReport> {
    if v_samples.is_empty() {
        return Err(Error::invalid("check_rank needs at least one sample"));
    }
    let mut samples = Vec::with_capacity(v_samples.len());
    let mut flagged_count = 0;
    for v in v_samples {
        let mat = b.eval(v);
        let svd = SVD::new(mat, false, false);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
        let sigma_min = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let flagged = sigma_min < RANK_TOL * sigma_max || sigma_max == 0.0;
        if flagged {
            flagged_count += 1;
        }
        samples.push(RankSample {
            sigma_min,
            sigma_max,
            flagged,
        });
    }
    Ok(RankReport {
        samples,
        flagged_count,
    })
}

/// Result of probing `Re⟨P(v), v̄⟩ ≤ −α₁|v| + α₂` on a sample set.
#[derive(Debug, Clone)]
pub struct CoercivityReport {
    /// `max_v [ Re⟨P(v), v̄⟩ + α₁|v| − α₂ ]`; the check passes when ≤ 0.
    pub max_margin: f64,
    pub worst_sample: usize,
    pub pass: bool,
}

/// Probes the friction condition on the given samples.
pub fn check_coercivity(
    p: &PerturbationField,
    v_samples: &[CVec],
    alpha1: f64,
    alpha2: f64,
) -> Result<CoercivityReport> {
    if alpha1 < 0.0 {
        return Err(Error::invalid("alpha1 must be non-negative"));
    }
    if v_samples.is_empty() {
        return Err(Error::invalid("check_coercivity needs at least one sample"));
    }
    let mut max_margin = f64::NEG_INFINITY;
    let mut worst_sample = 0;
    for (idx, v) in v_samples.iter().enumerate() {
        let pv = p.eval(v);
        let pairing: f64 = pv.iter().zip(v.iter()).map(|(pk, vk)| (pk * vk.conj()).re).sum();
        let margin = pairing + alpha1 * v.norm() - alpha2;
        if margin > max_margin {
            max_margin = margin;
            worst_sample = idx;
        }
    }
    Ok(CoercivityReport {
        max_margin,
        worst_sample,
        pass: max_margin <= 0.0,
    })
}

/// Closest integer relation found for one action sample.
#[derive(Debug, Clone)]
pub struct ResonanceSample {
    /// `min_{0 < |s|∞ ≤ S} |∇H(I)·s| / |s|`.
    pub min_ratio: f64,
    /// The integer vector attaining the minimum.
    pub arg_s: Vec<i64>,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct ResonanceReport {
    pub samples: Vec<ResonanceSample>,
    pub flagged_count: usize,
}

/// Scans integer vectors `0 < |s|∞ ≤ S` for near-resonances
/// `∇H(I)·s ≈ 0` at each sampled action point. Reports only; the
/// non-resonance assumption is "for almost all I" and cannot fail
/// pointwise.
pub fn resonance_scan(
    h: &IntegrableHamiltonian,
    i_samples: &[RVec],
    s_max: u32,
) -> Result<ResonanceReport> {
    if s_max < 1 {
        return Err(Error::invalid("resonance scan needs S >= 1"));
    }
    let Some(first) = i_samples.first() else {
        return Err(Error::invalid("resonance_scan needs at least one sample"));
    };
    let n = first.len();
    let count = (2 * s_max as u64 + 1).checked_pow(n as u32);
    if count.map_or(true, |c| c > 20_000_000) {
        return Err(Error::invalid(format!(
            "resonance scan over (2*{s_max}+1)^{n} integer vectors is too large"
        )));
    }

    let mut samples = Vec::with_capacity(i_samples.len());
    let mut flagged_count = 0;
    let mut s = vec![-(s_max as i64); n];
    for i in i_samples {
        let freq = h.frequencies(i);
        let mut min_ratio = f64::INFINITY;
        let mut arg_s = vec![0_i64; n];
        // odometer over the integer box, skipping s = 0 and one of each ±s pair
        s.iter_mut().for_each(|c| *c = -(s_max as i64));
        loop {
            if canonical_sign(&s) {
                let norm_sq: f64 = s.iter().map(|&c| (c * c) as f64).sum();
                let dot: f64 = s.iter().zip(freq.iter()).map(|(&c, &f)| c as f64 * f).sum();
                let ratio = dot.abs() / norm_sq.sqrt();
                if ratio < min_ratio {
                    min_ratio = ratio;
                    arg_s.copy_from_slice(&s);
                }
            }
            if !advance(&mut s, s_max as i64) {
                break;
            }
        }
        let flagged = min_ratio < RESONANCE_TOL;
        if flagged {
            flagged_count += 1;
        }
        samples.push(ResonanceSample {
            min_ratio,
            arg_s,
            flagged,
        });
    }
    Ok(ResonanceReport {
        samples,
        flagged_count,
    })
}

/// True for exactly one of each ±s pair (first nonzero entry positive).
fn canonical_sign(s: &[i64]) -> bool {
    for &c in s {
        if c > 0 {
            return true;
        }
        if c < 0 {
            return false;
        }
    }
    false // s = 0
}

fn advance(s: &mut [i64], s_max: i64) -> bool {
    for c in s.iter_mut().rev() {
        if *c < s_max {
            *c += 1;
            return true;
        }
        *c = -s_max;
    }
    false
}
