//! Built-in models: the linear constant-frequency system, the
//! damped/driven system with its exact Ornstein-Uhlenbeck oracle, and the
//! uncoupled anharmonic oscillator chain with a numerically constructed
//! action-angle map.
//!
//! Models are selected by string key through [`build_model`]; the keys are
//! `"linear"`, `"damped_driven"` and `"chain_quartic"`.

mod oscillator;

pub use oscillator::{chain_hamiltonian, oscillator_action, OscillatorMap, OscillatorPotential};

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::{
    DispersionField, IntegrableHamiltonian, PerturbationField, RealHamiltonian, StateFieldFn,
};
use crate::{CMat, CVec, Error, RVec, Result};

/// Friction and noise amplitudes of the damped/driven system.
#[derive(Debug, Clone)]
pub struct OuParameters {
    pub nu: RVec,
    pub b: RVec,
}

impl OuParameters {
    pub fn new(nu: RVec, b: RVec) -> Result<Self> {
        if nu.len() != b.len() {
            return Err(Error::Dimension {
                what: "OuParameters",
                expected: nu.len(),
                got: b.len(),
            });
        }
        if nu.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("friction coefficients must be positive"));
        }
        if b.iter().any(|&x| x == 0.0 || !x.is_finite()) {
            return Err(Error::invalid("noise amplitudes must be nonzero"));
        }
        Ok(Self { nu, b })
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }
}

/// Exact action law of the complex Ornstein-Uhlenbeck system
/// `ȧ_k = −ν_k a_k + b_k β̇ᶜ_k`: stationary `a_k` is complex Gaussian with
/// real and imaginary parts of variance `b_k²/(2ν_k)` each, so the action
/// `I_k = ½|a_k|²` is exponential with mean `b_k²/(2ν_k)`.
#[derive(Debug, Clone)]
pub struct OuActionLaw {
    nu: RVec,
    b: RVec,
    means: RVec,
}

impl OuActionLaw {
    /// Stationary mean action per coordinate, `b_k²/(2ν_k)`.
    pub fn means(&self) -> &RVec {
        &self.means
    }

    /// Transient second moment `E|a_k(τ)|²` started from `|a_k(0)|²`.
    pub fn second_moment(&self, k: usize, tau: f64, start_sq: f64) -> f64 {
        let decay = (-2.0 * self.nu[k] * tau).exp();
        decay * start_sq + (self.b[k] * self.b[k] / self.nu[k]) * (1.0 - decay)
    }

    /// Seeded i.i.d. samples of the stationary actions, one vector per
    /// coordinate.
    pub fn sample_stationary_actions(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.means
            .iter()
            .map(|&mean| {
                (0..count)
                    .map(|_| {
                        let u: f64 = rng.random_range(0.0..1.0);
                        -mean * (1.0 - u).ln()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Exact stationary action law of the modified effective (OU) equation.
pub fn ou_exact_action_law(ou: &OuParameters) -> OuActionLaw {
    let means = RVec::from_iterator(
        ou.dim(),
        ou.nu.iter().zip(ou.b.iter()).map(|(&nu, &b)| b * b / (2.0 * nu)),
    );
    OuActionLaw {
        nu: ou.nu.clone(),
        b: ou.b.clone(),
        means,
    }
}

/// Constant-frequency Hamiltonian `H(I) = λ·I` (the linear system).
pub fn linear_model(lambda: RVec) -> IntegrableHamiltonian {
    IntegrableHamiltonian::linear(lambda)
}

/// `H(I) = λ·I + (κ/2) Σ_k I_k²`, Kolmogorov-nondegenerate for κ ≠ 0.
pub fn nonlinear_frequency_hamiltonian(lambda: RVec, kappa: f64) -> IntegrableHamiltonian {
    let l = lambda.clone();
    let energy = Arc::new(move |i: &RVec| l.dot(i) + 0.5 * kappa * i.iter().map(|x| x * x).sum::<f64>());
    let grad = Arc::new(move |i: &RVec| {
        RVec::from_iterator(i.len(), i.iter().zip(lambda.iter()).map(|(&ik, &lk)| lk + kappa * ik))
    });
    IntegrableHamiltonian::new(energy, Some(grad))
}

/// Real Hamiltonian used by the built-in models:
/// `h(v) = c₁ Σ_k Re(v_k v̄_{k+1}) + (c₂/2) Σ_k I_k²`.
///
/// The nearest-neighbour coupling is angle-dependent and averages to zero;
/// the action part survives averaging as a pure rotation. Both pieces pair
/// to zero against `v̄`, so the Hamiltonian field satisfies the coercivity
/// condition with `α₁ = α₂ = 0`.
pub fn coupling_action_h(c1: f64, c2: f64) -> RealHamiltonian {
    let value = Arc::new(move |v: &CVec| {
        let coupling: f64 = (0..v.len().saturating_sub(1))
            .map(|k| (v[k] * v[k + 1].conj()).re)
            .sum();
        let action: f64 = v
            .iter()
            .map(|z| {
                let i = 0.5 * z.norm_sqr();
                i * i
            })
            .sum();
        c1 * coupling + 0.5 * c2 * action
    });
    let wirtinger = Arc::new(move |v: &CVec| {
        let n = v.len();
        CVec::from_fn(n, |k, _| {
            let mut w = Complex64::new(0.0, 0.0);
            if k > 0 {
                w += 0.5 * c1 * v[k - 1];
            }
            if k + 1 < n {
                w += 0.5 * c1 * v[k + 1];
            }
            let i = 0.5 * v[k].norm_sqr();
            w + 0.5 * c2 * i * v[k]
        })
    });
    RealHamiltonian::new(value, Some(wirtinger))
}

/// Ingredient set for one model instance.
#[derive(Clone)]
pub struct ModelIngredients {
    pub dim: usize,
    pub hamiltonian: IntegrableHamiltonian,
    pub perturbation: PerturbationField,
    pub dispersion: DispersionField,
    pub tag: String,
    /// Present when the modified effective equation is exactly the OU
    /// system (damped/driven family): the analytic action-law oracle.
    pub ou: Option<OuParameters>,
    /// Present for oscillator chains: the per-site action-angle map.
    pub oscillator_map: Option<Arc<OscillatorMap>>,
    /// The configuration with every default filled in with the value
    /// actually used (experiment provenance).
    pub resolved: Option<ModelConfig>,
}

/// Assembles the damped/driven system
/// `v̇_k = iε⁻¹∇_kH v_k + 2i ∂h/∂v̄_k − ν_k v_k + b_k β̇ᶜ_k`.
pub fn damped_driven_model(
    hamiltonian: IntegrableHamiltonian,
    h: RealHamiltonian,
    ou: &OuParameters,
    tag: impl Into<String>,
) -> Result<ModelIngredients> {
    let n = ou.dim();
    let nu = ou.nu.clone();
    let p1: StateFieldFn = Arc::new(move |v: &CVec| {
        CVec::from_iterator(v.len(), v.iter().zip(nu.iter()).map(|(z, &nk)| -nk * z))
    });
    let perturbation = PerturbationField::with_split(p1, h);
    let bmat = CMat::from_diagonal(&CVec::from_iterator(
        n,
        ou.b.iter().map(|&bk| Complex64::new(bk, 0.0)),
    ));
    Ok(ModelIngredients {
        dim: n,
        hamiltonian,
        perturbation,
        dispersion: DispersionField::constant(bmat)?,
        tag: tag.into(),
        ou: Some(ou.clone()),
        oscillator_map: None,
        resolved: None,
    })
}

/// Configuration of a built-in model (all keys optional except `kind` and
/// `n`; unknown keys are rejected).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: String,
    pub n: usize,
    /// Linear frequency part (defaults to √(k-th squarefree integer)).
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    /// Quadratic-in-action frequency coefficient (damped_driven only).
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub nu: Option<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    /// Nearest-neighbour coupling strength in `h`.
    #[serde(default)]
    pub h_coupling: Option<f64>,
    /// Action-quadratic strength in `h`.
    #[serde(default)]
    pub h_action: Option<f64>,
    /// Quartic potential parameters (chain_quartic only).
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    /// Energy-grid ceiling for the chain action-angle map.
    #[serde(default)]
    pub e_max: Option<f64>,
}

const SQUAREFREE: [f64; 8] = [1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 10.0, 11.0];

fn default_lambda(n: usize) -> Result<RVec> {
    if n > SQUAREFREE.len() {
        return Err(Error::invalid(format!(
            "no default frequencies for n = {n}; supply lambda explicitly"
        )));
    }
    Ok(RVec::from_iterator(n, SQUAREFREE[..n].iter().map(|&x| x.sqrt())))
}

fn vector_param(name: &str, value: &Option<Vec<f64>>, n: usize, default: f64) -> Result<RVec> {
    match value {
        Some(v) => {
            if v.len() != n {
                return Err(Error::invalid(format!(
                    "model parameter '{name}' must have length {n}, got {}",
                    v.len()
                )));
            }
            Ok(RVec::from_vec(v.clone()))
        }
        None => Ok(RVec::from_element(n, default)),
    }
}

/// Builds the ingredients of a named model. The dimension is capped at
/// desk scale; everything here is dense in `n`.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelIngredients> {
    if cfg.n == 0 || cfg.n > 64 {
        return Err(Error::invalid(format!(
            "model dimension must be in 1..=64, got {}",
            cfg.n
        )));
    }
    let n = cfg.n;
    let nu = vector_param("nu", &cfg.nu, n, 1.0)?;
    let b = vector_param("b", &cfg.b, n, 1.0)?;
    let ou = OuParameters::new(nu, b)?;
    let h = coupling_action_h(cfg.h_coupling.unwrap_or(0.0), cfg.h_action.unwrap_or(0.0));
    let mut resolved = cfg.clone();
    resolved.nu = Some(ou.nu.iter().cloned().collect());
    resolved.b = Some(ou.b.iter().cloned().collect());
    resolved.h_coupling = Some(cfg.h_coupling.unwrap_or(0.0));
    resolved.h_action = Some(cfg.h_action.unwrap_or(0.0));

    let resolve_lambda = |resolved: &mut ModelConfig| -> Result<RVec> {
        let lambda = match &cfg.lambda {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::invalid(format!(
                        "lambda must have length {n}, got {}",
                        l.len()
                    )));
                }
                RVec::from_vec(l.clone())
            }
            None => default_lambda(n)?,
        };
        resolved.lambda = Some(lambda.iter().cloned().collect());
        Ok(lambda)
    };

    let mut model = match cfg.kind.as_str() {
        "linear" => {
            let lambda = resolve_lambda(&mut resolved)?;
            damped_driven_model(linear_model(lambda), h, &ou, "linear")?
        }
        "damped_driven" => {
            let lambda = resolve_lambda(&mut resolved)?;
            let kappa = cfg.kappa.unwrap_or(1.0);
            resolved.kappa = Some(kappa);
            damped_driven_model(
                nonlinear_frequency_hamiltonian(lambda, kappa),
                h,
                &ou,
                "damped_driven",
            )?
        }
        "chain_quartic" => {
            let alpha = cfg.alpha.unwrap_or(1.0);
            let beta = cfg.beta.unwrap_or(0.5);
            let pot = OscillatorPotential::quartic(alpha, beta)?;
            let e_max = cfg.e_max.unwrap_or(20.0);
            resolved.alpha = Some(alpha);
            resolved.beta = Some(beta);
            resolved.e_max = Some(e_max);
            let map = Arc::new(OscillatorMap::build(pot, e_max, 200)?);
            let hamiltonian = chain_hamiltonian(map.clone());
            let mut model = damped_driven_model(hamiltonian, h, &ou, "chain_quartic")?;
            model.oscillator_map = Some(map);
            // the OU oracle for the chain covers only the friction/noise
            // part; frequencies are action-dependent, but the modified
            // effective equation is still the OU system since averaging
            // keeps only the friction
            model
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    model.resolved = Some(resolved);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::resonance_scan;
    use crate::fields::fd_wirtinger;
    use approx::assert_relative_eq;

    #[test]
    fn linear_default_frequencies_are_nonresonant() {
        let cfg = ModelConfig {
            kind: "linear".into(),
            n: 2,
            lambda: Some(vec![1.0, 2.0_f64.sqrt()]),
            kappa: None,
            nu: None,
            b: None,
            h_coupling: None,
            h_action: None,
            alpha: None,
            beta: None,
            e_max: None,
        };
        let model = build_model(&cfg).unwrap();
        let report = resonance_scan(
            &model.hamiltonian,
            &[RVec::from_vec(vec![1.0, 1.0])],
            20,
        )
        .unwrap();
        assert_eq!(report.flagged_count, 0);
    }

    #[test]
    fn equal_frequencies_resonate() {
        let h = linear_model(RVec::from_vec(vec![1.0, 1.0]));
        let report = resonance_scan(&h, &[RVec::from_vec(vec![0.5, 0.5])], 5).unwrap();
        assert_eq!(report.flagged_count, 1);
    }

    #[test]
    fn ou_law_reference_values() {
        let ou = OuParameters::new(RVec::from_vec(vec![1.0]), RVec::from_vec(vec![1.0])).unwrap();
        let law = ou_exact_action_law(&ou);
        assert_relative_eq!(law.means()[0], 0.5, max_relative = 1e-15);
        // scaling (ν, b) → (cν, √c b) leaves the law invariant
        let c = 3.7;
        let scaled = OuParameters::new(
            RVec::from_vec(vec![c]),
            RVec::from_vec(vec![c.sqrt()]),
        )
        .unwrap();
        assert_relative_eq!(
            ou_exact_action_law(&scaled).means()[0],
            law.means()[0],
            max_relative = 1e-14
        );
    }

    #[test]
    fn ou_transient_second_moment_formula() {
        // E|a(τ)|² = e^{−2ντ}|a(0)|² + (b²/ν)(1 − e^{−2ντ}), checked by
        // simulating the OU equation directly
        use crate::sde::{integrate_with_table, sample_wiener_increments, derive_path_seed,
                         ComplexSde, NoiseKind, Scheme, SdeSystem, State};
        let (nu, b) = (1.0, 1.0);
        let ou = OuParameters::new(RVec::from_vec(vec![nu]), RVec::from_vec(vec![b])).unwrap();
        let law = ou_exact_action_law(&ou);
        let sys = SdeSystem::Complex(ComplexSde {
            dim: 1,
            noise_dim: 1,
            drift: Arc::new(move |v: &CVec| Ok(v.map(|z| -nu * z))),
            dispersion: Arc::new(move |_| Ok(CMat::from_element(1, 1, Complex64::new(b, 0.0)))),
            stiff: None,
        });
        let x0 = State::Complex(CVec::from_vec(vec![Complex64::new(1.5, 0.0)]));
        let tau = 0.5;
        let steps = 500;
        let n_paths = 20_000;
        let mut acc = 0.0;
        for p in 0..n_paths {
            let table = sample_wiener_increments(1, steps, tau / steps as f64, derive_path_seed(17, p), NoiseKind::Complex);
            let path = integrate_with_table(&sys, &x0, &table, Scheme::Euler).unwrap();
            acc += path.states.last().unwrap().as_complex().unwrap()[0].norm_sqr();
        }
        let mc = acc / n_paths as f64;
        let expect = law.second_moment(0, tau, 1.5 * 1.5);
        // 4σ MC tolerance plus O(dtau) discretization allowance
        assert!(
            (mc - expect).abs() < 4.0 * expect / (n_paths as f64).sqrt() + 0.01 * expect,
            "MC {mc} vs analytic {expect}"
        );
    }

    #[test]
    fn stationary_sampler_matches_the_mean() {
        let ou = OuParameters::new(RVec::from_vec(vec![1.0, 2.0]), RVec::from_vec(vec![1.0, 0.5]))
            .unwrap();
        let law = ou_exact_action_law(&ou);
        let samples = law.sample_stationary_actions(100_000, 5);
        for (k, coord) in samples.iter().enumerate() {
            let mean: f64 = coord.iter().sum::<f64>() / coord.len() as f64;
            let expect = law.means()[k];
            assert!(
                (mean - expect).abs() < 4.0 * expect / (coord.len() as f64).sqrt() * 1.0,
                "coordinate {k}: {mean} vs {expect}"
            );
        }
    }

    #[test]
    fn model_h_satisfies_coercivity_with_zero_margin() {
        // Re⟨2i∂h/∂v̄, v̄⟩ ≡ 0 for the built-in h
        let h = coupling_action_h(0.1, 0.1);
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..32 {
            let v = CVec::from_fn(3, |_, _| {
                Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
            });
            let f = h.field(&v).unwrap();
            let pairing: f64 = f.iter().zip(v.iter()).map(|(fk, vk)| (fk * vk.conj()).re).sum();
            assert!(pairing.abs() < 1e-12, "pairing {pairing}");
        }
    }

    #[test]
    fn model_h_wirtinger_matches_finite_differences() {
        let h = coupling_action_h(0.1, 0.1);
        let value = Arc::new(move |v: &CVec| h.eval(v));
        let hv = coupling_action_h(0.1, 0.1);
        let v = CVec::from_vec(vec![
            Complex64::new(0.8, -0.4),
            Complex64::new(0.2, 1.1),
            Complex64::new(-0.6, 0.3),
        ]);
        let analytic = hv.field(&v).unwrap();
        let fd = fd_wirtinger(value.as_ref(), &v, crate::fields::FD_STEP)
            .map(|z| Complex64::new(0.0, 2.0) * z);
        for k in 0..3 {
            assert!(
                (analytic[k] - fd[k]).norm() <= 1e-5 * (1.0 + analytic[k].norm()),
                "coordinate {k}"
            );
        }
    }

    #[test]
    fn unknown_model_kind_is_rejected() {
        let cfg = ModelConfig {
            kind: "nope".into(),
            n: 1,
            lambda: None,
            kappa: None,
            nu: None,
            b: None,
            h_coupling: None,
            h_action: None,
            alpha: None,
            beta: None,
            e_max: None,
        };
        assert!(matches!(build_model(&cfg), Err(Error::UnknownModel(_))));
    }
}
