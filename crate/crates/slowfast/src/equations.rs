//! Builders assembling the dynamical systems from model ingredients:
//! the full stiff system, the (non-autonomous) action coefficients, the
//! averaged action equation, the effective equation and its modified
//! variant, and the deterministic averaged equation.

use std::sync::Arc;

use dashmap::DashMap;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::averaging::{
    average_action_coefficients, average_action_drift_deterministic, average_diffusion_state,
    average_field, QuadratureRule,
};
use crate::fields::{DispersionField, IntegrableHamiltonian, PerturbationField};
use crate::sde::{rk4_path, ActionSde, ComplexSde, SdeSystem, StiffPart};
use crate::{CVec, Error, RMat, RVec, Result};

/// Quantization grid (in action units) for memoized averaged coefficients.
/// Coefficients are evaluated at the grid representative, so equal keys
/// give bitwise-identical values no matter which thread computed them.
pub const MEMO_QUANTUM: f64 = 1e-6;

/// Memoization capacity; past this the coefficients are recomputed without
/// inserting (paths visit mostly fresh points, the cache must not grow
/// unboundedly).
const MEMO_CAP: usize = 1 << 16;

/// The full perturbed system in slow time:
/// `v̇ = i ε⁻¹ diag{∇_k H(I)} v + P(v) + B(v) β̇ᶜ`.
pub fn build_full(
    h: &IntegrableHamiltonian,
    p: &PerturbationField,
    b: &DispersionField,
    eps: f64,
) -> Result<SdeSystem> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let n = b.rows();
    let p = p.clone();
    let bc = b.clone();
    Ok(SdeSystem::Complex(ComplexSde {
        dim: n,
        noise_dim: b.cols(),
        drift: Arc::new(move |v: &CVec| Ok(p.eval(v))),
        dispersion: Arc::new(move |v: &CVec| Ok(bc.eval(v))),
        stiff: Some(StiffPart {
            hamiltonian: h.clone(),
            eps,
        }),
    }))
}

/// Itô coefficients of the exact action equation, as functions of the full
/// state `v` (the equation is not autonomous in `I`; angles enter until
/// they are averaged out).
#[derive(Clone)]
pub struct ActionCoefficients {
    p: PerturbationField,
    b: DispersionField,
}

impl ActionCoefficients {
    pub fn new(p: PerturbationField, b: DispersionField) -> Self {
        Self { p, b }
    }

    /// `F_k(v) = Re(v̄_k P_k) + Σ_l |B_{kl}|²`.
    pub fn drift(&self, v: &CVec) -> RVec {
        crate::averaging::action_drift(&self.p, &self.b, v)
    }

    /// Real dispersion matching the quadratic variation of the actions.
    pub fn dispersion(&self, v: &CVec) -> RMat {
        crate::averaging::action_dispersion(&self.b, v)
    }
}

type CoeffCache = DashMap<Vec<i64>, Arc<(RVec, RMat)>>;

fn quantize(actions: &RVec) -> (Vec<i64>, RVec) {
    let key: Vec<i64> = actions
        .iter()
        .map(|&x| (x.max(0.0) / MEMO_QUANTUM).round() as i64)
        .collect();
    let rep = RVec::from_iterator(key.len(), key.iter().map(|&k| k as f64 * MEMO_QUANTUM));
    (key, rep)
}

/// The averaged action equation `İ = ⟨⟨F⟩⟩(I) + ⟨⟨G⟩⟩(I) β̇` on `ℝ₊ⁿ`,
/// with real n-dimensional noise. Coefficients are computed on demand by
/// torus quadrature and memoized on a `1e-6` action grid.
pub fn build_averaged_action(
    p: &PerturbationField,
    b: &DispersionField,
    rule: &QuadratureRule,
) -> Result<SdeSystem> {
    let n = b.rows();
    if rule.dim() != n {
        return Err(Error::Dimension {
            what: "build_averaged_action rule",
            expected: n,
            got: rule.dim(),
        });
    }
    let cache: Arc<CoeffCache> = Arc::new(DashMap::new());
    let p = p.clone();
    let b = b.clone();
    let rule = rule.clone();
    let coeffs = Arc::new(move |actions: &RVec| -> Result<Arc<(RVec, RMat)>> {
        let (key, rep) = quantize(actions);
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        let (drift, diff) = average_action_coefficients(&p, &b, &rep, &rule)?;
        let value = Arc::new((drift, diff.root));
        if cache.len() < MEMO_CAP {
            // concurrent inserts of the same key hold identical bits, so
            // last-write-wins is harmless
            cache.insert(key, value.clone());
        }
        Ok(value)
    });
    let c_drift = coeffs.clone();
    let c_disp = coeffs;
    Ok(SdeSystem::Action(ActionSde {
        dim: n,
        noise_dim: n,
        drift: Arc::new(move |i: &RVec| Ok(c_drift(i)?.0.clone())),
        dispersion: Arc::new(move |i: &RVec| Ok(c_disp(i)?.1.clone())),
    }))
}

fn effective_dispersion(
    b: &DispersionField,
    rule: &QuadratureRule,
) -> Result<crate::sde::ComplexDispersionFn> {
    let n = b.rows();
    if b.is_constant() {
        // rotation averaging of B Bᴴ does not depend on the state for
        // constant B; compute the root once
        let root = average_diffusion_state(b, &CVec::zeros(n), rule)?.root;
        Ok(Arc::new(move |_: &CVec| Ok(root.clone())))
    } else {
        let b = b.clone();
        let rule = rule.clone();
        Ok(Arc::new(move |a: &CVec| {
            Ok(average_diffusion_state(&b, a, &rule)?.root)
        }))
    }
}

/// The effective equation `ȧ = ⟨⟨P⟩⟩(a) + ⟨⟨B⟩⟩(a) β̇ᶜ`: no stiff part,
/// rotation-averaged drift and dispersion, complex n-dimensional noise.
pub fn build_effective(
    p: &PerturbationField,
    b: &DispersionField,
    rule: &QuadratureRule,
) -> Result<SdeSystem> {
    let n = b.rows();
    if rule.dim() != n {
        return Err(Error::Dimension {
            what: "build_effective rule",
            expected: n,
            got: rule.dim(),
        });
    }
    let pc = p.clone();
    let rc = rule.clone();
    Ok(SdeSystem::Complex(ComplexSde {
        dim: n,
        noise_dim: n,
        drift: Arc::new(move |a: &CVec| average_field(&pc, a, &rc)),
        dispersion: effective_dispersion(b, rule)?,
        stiff: None,
    }))
}

/// Modified effective equation: the Hamiltonian part `P₂ = 2i∂h/∂v̄` of
/// `P = P₁ + P₂` is dropped before averaging, `ȧ = ⟨⟨P₁⟩⟩(a) + ⟨⟨B⟩⟩(a) β̇ᶜ`.
/// The declared split is validated on probe states before building.
pub fn build_effective_modified(
    p: &PerturbationField,
    b: &DispersionField,
    rule: &QuadratureRule,
) -> Result<SdeSystem> {
    let n = b.rows();
    if rule.dim() != n {
        return Err(Error::Dimension {
            what: "build_effective_modified rule",
            expected: n,
            got: rule.dim(),
        });
    }
    let Some(split) = p.split() else {
        return Err(Error::invalid(
            "modified effective equation needs a perturbation split P = P1 + hamiltonian field",
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x51D5_EED5);
    let mut worst = 0.0_f64;
    for _ in 0..8 {
        let probe = CVec::from_fn(n, |_, _| {
            Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))
        });
        if let Some(res) = p.split_residual(&probe)? {
            worst = worst.max(res);
        }
    }
    if worst > 1e-8 {
        return Err(Error::SplitResidual { residual: worst });
    }
    let p1 = PerturbationField::new(split.p1.clone());
    let rc = rule.clone();
    Ok(SdeSystem::Complex(ComplexSde {
        dim: n,
        noise_dim: n,
        drift: Arc::new(move |a: &CVec| average_field(&p1, a, &rc)),
        dispersion: effective_dispersion(b, rule)?,
        stiff: None,
    }))
}

/// Deterministic averaged action equation `İ = ⟨⟨Re(v̄ P)⟩⟩(I)` (noise-free
/// setting: the Itô inflow is dropped along with the dispersion).
#[derive(Clone)]
pub struct DeterministicAveragedOde {
    rhs: Arc<dyn Fn(&RVec) -> Result<RVec> + Send + Sync>,
    dim: usize,
}

impl DeterministicAveragedOde {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rhs(&self, actions: &RVec) -> Result<RVec> {
        (self.rhs)(actions)
    }

    /// RK4 trajectory from `i0` on a fixed grid.
    pub fn integrate(&self, i0: &RVec, dt: f64, t_final: f64) -> Result<Vec<(f64, RVec)>> {
        rk4_path(self.rhs.as_ref(), i0, dt, t_final)
    }
}

pub fn build_deterministic_averaged(
    p: &PerturbationField,
    rule: &QuadratureRule,
) -> Result<DeterministicAveragedOde> {
    let n = rule.dim();
    let p = p.clone();
    let rule = rule.clone();
    Ok(DeterministicAveragedOde {
        dim: n,
        rhs: Arc::new(move |i: &RVec| {
            // RK4 stages may probe slightly below the boundary; project back
            let plus = i.map(|x| x.max(0.0));
            average_action_drift_deterministic(&p, &plus, &rule)
        }),
    })
}

/// All dynamical objects derived from one ingredient set.
#[derive(Clone)]
pub struct EquationBundle {
    pub dim: usize,
    pub full: SdeSystem,
    /// Exact action coefficients (functions of the full state `v`).
    pub action_coefficients: ActionCoefficients,
    pub averaged_action: SdeSystem,
    pub effective: SdeSystem,
    /// Present when the perturbation declares a Hamiltonian split.
    pub effective_modified: Option<SdeSystem>,
    pub deterministic_avg: DeterministicAveragedOde,
}

impl EquationBundle {
    pub fn build(
        h: &IntegrableHamiltonian,
        p: &PerturbationField,
        b: &DispersionField,
        eps: f64,
        rule: &QuadratureRule,
    ) -> Result<Self> {
        let effective_modified = if p.split().is_some() {
            Some(build_effective_modified(p, b, rule)?)
        } else {
            None
        };
        Ok(Self {
            dim: b.rows(),
            full: build_full(h, p, b, eps)?,
            action_coefficients: ActionCoefficients::new(p.clone(), b.clone()),
            averaged_action: build_averaged_action(p, b, rule)?,
            effective: build_effective(p, b, rule)?,
            effective_modified,
            deterministic_avg: build_deterministic_averaged(p, rule)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{RealHamiltonian, StateFieldFn};
    use crate::CMat;
    use approx::assert_relative_eq;

    fn friction(nu: Vec<f64>) -> StateFieldFn {
        Arc::new(move |v: &CVec| {
            CVec::from_iterator(v.len(), v.iter().zip(nu.iter()).map(|(z, &n)| -n * z))
        })
    }

    fn coupling_h() -> RealHamiltonian {
        // h = 0.1 Re(v₁ v̄₂): Wirtinger gradient (0.05 v₂, 0.05 v₁)
        RealHamiltonian::new(
            Arc::new(|v: &CVec| 0.1 * (v[0] * v[1].conj()).re),
            Some(Arc::new(|v: &CVec| {
                CVec::from_vec(vec![0.05 * v[1], 0.05 * v[0]])
            })),
        )
    }

    fn cvec(parts: &[(f64, f64)]) -> CVec {
        CVec::from_iterator(parts.len(), parts.iter().map(|&(re, im)| Complex64::new(re, im)))
    }

    #[test]
    fn full_system_reduces_to_rotation_without_perturbation() {
        let h = IntegrableHamiltonian::linear(RVec::from_vec(vec![1.0, 2.0]));
        let p = PerturbationField::new(Arc::new(|v: &CVec| CVec::zeros(v.len())));
        let b = DispersionField::constant(CMat::zeros(2, 2)).unwrap();
        let sys = build_full(&h, &p, &b, 0.1).unwrap();
        let SdeSystem::Complex(s) = &sys else { panic!() };
        let v = cvec(&[(1.0, 0.0), (0.0, 1.0)]);
        assert!(((s.drift)(&v).unwrap()).iter().all(|z| z.norm() == 0.0));
        assert!(s.stiff.is_some());
    }

    #[test]
    fn full_systems_differ_only_in_the_stiff_part() {
        let h = IntegrableHamiltonian::linear(RVec::from_vec(vec![1.0, 2.0]));
        let p = PerturbationField::new(friction(vec![1.0, 2.0]));
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let s1 = build_full(&h, &p, &b, 0.1).unwrap();
        let s2 = build_full(&h, &p, &b, 0.001).unwrap();
        let (SdeSystem::Complex(a), SdeSystem::Complex(c)) = (&s1, &s2) else {
            panic!()
        };
        let v = cvec(&[(0.4, -0.6), (1.1, 0.2)]);
        assert_eq!((a.drift)(&v).unwrap(), (c.drift)(&v).unwrap());
        assert_eq!((a.dispersion)(&v).unwrap(), (c.dispersion)(&v).unwrap());
        assert_ne!(
            a.stiff.as_ref().unwrap().eps,
            c.stiff.as_ref().unwrap().eps
        );
    }

    #[test]
    fn averaged_action_constant_b_noise_is_diagonal_sqrt() {
        let p = PerturbationField::new(friction(vec![1.0, 2.0]));
        let bvals = [1.0, 0.5];
        let b = DispersionField::constant(CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::new(bvals[0], 0.0),
            Complex64::new(bvals[1], 0.0),
        ])))
        .unwrap();
        let rule = QuadratureRule::tensor(2, 16).unwrap();
        let sys = build_averaged_action(&p, &b, &rule).unwrap();
        let SdeSystem::Action(s) = &sys else { panic!() };
        let i = RVec::from_vec(vec![0.8, 0.3]);
        let g = (s.dispersion)(&i).unwrap();
        for k in 0..2 {
            assert_relative_eq!(
                g[(k, k)],
                bvals[k] * (2.0 * i[k]).sqrt(),
                max_relative = 1e-9
            );
        }
        assert!(g[(0, 1)].abs() < 1e-10 && g[(1, 0)].abs() < 1e-10);
        // drift: F̄_k = −2ν_k I_k + b_k²
        let f = (s.drift)(&i).unwrap();
        assert_relative_eq!(f[0], -2.0 * i[0] + 1.0, max_relative = 1e-9);
        assert_relative_eq!(f[1], -4.0 * i[1] + 0.25, max_relative = 1e-9);
    }

    #[test]
    fn averaged_action_memoization_is_bitwise_stable() {
        let p = PerturbationField::new(friction(vec![1.0, 1.0]));
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let sys = build_averaged_action(&p, &b, &rule).unwrap();
        let SdeSystem::Action(s) = &sys else { panic!() };
        let i = RVec::from_vec(vec![0.31415926, 0.2718281]);
        let f1 = (s.drift)(&i).unwrap();
        let f2 = (s.drift)(&i).unwrap();
        assert_eq!(f1.as_slice(), f2.as_slice());
        // a point inside the same 1e-6 cell maps to the same coefficients
        let nudged = RVec::from_vec(vec![0.31415926 + 2e-8, 0.2718281 - 2e-8]);
        let f3 = (s.drift)(&nudged).unwrap();
        assert_eq!(f1.as_slice(), f3.as_slice());
    }

    #[test]
    fn averaged_coefficients_depend_on_actions_only() {
        // quadrature over angle nodes shifted by a random offset must give
        // the same averaged coefficients (trig-polynomial integrands are
        // integrated exactly by both node sets)
        let p = PerturbationField::with_split(friction(vec![1.0, 2.0]), coupling_h());
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let i = RVec::from_vec(vec![0.6, 1.1]);
        let plain = QuadratureRule::tensor(2, 16).unwrap();
        let shift = [1.234_f64, 2.345];
        let shifted_nodes: Vec<RVec> = plain
            .nodes()
            .iter()
            .map(|x| {
                RVec::from_iterator(
                    2,
                    x.iter()
                        .zip(shift.iter())
                        .map(|(&a, &s)| crate::state::reduce_angle(a + s)),
                )
            })
            .collect();
        let shifted =
            QuadratureRule::from_nodes(shifted_nodes, plain.weights().to_vec()).unwrap();
        let (f1, d1) = average_action_coefficients(&p, &b, &i, &plain).unwrap();
        let (f2, d2) = average_action_coefficients(&p, &b, &i, &shifted).unwrap();
        for k in 0..2 {
            assert_relative_eq!(f1[k], f2[k], epsilon = 1e-10);
            for l in 0..2 {
                assert_relative_eq!(d1.k[(k, l)], d2.k[(k, l)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn effective_drift_keeps_friction_and_drops_coupling() {
        let p = PerturbationField::with_split(friction(vec![1.0, 2.0]), coupling_h());
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let sys = build_effective(&p, &b, &rule).unwrap();
        let SdeSystem::Complex(s) = &sys else { panic!() };
        assert!(s.stiff.is_none());
        let a = cvec(&[(0.9, -0.3), (0.2, 0.7)]);
        let drift = (s.drift)(&a).unwrap();
        // ⟨⟨P⟩⟩ = −diag(ν) a: the h-coupling 0.1 Re(v₁v̄₂) averages to zero
        assert!((drift[0] - (-1.0) * a[0]).norm() < 1e-12);
        assert!((drift[1] - (-2.0) * a[1]).norm() < 1e-12);
    }

    #[test]
    fn rotation_invariant_ingredients_average_to_themselves() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| v.map(|z| -z.norm_sqr() * z)));
        let b =
            DispersionField::constant(CMat::identity(2, 2) * Complex64::new(0.3, 0.0)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let sys = build_effective(&p, &b, &rule).unwrap();
        let SdeSystem::Complex(s) = &sys else { panic!() };
        let a = cvec(&[(1.2, 0.1), (-0.5, 0.4)]);
        let drift = (s.drift)(&a).unwrap();
        let expect = a.map(|z| -z.norm_sqr() * z);
        for k in 0..2 {
            assert!((drift[k] - expect[k]).norm() < 1e-13);
        }
        let disp = (s.dispersion)(&a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 0.3 } else { 0.0 };
                assert!((disp[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn modified_effective_is_plain_ou_for_damped_driven_ingredients() {
        let p = PerturbationField::with_split(friction(vec![1.0, 2.0]), coupling_h());
        let bdiag = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.5, 0.0),
        ]));
        let b = DispersionField::constant(bdiag).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let sys = build_effective_modified(&p, &b, &rule).unwrap();
        let SdeSystem::Complex(s) = &sys else { panic!() };
        let a = cvec(&[(0.4, 0.8), (-0.6, 0.1)]);
        let drift = (s.drift)(&a).unwrap();
        assert!((drift[0] - (-1.0) * a[0]).norm() < 1e-12);
        assert!((drift[1] - (-2.0) * a[1]).norm() < 1e-12);
        let disp = (s.dispersion)(&a).unwrap();
        assert!((disp[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((disp[(1, 1)] - Complex64::new(0.5, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn modified_effective_requires_a_consistent_split() {
        // consistent split: field assembled from its parts
        let p = PerturbationField::with_split(friction(vec![1.0, 1.0]), coupling_h());
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        assert!(build_effective_modified(&p, &b, &rule).is_ok());

        // inconsistent: declared split does not reproduce the total field
        let broken = PerturbationField::from_parts(
            Arc::new(|v: &CVec| v.map(|z| -3.0 * z)),
            friction(vec![1.0, 1.0]),
            coupling_h(),
        );
        assert!(matches!(
            build_effective_modified(&broken, &b, &rule),
            Err(Error::SplitResidual { .. })
        ));

        // no split at all
        let bare = PerturbationField::new(friction(vec![1.0, 1.0]));
        assert!(build_effective_modified(&bare, &b, &rule).is_err());
    }

    #[test]
    fn effective_minus_modified_drift_equals_averaged_hamiltonian_part() {
        // use an h with a rotation-invariant piece so ⟨⟨P₂⟩⟩ ≠ 0
        let h = RealHamiltonian::new(
            Arc::new(|v: &CVec| {
                let i1 = 0.5 * v[0].norm_sqr();
                let i2 = 0.5 * v[1].norm_sqr();
                0.1 * (v[0] * v[1].conj()).re + 0.05 * (i1 * i1 + i2 * i2)
            }),
            Some(Arc::new(|v: &CVec| {
                let i1 = 0.5 * v[0].norm_sqr();
                let i2 = 0.5 * v[1].norm_sqr();
                CVec::from_vec(vec![
                    0.05 * v[1] + 0.05 * i1 * v[0],
                    0.05 * v[0] + 0.05 * i2 * v[1],
                ])
            })),
        );
        let p = PerturbationField::with_split(friction(vec![1.0, 2.0]), h.clone());
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let rule = QuadratureRule::tensor(2, 16).unwrap();
        let eff = build_effective(&p, &b, &rule).unwrap();
        let eff_mod = build_effective_modified(&p, &b, &rule).unwrap();
        let (SdeSystem::Complex(e), SdeSystem::Complex(m)) = (&eff, &eff_mod) else {
            panic!()
        };
        let p2 = PerturbationField::new(Arc::new(move |v: &CVec| h.field(v).expect("field")));
        let a = cvec(&[(0.8, 0.3), (-0.4, 0.9)]);
        let diff = (e.drift)(&a).unwrap() - (m.drift)(&a).unwrap();
        let avg_p2 = average_field(&p2, &a, &rule).unwrap();
        for k in 0..2 {
            assert!((diff[k] - avg_p2[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn deterministic_averaged_friction_decays_exponentially() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| v.map(|z| -z)));
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let ode = build_deterministic_averaged(&p, &rule).unwrap();
        let i0 = RVec::from_vec(vec![1.0, 0.4]);
        let path = ode.integrate(&i0, 1e-3, 2.0).unwrap();
        let (t, i_end) = path.last().unwrap();
        for k in 0..2 {
            assert_relative_eq!(i_end[k], i0[k] * (-2.0 * t).exp(), max_relative = 1e-8);
        }
    }

    #[test]
    fn action_only_hamiltonian_field_freezes_averaged_actions() {
        // P = i g'(I_k) v_k preserves the actions; the averaged drift is 0
        let p = PerturbationField::new(Arc::new(|v: &CVec| {
            v.map(|z| Complex64::new(0.0, 0.5 * z.norm_sqr()) * z)
        }));
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let ode = build_deterministic_averaged(&p, &rule).unwrap();
        let i0 = RVec::from_vec(vec![0.9, 0.2]);
        let rhs = ode.rhs(&i0).unwrap();
        assert!(rhs.iter().all(|&x| x.abs() < 1e-14));
    }

    #[test]
    fn deterministic_ode_matches_noiseless_averaged_sde() {
        let p = PerturbationField::new(friction(vec![1.0, 0.5]));
        let b = DispersionField::constant(CMat::zeros(2, 2)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let sde = build_averaged_action(&p, &b, &rule).unwrap();
        let ode = build_deterministic_averaged(&p, &rule).unwrap();
        let i0 = RVec::from_vec(vec![0.7, 1.2]);

        let cfg = crate::sde::PathConfig {
            dtau: 1e-3,
            t_final: 1.0,
            seed: 3,
            scheme: crate::sde::Scheme::Euler,
        };
        let sde_path =
            crate::sde::integrate_path(&sde, &crate::sde::State::Action(i0.clone()), &cfg).unwrap();
        let ode_path = ode.integrate(&i0, 1e-3, 1.0).unwrap();
        let sde_end = sde_path.states.last().unwrap().actions();
        let (_, ode_end) = ode_path.last().unwrap();
        for k in 0..2 {
            // same coefficients, zero noise: the gap is the Euler stepper's
            // first-order error, ≈ 2·dtau relative for this decay rate
            assert_relative_eq!(sde_end[k], ode_end[k], max_relative = 5e-3);
        }
    }

    #[test]
    fn bundle_builds_all_members() {
        let h = IntegrableHamiltonian::linear(RVec::from_vec(vec![1.0, 2.0_f64.sqrt()]));
        let p = PerturbationField::with_split(friction(vec![1.0, 2.0]), coupling_h());
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let bundle = EquationBundle::build(&h, &p, &b, 0.01, &rule).unwrap();
        assert_eq!(bundle.dim, 2);
        assert!(bundle.effective_modified.is_some());
        let v = cvec(&[(1.0, 0.0), (0.0, 1.0)]);
        let f = bundle.action_coefficients.drift(&v);
        assert_eq!(f.len(), 2);
        let g = bundle.action_coefficients.dispersion(&v);
        assert_eq!(g.shape(), (2, 4));
    }
}
