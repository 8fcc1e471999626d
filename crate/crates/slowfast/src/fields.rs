//! Model ingredients of the perturbed system: the integrable Hamiltonian
//! `H(I)`, the perturbation field `P(v)`, the dispersion matrix `B(v)` and
//! real Hamiltonians `h(v)` with their symplectic gradients.
//!
//! A vector field is Hamiltonian with real Hamiltonian `h` when
//! `P̃_k(v) = 2i ∂h/∂v̄_k`, where `∂/∂v̄ = ½(∂/∂x + i∂/∂y)` in `v = x + iy`
//! coordinates. Gradients may be supplied analytically; the fallback is a
//! central finite difference with step `1e-6`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::{CMat, CVec, Error, RVec, Result};

/// Step used by all finite-difference gradient fallbacks.
pub const FD_STEP: f64 = 1e-6;

pub type RealFn = Arc<dyn Fn(&RVec) -> f64 + Send + Sync>;
pub type RealGradFn = Arc<dyn Fn(&RVec) -> RVec + Send + Sync>;
pub type StateFieldFn = Arc<dyn Fn(&CVec) -> CVec + Send + Sync>;
pub type StateRealFn = Arc<dyn Fn(&CVec) -> f64 + Send + Sync>;
pub type StateMatrixFn = Arc<dyn Fn(&CVec) -> CMat + Send + Sync>;

/// Integrable Hamiltonian `H: ℝ₊ⁿ → ℝ` together with its frequency map
/// `∇H(I)`.
#[derive(Clone)]
pub struct IntegrableHamiltonian {
    energy: RealFn,
    gradient: Option<RealGradFn>,
}

impl IntegrableHamiltonian {
    pub fn new(energy: RealFn, gradient: Option<RealGradFn>) -> Self {
        Self { energy, gradient }
    }

    /// Constant-frequency case `H(I) = λ·I`, `∇H ≡ λ`.
    pub fn linear(lambda: RVec) -> Self {
        let l = lambda.clone();
        Self {
            energy: Arc::new(move |i: &RVec| l.dot(i)),
            gradient: Some(Arc::new(move |_: &RVec| lambda.clone())),
        }
    }

    pub fn energy(&self, actions: &RVec) -> f64 {
        (self.energy)(actions)
    }

    /// Frequency vector `∇H(I)`. Uses the supplied gradient when present,
    /// otherwise central finite differences (one-sided at the boundary of
    /// `ℝ₊ⁿ` so `H` is never evaluated at negative actions).
    pub fn frequencies(&self, actions: &RVec) -> RVec {
        match &self.gradient {
            Some(g) => g(actions),
            None => fd_gradient(self.energy.as_ref(), actions, FD_STEP),
        }
    }
}

/// Central finite-difference gradient of a function of the actions,
/// one-sided where a centered stencil would leave `ℝ₊ⁿ`.
pub fn fd_gradient(f: &(dyn Fn(&RVec) -> f64 + Send + Sync), x: &RVec, step: f64) -> RVec {
    let mut grad = RVec::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let xk = x[k];
        if xk >= step {
            xp[k] = xk + step;
            let fp = f(&xp);
            xp[k] = xk - step;
            let fm = f(&xp);
            grad[k] = (fp - fm) / (2.0 * step);
        } else {
            xp[k] = xk + step;
            let fp = f(&xp);
            xp[k] = xk;
            let f0 = f(&xp);
            grad[k] = (fp - f0) / step;
        }
        xp[k] = xk;
    }
    grad
}

/// Real Hamiltonian `h(v)` with an optional analytic Wirtinger gradient
/// `∂h/∂v̄`.
#[derive(Clone)]
pub struct RealHamiltonian {
    value: StateRealFn,
    wirtinger: Option<StateFieldFn>,
}

impl RealHamiltonian {
    pub fn new(value: StateRealFn, wirtinger: Option<StateFieldFn>) -> Self {
        Self { value, wirtinger }
    }

    pub fn eval(&self, v: &CVec) -> f64 {
        (self.value)(v)
    }

    /// The Hamiltonian vector field `2i ∂h/∂v̄(v)`.
    pub fn field(&self, v: &CVec) -> Result<CVec> {
        hamiltonian_field(self, v)
    }
}

/// Hamiltonian vector field `2i ∂h/∂v̄_k(v)` of a real function `h`.
pub fn hamiltonian_field(h: &RealHamiltonian, v: &CVec) -> Result<CVec> {
    let wirt = match &h.wirtinger {
        Some(w) => w(v),
        None => fd_wirtinger(h.value.as_ref(), v, FD_STEP),
    };
    if wirt.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("hamiltonian field gradient"));
    }
    Ok(wirt.map(|z| Complex64::new(0.0, 2.0) * z))
}

/// Finite-difference `∂h/∂v̄_k = ½(∂h/∂x_k + i ∂h/∂y_k)`.
pub fn fd_wirtinger(h: &(dyn Fn(&CVec) -> f64 + Send + Sync), v: &CVec, step: f64) -> CVec {
    let mut out = CVec::zeros(v.len());
    let mut vp = v.clone();
    for k in 0..v.len() {
        let vk = v[k];
        vp[k] = vk + Complex64::new(step, 0.0);
        let hx_p = h(&vp);
        vp[k] = vk - Complex64::new(step, 0.0);
        let hx_m = h(&vp);
        vp[k] = vk + Complex64::new(0.0, step);
        let hy_p = h(&vp);
        vp[k] = vk - Complex64::new(0.0, step);
        let hy_m = h(&vp);
        vp[k] = vk;
        let hx = (hx_p - hx_m) / (2.0 * step);
        let hy = (hy_p - hy_m) / (2.0 * step);
        out[k] = 0.5 * Complex64::new(hx, hy);
    }
    out
}

/// Hamiltonian split `P = P1 + P2` with `P2 = 2i ∂h/∂v̄`.
#[derive(Clone)]
pub struct PerturbationSplit {
    pub p1: StateFieldFn,
    pub h: RealHamiltonian,
}

/// Perturbation field `P: ℂⁿ → ℂⁿ`, optionally carrying a Hamiltonian
/// split.
#[derive(Clone)]
pub struct PerturbationField {
    field: StateFieldFn,
    split: Option<PerturbationSplit>,
}

impl PerturbationField {
    pub fn new(field: StateFieldFn) -> Self {
        Self { field, split: None }
    }

    /// Assembles `P = P1 + 2i ∂h/∂v̄` from its parts; the split residual is
    /// zero by construction.
    pub fn with_split(p1: StateFieldFn, h: RealHamiltonian) -> Self {
        let p1c = p1.clone();
        let hc = h.clone();
        let field: StateFieldFn = Arc::new(move |v: &CVec| {
            let base = p1c(v);
            match hc.field(v) {
                Ok(f) => base + f,
                Err(_) => CVec::from_element(v.len(), Complex64::new(f64::NAN, f64::NAN)),
            }
        });
        Self {
            field,
            split: Some(PerturbationSplit { p1, h }),
        }
    }

    /// Declares a split for an independently supplied total field. The
    /// consistency `P − P1 − 2i∂h/∂v̄ ≈ 0` is checked where it matters
    /// (e.g. when building the modified effective equation).
    pub fn from_parts(field: StateFieldFn, p1: StateFieldFn, h: RealHamiltonian) -> Self {
        Self {
            field,
            split: Some(PerturbationSplit { p1, h }),
        }
    }

    pub fn eval(&self, v: &CVec) -> CVec {
        (self.field)(v)
    }

    pub fn split(&self) -> Option<&PerturbationSplit> {
        self.split.as_ref()
    }

    /// Sup-norm of `P(v) − P1(v) − 2i∂h/∂v̄(v)` at `v`, when a split is
    /// declared.
    pub fn split_residual(&self, v: &CVec) -> Result<Option<f64>> {
        let Some(split) = &self.split else {
            return Ok(None);
        };
        let total = self.eval(v);
        let p1 = (split.p1)(v);
        let p2 = split.h.field(v)?;
        let res = (&total - &p1 - &p2)
            .iter()
            .map(|z| z.norm())
            .fold(0.0_f64, f64::max);
        Ok(Some(res))
    }
}

/// Dispersion field `B: ℂⁿ → ℂ^{n×n1}`.
#[derive(Clone)]
pub struct DispersionField {
    matrix: StateMatrixFn,
    constant: Option<CMat>,
    rows: usize,
    cols: usize,
}

impl DispersionField {
    /// State-dependent dispersion; `n1 ≥ n` so the noise can have full rank.
    pub fn new(rows: usize, cols: usize, matrix: StateMatrixFn) -> Result<Self> {
        if cols < rows {
            return Err(Error::invalid(format!(
                "dispersion must have at least as many columns as rows (n1 = {cols} < n = {rows})"
            )));
        }
        Ok(Self {
            matrix,
            constant: None,
            rows,
            cols,
        })
    }

    /// Constant dispersion matrix.
    pub fn constant(mat: CMat) -> Result<Self> {
        let (rows, cols) = mat.shape();
        if cols < rows {
            return Err(Error::invalid(format!(
                "dispersion must have at least as many columns as rows (n1 = {cols} < n = {rows})"
            )));
        }
        let m = mat.clone();
        Ok(Self {
            matrix: Arc::new(move |_: &CVec| m.clone()),
            constant: Some(mat),
            rows,
            cols,
        })
    }

    pub fn eval(&self, v: &CVec) -> CMat {
        match &self.constant {
            Some(m) => m.clone(),
            None => (self.matrix)(v),
        }
    }

    pub fn as_constant(&self) -> Option<&CMat> {
        self.constant.as_ref()
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of driving complex Wiener components `n1`.
    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cvec(parts: &[(f64, f64)]) -> CVec {
        CVec::from_iterator(parts.len(), parts.iter().map(|&(re, im)| Complex64::new(re, im)))
    }

    #[test]
    fn field_of_quadratic_h_is_rotation() {
        // h = ½|v|²  ⇒  2i ∂h/∂v̄ = i v
        let h = RealHamiltonian::new(Arc::new(|v: &CVec| 0.5 * v.iter().map(|z| z.norm_sqr()).sum::<f64>()), None);
        let v = cvec(&[(0.7, -0.3), (1.2, 0.4)]);
        let f = h.field(&v).unwrap();
        for k in 0..2 {
            let expected = Complex64::new(0.0, 1.0) * v[k];
            assert_relative_eq!(f[k].re, expected.re, epsilon = 1e-8);
            assert_relative_eq!(f[k].im, expected.im, epsilon = 1e-8);
        }
    }

    #[test]
    fn field_of_constant_h_vanishes() {
        let h = RealHamiltonian::new(Arc::new(|_: &CVec| 42.0), None);
        let f = h.field(&cvec(&[(1.0, 2.0)])).unwrap();
        assert!(f[0].norm() < 1e-9);
    }

    #[test]
    fn analytic_wirtinger_matches_finite_differences() {
        // h = Re(v₁ v̄₂): ∂h/∂v̄₁ = ½ v₂, ∂h/∂v̄₂ = ½ v₁
        let value: StateRealFn = Arc::new(|v: &CVec| (v[0] * v[1].conj()).re);
        let wirt: StateFieldFn = Arc::new(|v: &CVec| {
            CVec::from_vec(vec![0.5 * v[1], 0.5 * v[0]])
        });
        let h = RealHamiltonian::new(value.clone(), Some(wirt));
        let v = cvec(&[(0.9, 0.2), (-0.5, 1.1)]);
        let analytic = h.field(&v).unwrap();
        let fd = fd_wirtinger(value.as_ref(), &v, FD_STEP).map(|z| Complex64::new(0.0, 2.0) * z);
        for k in 0..2 {
            assert!((analytic[k] - fd[k]).norm() <= 1e-5 * (1.0 + analytic[k].norm()));
        }
    }

    #[test]
    fn linear_hamiltonian_gradient() {
        let h = IntegrableHamiltonian::linear(RVec::from_vec(vec![1.0, 2.0, 3.0]));
        let i = RVec::from_vec(vec![0.4, 0.0, 1.5]);
        assert_relative_eq!(h.energy(&i), 0.4 + 4.5, max_relative = 1e-15);
        assert_eq!(h.frequencies(&i).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fd_gradient_matches_analytic_on_smooth_h() {
        let energy: RealFn = Arc::new(|i: &RVec| i[0] + 2.0_f64.sqrt() * i[1] + 0.5 * i.dot(i));
        let h = IntegrableHamiltonian::new(energy, None);
        let i = RVec::from_vec(vec![0.8, 1.3]);
        let g = h.frequencies(&i);
        assert_relative_eq!(g[0], 1.0 + 0.8, max_relative = 1e-6);
        assert_relative_eq!(g[1], 2.0_f64.sqrt() + 1.3, max_relative = 1e-6);
        // boundary: one-sided stencil keeps H on ℝ₊ⁿ
        let g0 = h.frequencies(&RVec::from_vec(vec![0.0, 0.0]));
        assert_relative_eq!(g0[0], 1.0, max_relative = 1e-5);
    }

    #[test]
    fn split_residual_is_zero_for_assembled_split() {
        let p1: StateFieldFn = Arc::new(|v: &CVec| v.map(|z| -z));
        let h = RealHamiltonian::new(
            Arc::new(|v: &CVec| (v[0] * v[1].conj()).re),
            Some(Arc::new(|v: &CVec| CVec::from_vec(vec![0.5 * v[1], 0.5 * v[0]]))),
        );
        let p = PerturbationField::with_split(p1, h);
        let v = cvec(&[(1.0, 0.5), (0.3, -0.2)]);
        let res = p.split_residual(&v).unwrap().unwrap();
        assert!(res < 1e-14);
    }

    #[test]
    fn dispersion_shape_guard() {
        assert!(DispersionField::constant(CMat::zeros(2, 1)).is_err());
        let b = DispersionField::constant(CMat::identity(2, 3)).unwrap();
        assert_eq!(b.rows(), 2);
        assert_eq!(b.cols(), 3);
        assert!(b.is_constant());
    }

    #[test]
    fn action_velocity_along_hamiltonian_field_matches_difference_quotient() {
        // the drift part of d(½|v_k|²) along the field is Re(v̄_k · 2i∂h/∂v̄_k)
        let h = RealHamiltonian::new(
            Arc::new(|v: &CVec| (v[0] * v[0] * v[1].conj()).re),
            None,
        );
        let v = cvec(&[(0.8, 0.3), (-0.2, 0.9)]);
        let field = h.field(&v).unwrap();
        let delta = 1e-7;
        let moved = &v + CVec::from_iterator(2, field.iter().map(|f| delta * f));
        for k in 0..2 {
            let di = (0.5 * moved[k].norm_sqr() - 0.5 * v[k].norm_sqr()) / delta;
            let expect = (v[k].conj() * field[k]).re;
            assert!(
                (di - expect).abs() <= 1e-5 * (1.0 + expect.abs()),
                "coordinate {k}: {di} vs {expect}"
            );
        }
    }

    #[test]
    fn h_is_conserved_along_the_flow_of_its_own_field() {
        // RK4 on the 2n-dimensional real representation of v̇ = 2i∂h/∂v̄
        let h = RealHamiltonian::new(
            Arc::new(|v: &CVec| {
                (v[0] * v[1].conj()).re + 0.3 * (v[0] * v[0] * v[1].conj()).im
            }),
            None,
        );
        let to_real = |v: &CVec| {
            RVec::from_iterator(4, v.iter().flat_map(|z| [z.re, z.im]))
        };
        let to_cplx = |x: &RVec| {
            CVec::from_iterator(2, (0..2).map(|k| Complex64::new(x[2 * k], x[2 * k + 1])))
        };
        let hc = h.clone();
        let rhs = move |x: &RVec| -> crate::Result<RVec> {
            let f = hc.field(&to_cplx(x))?;
            Ok(RVec::from_iterator(4, f.iter().flat_map(|z| [z.re, z.im])))
        };
        let v0 = cvec(&[(0.9, -0.1), (0.4, 0.6)]);
        let h0 = h.eval(&v0);
        let mut x = to_real(&v0);
        for _ in 0..1000 {
            x = crate::sde::rk4_step(&rhs, &x, 1e-3).unwrap();
        }
        let h1 = h.eval(&to_cplx(&x));
        assert!(
            (h1 - h0).abs() <= 1e-8,
            "h drifted by {:.3e} along its own flow",
            (h1 - h0).abs()
        );
    }
}
