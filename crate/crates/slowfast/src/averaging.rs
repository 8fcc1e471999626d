//! Torus averaging operators.
//!
//! Everything here discretizes the normalized torus average
//! `(2π)⁻ⁿ ∫_{𝕋ⁿ} · dω` with a quadrature rule. The three rule kinds are a
//! tensor grid of the rectangle rule (spectrally accurate for smooth
//! 2π-periodic integrands and exact on trigonometric polynomials of degree
//! below the grid size), a rank-1 lattice for higher dimensions, and plain
//! seeded Monte Carlo.
//!
//! The averaged objects:
//! - `⟨⟨P⟩⟩(a) = Σ_j w_j Φ_{ω_j} P(Φ_{−ω_j} a)` for vector fields,
//! - `K_eff(a) = Σ_j w_j Φ_{ω_j} B Bᴴ Φ_{ω_j}ᴴ |_{Φ_{−ω_j} a}` with
//!   `⟨⟨B⟩⟩ = √K_eff` (Hermitian principal root) for dispersion fields,
//! - `⟨⟨F⟩⟩(I), K(I) = Σ_j w_j G Gᵀ` and `⟨⟨G⟩⟩ = √K` for the action
//!   equation, where `F` and `G` are the Itô drift and dispersion of the
//!   actions.
//!
//! Weak solutions of an SDE depend on the dispersion only through its
//! diffusion matrix, so the principal square root is a valid choice of
//! averaged dispersion; it is also self-adjoint non-negative, matching the
//! structure the averaged equation needs on `ℝ₊ⁿ`.

use std::f64::consts::TAU;

use nalgebra::linalg::SymmetricEigen;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fields::{DispersionField, PerturbationField};
use crate::{CMat, CVec, Error, RMat, RVec, Result};

/// Hard cap on quadrature nodes (memory guard).
pub const MAX_NODES: usize = 10_000_000;

/// Node counts up to this limit get precomputed phase tables.
const PHASE_CACHE_LIMIT: usize = 1 << 18;

/// Eigenvalues below `−PSD_REJECT · scale` abort the square root.
pub const PSD_REJECT: f64 = 1e-8;

/// Quadrature rule families on `𝕋ⁿ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadKind {
    /// `M` equally spaced points per dimension (`Mⁿ` total).
    Tensor,
    /// Rank-1 lattice with `M` points.
    Lattice,
    /// `M` uniform points from a seeded generator.
    MonteCarlo { seed: u64 },
}

/// Nodes and weights discretizing the normalized torus average.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    dim: usize,
    nodes: Vec<RVec>,
    weights: Vec<f64>,
    kind: QuadKind,
    /// `e^{iω}` per node, cached for small rules.
    phases: Option<Vec<CVec>>,
}

impl QuadratureRule {
    /// Tensor grid with `m` points per dimension.
    pub fn tensor(dim: usize, m: usize) -> Result<Self> {
        if dim == 0 || m < 2 {
            return Err(Error::invalid("tensor rule needs dim >= 1 and m >= 2"));
        }
        let total = m.checked_pow(dim as u32).filter(|&t| t <= MAX_NODES);
        let Some(total) = total else {
            return Err(Error::QuadratureTooLarge {
                nodes: m.checked_pow(dim as u32).unwrap_or(usize::MAX),
                limit: MAX_NODES,
            });
        };
        let step = TAU / m as f64;
        let mut nodes = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        loop {
            nodes.push(RVec::from_iterator(dim, idx.iter().map(|&i| i as f64 * step)));
            let mut carried = true;
            for d in (0..dim).rev() {
                idx[d] += 1;
                if idx[d] < m {
                    carried = false;
                    break;
                }
                idx[d] = 0;
            }
            if carried {
                break;
            }
        }
        let w = 1.0 / total as f64;
        Ok(Self::assemble(dim, nodes, vec![w; total], QuadKind::Tensor))
    }

    /// Rank-1 lattice rule with `m` points. Dimension 2 uses the classical
    /// Fibonacci lattice; other dimensions use a Korobov generating vector
    /// `(1, a, a², …) mod m` with `a` chosen by a deterministic scan that
    /// avoids aliasing on low-order harmonics.
    pub fn lattice(dim: usize, m: usize) -> Result<Self> {
        if dim == 0 || m < 2 {
            return Err(Error::invalid("lattice rule needs dim >= 1 and m >= 2"));
        }
        if m > MAX_NODES {
            return Err(Error::QuadratureTooLarge {
                nodes: m,
                limit: MAX_NODES,
            });
        }
        let (m, gen) = if dim == 2 {
            let (fm, fprev) = fibonacci_at_least(m);
            (fm, vec![1, fprev])
        } else {
            (m, korobov_vector(dim, m))
        };
        let mut nodes = Vec::with_capacity(m);
        for j in 0..m {
            nodes.push(RVec::from_iterator(
                dim,
                gen.iter()
                    .map(|&z| TAU * ((j as u64 * z) % m as u64) as f64 / m as f64),
            ));
        }
        let w = 1.0 / m as f64;
        Ok(Self::assemble(dim, nodes, vec![w; m], QuadKind::Lattice))
    }

    /// `m` uniform nodes from a seeded generator.
    pub fn monte_carlo(dim: usize, m: usize, seed: u64) -> Result<Self> {
        if dim == 0 || m < 2 {
            return Err(Error::invalid("monte-carlo rule needs dim >= 1 and m >= 2"));
        }
        if m > MAX_NODES {
            return Err(Error::QuadratureTooLarge {
                nodes: m,
                limit: MAX_NODES,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = (0..m)
            .map(|_| RVec::from_fn(dim, |_, _| rng.random_range(0.0..TAU)))
            .collect();
        let w = 1.0 / m as f64;
        Ok(Self::assemble(dim, nodes, vec![w; m], QuadKind::MonteCarlo { seed }))
    }

    /// Explicit nodes and weights (used by tests and custom rules).
    pub fn from_nodes(nodes: Vec<RVec>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::invalid("nodes and weights must be non-empty and equal-length"));
        }
        let dim = nodes[0].len();
        if nodes.iter().any(|x| x.len() != dim) {
            return Err(Error::invalid("all nodes must share one dimension"));
        }
        if nodes.iter().any(|x| x.iter().any(|&c| !(0.0..TAU).contains(&c))) {
            return Err(Error::invalid("nodes must lie in [0, 2π)^n"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self::assemble(dim, nodes, weights, QuadKind::Tensor))
    }

    fn assemble(dim: usize, nodes: Vec<RVec>, weights: Vec<f64>, kind: QuadKind) -> Self {
        let phases = (nodes.len() <= PHASE_CACHE_LIMIT).then(|| {
            nodes
                .iter()
                .map(|omega| CVec::from_iterator(dim, omega.iter().map(|&w| Complex64::from_polar(1.0, w))))
                .collect()
        });
        Self {
            dim,
            nodes,
            weights,
            kind,
            phases,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self) -> QuadKind {
        self.kind
    }

    pub fn nodes(&self) -> &[RVec] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Visits `(w_j, e^{iω_j})` for every node.
    pub fn for_each_phase<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(f64, &CVec) -> Result<()>,
    {
        match &self.phases {
            Some(cache) => {
                for (w, phase) in self.weights.iter().zip(cache.iter()) {
                    f(*w, phase)?;
                }
            }
            None => {
                let mut buf = CVec::zeros(self.dim);
                for (w, omega) in self.weights.iter().zip(self.nodes.iter()) {
                    for (p, &x) in buf.iter_mut().zip(omega.iter()) {
                        *p = Complex64::from_polar(1.0, x);
                    }
                    f(*w, &buf)?;
                }
            }
        }
        Ok(())
    }
}

/// Spec-level constructor: `points` is per-dimension for tensor rules and
/// the total count otherwise.
pub fn make_quadrature(dim: usize, points: usize, kind: QuadKind) -> Result<QuadratureRule> {
    match kind {
        QuadKind::Tensor => QuadratureRule::tensor(dim, points),
        QuadKind::Lattice => QuadratureRule::lattice(dim, points),
        QuadKind::MonteCarlo { seed } => QuadratureRule::monte_carlo(dim, points, seed),
    }
}

/// Smallest Fibonacci number `F_k ≥ m`, returned with `F_{k−1}`.
fn fibonacci_at_least(m: usize) -> (usize, u64) {
    let (mut a, mut b) = (1u64, 2u64); // F_2, F_3
    while (b as usize) < m {
        let next = a + b;
        a = b;
        b = next;
    }
    (b as usize, a)
}

/// Korobov generating vector `(1, a, a², …) mod m`, with `a` selected by a
/// deterministic scan over candidates that rejects aliasing of low-order
/// harmonics (`s · z ≡ 0 mod m` for small `s ≠ 0`).
fn korobov_vector(dim: usize, m: usize) -> Vec<u64> {
    let band = if dim <= 4 { 3i64 } else { 1 };
    let m64 = m as u64;
    let mut best: Option<(u64, Vec<u64>)> = None;
    let candidates = 256.min(m / 2);
    for c in 0..candidates {
        let a = (m as u64 / 4 + (c as u64 * m as u64) / (2 * candidates as u64)) | 1;
        let a = a % m64;
        if a <= 1 {
            continue;
        }
        let mut z = Vec::with_capacity(dim);
        let mut pow = 1u64;
        for _ in 0..dim {
            z.push(pow);
            pow = (pow * a) % m64;
        }
        let score = smallest_aliased_harmonic(&z, m64, band);
        match &best {
            Some((s, _)) if *s >= score => {}
            _ => best = Some((score, z)),
        }
        if score == u64::MAX {
            break;
        }
    }
    best.map(|(_, z)| z).unwrap_or_else(|| {
        let mut z = Vec::with_capacity(dim);
        let mut pow = 1u64;
        for _ in 0..dim {
            z.push(pow);
            pow = (pow * 3) % m64;
        }
        z
    })
}

/// `min |s|₁` over aliased harmonics `0 < |s|∞ ≤ band`, or `u64::MAX` when
/// none alias.
fn smallest_aliased_harmonic(z: &[u64], m: u64, band: i64) -> u64 {
    let dim = z.len();
    let mut s = vec![-band; dim];
    let mut worst = u64::MAX;
    loop {
        if s.iter().any(|&c| c != 0) {
            let dot = s
                .iter()
                .zip(z.iter())
                .fold(0i128, |acc, (&c, &zk)| acc + c as i128 * zk as i128);
            if dot.rem_euclid(m as i128) == 0 {
                let l1: u64 = s.iter().map(|&c| c.unsigned_abs()).sum();
                worst = worst.min(l1);
            }
        }
        let mut carried = true;
        for c in s.iter_mut().rev() {
            *c += 1;
            if *c <= band {
                carried = false;
                break;
            }
            *c = -band;
        }
        if carried {
            return worst;
        }
    }
}

// ---------------------------------------------------------------------------
// Averaged operators
// ---------------------------------------------------------------------------

/// Averaged diffusion matrix together with its principal square root
/// (`root · rootᴴ = k`).
#[derive(Debug, Clone)]
pub struct AveragedDiffusion<T: nalgebra::Scalar> {
    pub k: nalgebra::DMatrix<T>,
    pub root: nalgebra::DMatrix<T>,
}

/// Complex-Hermitian averaged diffusion of the effective equation.
pub type StateDiffusion = AveragedDiffusion<Complex64>;
/// Real-symmetric averaged diffusion of the action equation.
pub type ActionDiffusion = AveragedDiffusion<f64>;

/// Rotation average `⟨⟨P⟩⟩(a) = Σ_j w_j Φ_{ω_j} P(Φ_{−ω_j} a)`.
pub fn average_field(p: &PerturbationField, a: &CVec, rule: &QuadratureRule) -> Result<CVec> {
    let n = a.len();
    if rule.dim() != n {
        return Err(Error::Dimension {
            what: "average_field rule",
            expected: n,
            got: rule.dim(),
        });
    }
    let mut acc = CVec::zeros(n);
    let mut vbuf = CVec::zeros(n);
    rule.for_each_phase(|w, phase| {
        for k in 0..n {
            vbuf[k] = phase[k].conj() * a[k];
        }
        let pv = p.eval(&vbuf);
        for k in 0..n {
            acc[k] += w * phase[k] * pv[k];
        }
        Ok(())
    })?;
    if acc.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("average_field"));
    }
    Ok(acc)
}

/// Rotation-averaged diffusion of the state equation:
/// `K_eff(a) = Σ_j w_j Φ_{ω_j} B Bᴴ Φ_{ω_j}ᴴ` evaluated at `Φ_{−ω_j} a`,
/// returned with its Hermitian principal root `⟨⟨B⟩⟩`.
pub fn average_diffusion_state(
    b: &DispersionField,
    a: &CVec,
    rule: &QuadratureRule,
) -> Result<StateDiffusion> {
    let n = a.len();
    if b.rows() != n {
        return Err(Error::Dimension {
            what: "average_diffusion_state",
            expected: n,
            got: b.rows(),
        });
    }
    let mut k_eff = CMat::zeros(n, n);
    let mut vbuf = CVec::zeros(n);
    rule.for_each_phase(|w, phase| {
        for k in 0..n {
            vbuf[k] = phase[k].conj() * a[k];
        }
        let bmat = b.eval(&vbuf);
        // Φ B (B)ᴴ Φᴴ accumulated entrywise: phases scale rows/columns.
        for row in 0..n {
            for col in row..n {
                let mut c = Complex64::new(0.0, 0.0);
                for j in 0..bmat.ncols() {
                    c += bmat[(row, j)] * bmat[(col, j)].conj();
                }
                let val = w * phase[row] * c * phase[col].conj();
                k_eff[(row, col)] += val;
            }
        }
        Ok(())
    })?;
    // mirror the strict upper triangle; the diagonal is real up to rounding
    for row in 0..n {
        k_eff[(row, row)] = Complex64::new(k_eff[(row, row)].re, 0.0);
        for col in (row + 1)..n {
            k_eff[(col, row)] = k_eff[(row, col)].conj();
        }
    }
    if k_eff.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("average_diffusion_state"));
    }
    let root = psd_sqrt_hermitian(&k_eff)?;
    Ok(StateDiffusion { k: k_eff, root })
}

/// Itô drift of the actions under the perturbed state equation:
/// `F_k(v) = Re(v̄_k P_k(v)) + Σ_l |B_{kl}(v)|²`.
pub fn action_drift(p: &PerturbationField, b: &DispersionField, v: &CVec) -> RVec {
    let pv = p.eval(v);
    let bmat = b.eval(v);
    RVec::from_fn(v.len(), |k, _| {
        let ito: f64 = (0..bmat.ncols()).map(|j| bmat[(k, j)].norm_sqr()).sum();
        (v[k].conj() * pv[k]).re + ito
    })
}

/// Real dispersion of the action equation driven by the `2n1` independent
/// real components of the complex noise: with `z_kj = v̄_k B_kj`, column
/// `2j` is `Re z_kj` and column `2j+1` is `−Im z_kj`, matching the
/// interleaved (re, im) layout of sampled complex increments. Row `k` has
/// squared norm `Σ_j |v̄_k B_kj|²`, the Itô quadratic variation of `I_k`.
pub fn action_dispersion(b: &DispersionField, v: &CVec) -> RMat {
    let bmat = b.eval(v);
    let n = v.len();
    let n1 = bmat.ncols();
    let mut g = RMat::zeros(n, 2 * n1);
    for k in 0..n {
        let vk = v[k].conj();
        for j in 0..n1 {
            let z = vk * bmat[(k, j)];
            g[(k, 2 * j)] = z.re;
            g[(k, 2 * j + 1)] = -z.im;
        }
    }
    g
}

/// Angle-averaged coefficients of the action equation at the action point
/// `I`: drift `⟨⟨F⟩⟩(I)`, diffusion `K(I) = Σ_j w_j G Gᵀ` and its
/// symmetric root `⟨⟨G⟩⟩ = √K`.
pub fn average_action_coefficients(
    p: &PerturbationField,
    b: &DispersionField,
    actions: &RVec,
    rule: &QuadratureRule,
) -> Result<(RVec, ActionDiffusion)> {
    let n = actions.len();
    if rule.dim() != n {
        return Err(Error::Dimension {
            what: "average_action_coefficients rule",
            expected: n,
            got: rule.dim(),
        });
    }
    if let Some(bad) = actions.iter().find(|&&i| i < 0.0) {
        return Err(Error::invalid(format!("negative action {bad}")));
    }
    let radii = RVec::from_iterator(n, actions.iter().map(|&i| (2.0 * i).sqrt()));
    let constant_b = b.as_constant();
    let n1 = b.cols();

    let mut f_acc = RVec::zeros(n);
    let mut k_acc = RMat::zeros(n, n);
    let mut vbuf = CVec::zeros(n);
    let mut zbuf = CMat::zeros(n, n1);
    rule.for_each_phase(|w, phase| {
        for k in 0..n {
            vbuf[k] = radii[k] * phase[k];
        }
        let pv = p.eval(&vbuf);
        let owned;
        let bmat = match constant_b {
            Some(c) => c,
            None => {
                owned = b.eval(&vbuf);
                &owned
            }
        };
        for k in 0..n {
            let vk = vbuf[k].conj();
            let mut ito = 0.0;
            for j in 0..n1 {
                let bkj = bmat[(k, j)];
                ito += bkj.norm_sqr();
                zbuf[(k, j)] = vk * bkj;
            }
            f_acc[k] += w * ((vk * pv[k]).re + ito);
        }
        for row in 0..n {
            for col in row..n {
                let mut s = 0.0;
                for j in 0..n1 {
                    s += (zbuf[(row, j)] * zbuf[(col, j)].conj()).re;
                }
                k_acc[(row, col)] += w * s;
            }
        }
        Ok(())
    })?;
    for row in 0..n {
        for col in (row + 1)..n {
            k_acc[(col, row)] = k_acc[(row, col)];
        }
    }
    if f_acc.iter().any(|x| !x.is_finite()) || k_acc.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("average_action_coefficients"));
    }
    let root = psd_sqrt(&k_acc)?;
    Ok((f_acc, ActionDiffusion { k: k_acc, root }))
}

/// Angle average of the drift-only action velocity `Re(v̄_k P_k)`,
/// the right-hand side of the deterministic averaged equation.
pub fn average_action_drift_deterministic(
    p: &PerturbationField,
    actions: &RVec,
    rule: &QuadratureRule,
) -> Result<RVec> {
    let n = actions.len();
    if rule.dim() != n {
        return Err(Error::Dimension {
            what: "average_action_drift rule",
            expected: n,
            got: rule.dim(),
        });
    }
    if let Some(bad) = actions.iter().find(|&&i| i < 0.0) {
        return Err(Error::invalid(format!("negative action {bad}")));
    }
    let radii = RVec::from_iterator(n, actions.iter().map(|&i| (2.0 * i).sqrt()));
    let mut acc = RVec::zeros(n);
    let mut vbuf = CVec::zeros(n);
    rule.for_each_phase(|w, phase| {
        for k in 0..n {
            vbuf[k] = radii[k] * phase[k];
        }
        let pv = p.eval(&vbuf);
        for k in 0..n {
            acc[k] += w * (vbuf[k].conj() * pv[k]).re;
        }
        Ok(())
    })?;
    if acc.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("average_action_drift_deterministic"));
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Positive-semidefinite square roots
// ---------------------------------------------------------------------------

/// Principal square root of a real symmetric PSD matrix via spectral
/// decomposition. Eigenvalues in `[−1e-8·scale, 0)` are clamped to zero;
/// anything lower is rejected.
pub fn psd_sqrt(k: &RMat) -> Result<RMat> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Dimension {
            what: "psd_sqrt",
            expected: n,
            got: k.ncols(),
        });
    }
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    let scale = k.iter().fold(0.0_f64, |m, &x| m.max(x.abs())).max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NotHermitian { max_asymmetry: asym });
    }

    if n == 1 {
        let val = k[(0, 0)];
        if val < -PSD_REJECT * scale {
            return Err(Error::NotPsd { min_eigenvalue: val });
        }
        return Ok(RMat::from_element(1, 1, val.max(0.0).sqrt()));
    }
    if n == 2 {
        if let Some(root) = sqrt_2x2(k, scale)? {
            return Ok(root);
        }
    }

    let sym = RMat::from_fn(n, n, |i, j| 0.5 * (k[(i, j)] + k[(j, i)]));
    let eig = SymmetricEigen::new(sym);
    sqrt_from_eigen_real(&eig, scale)
}

/// Closed-form root of a symmetric PSD 2×2 matrix:
/// `√K = (K + √det·I) / √(tr + 2√det)`. Falls back to the spectral path
/// (Ok(None)) when the matrix is at the PSD boundary.
fn sqrt_2x2(k: &RMat, scale: f64) -> Result<Option<RMat>> {
    let (a, b, c) = (k[(0, 0)], k[(1, 1)], 0.5 * (k[(0, 1)] + k[(1, 0)]));
    let det = a * b - c * c;
    let tr = a + b;
    if tr <= 0.0 || det < 0.0 {
        if tr < -PSD_REJECT * scale || det < -PSD_REJECT * scale * scale {
            // genuinely indefinite; let the spectral path produce the
            // precise eigenvalue for the error or the clamp decision
            return Ok(None);
        }
        return Ok(None);
    }
    let sdet = det.sqrt();
    let denom = (tr + 2.0 * sdet).sqrt();
    if denom == 0.0 {
        return Ok(Some(RMat::zeros(2, 2)));
    }
    let mut root = RMat::zeros(2, 2);
    root[(0, 0)] = (a + sdet) / denom;
    root[(1, 1)] = (b + sdet) / denom;
    root[(0, 1)] = c / denom;
    root[(1, 0)] = c / denom;
    Ok(Some(root))
}

fn sqrt_from_eigen_real(eig: &SymmetricEigen<f64, nalgebra::Dyn>, scale: f64) -> Result<RMat> {
    let mut vals = eig.eigenvalues.clone();
    for lam in vals.iter_mut() {
        if *lam < -PSD_REJECT * scale {
            return Err(Error::NotPsd { min_eigenvalue: *lam });
        }
        *lam = lam.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (mut col, lam) in scaled.column_iter_mut().zip(vals.iter()) {
        col *= *lam;
    }
    Ok(&scaled * v.transpose())
}

/// Principal square root of a complex Hermitian PSD matrix.
pub fn psd_sqrt_hermitian(k: &CMat) -> Result<CMat> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Dimension {
            what: "psd_sqrt_hermitian",
            expected: n,
            got: k.ncols(),
        });
    }
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            asym = asym.max((k[(i, j)] - k[(j, i)].conj()).norm());
        }
    }
    let scale = k.iter().fold(0.0_f64, |m, x| m.max(x.norm())).max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NotHermitian { max_asymmetry: asym });
    }
    let herm = CMat::from_fn(n, n, |i, j| 0.5 * (k[(i, j)] + k[(j, i)].conj()));
    let eig = SymmetricEigen::new(herm);
    let mut vals = eig.eigenvalues.clone();
    for lam in vals.iter_mut() {
        if *lam < -PSD_REJECT * scale {
            return Err(Error::NotPsd { min_eigenvalue: *lam });
        }
        *lam = lam.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (mut col, lam) in scaled.column_iter_mut().zip(vals.iter()) {
        col *= Complex64::new(*lam, 0.0);
    }
    Ok(&scaled * v.adjoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn cvec(parts: &[(f64, f64)]) -> CVec {
        CVec::from_iterator(parts.len(), parts.iter().map(|&(re, im)| Complex64::new(re, im)))
    }

    #[test]
    fn tensor_rule_1d_nodes() {
        let rule = QuadratureRule::tensor(1, 4).unwrap();
        let xs: Vec<f64> = rule.nodes().iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![0.0, TAU / 4.0, TAU / 2.0, 3.0 * TAU / 4.0]);
        assert!(rule.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn weights_sum_to_one() {
        for rule in [
            QuadratureRule::tensor(2, 8).unwrap(),
            QuadratureRule::lattice(2, 100).unwrap(),
            QuadratureRule::lattice(3, 512).unwrap(),
            QuadratureRule::monte_carlo(3, 1000, 42).unwrap(),
        ] {
            let total: f64 = rule.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
        }
    }

    #[test]
    fn tensor_rule_kills_low_harmonics() {
        let rule = QuadratureRule::tensor(1, 8).unwrap();
        let mut acc = Complex64::new(0.0, 0.0);
        rule.for_each_phase(|w, phase| {
            acc += w * phase[0];
            Ok(())
        })
        .unwrap();
        assert!(acc.norm() < 1e-14);
    }

    #[test]
    fn tensor_rule_exact_on_harmonics_below_grid_size() {
        let m = 8;
        let rule = QuadratureRule::tensor(2, m).unwrap();
        for s0 in -(m as i64 - 1)..(m as i64) {
            for s1 in -(m as i64 - 1)..(m as i64) {
                if s0 == 0 && s1 == 0 {
                    continue;
                }
                let mut acc = Complex64::new(0.0, 0.0);
                for (node, &w) in rule.nodes().iter().zip(rule.weights()) {
                    acc += w * Complex64::from_polar(1.0, s0 as f64 * node[0] + s1 as f64 * node[1]);
                }
                assert!(acc.norm() < 1e-13, "harmonic ({s0},{s1}) not killed: {}", acc.norm());
            }
        }
    }

    #[test]
    fn tensor_guard_rejects_huge_rules() {
        assert!(matches!(
            QuadratureRule::tensor(8, 32),
            Err(Error::QuadratureTooLarge { .. })
        ));
    }

    #[test]
    fn lattice_rule_integrates_smooth_torus_functions() {
        // f(ω) = Π_k (1 + ½ cos ω_k + ⅓ sin 2ω_k) has average 1
        for dim in [2usize, 3, 4] {
            let rule = QuadratureRule::lattice(dim, 4096).unwrap();
            let mut acc = 0.0;
            for (node, &w) in rule.nodes().iter().zip(rule.weights()) {
                let f: f64 = node
                    .iter()
                    .map(|&x| 1.0 + 0.5 * x.cos() + (2.0 * x).sin() / 3.0)
                    .product();
                acc += w * f;
            }
            assert!((acc - 1.0).abs() < 1e-9, "dim {dim}: {acc}");
        }
    }

    #[test]
    fn diagonal_friction_averages_to_itself() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| {
            CVec::from_vec(vec![-1.0 * v[0], -2.0 * v[1]])
        }));
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let a = cvec(&[(0.7, -0.1), (0.4, 0.9)]);
        let avg = average_field(&p, &a, &rule).unwrap();
        assert!((avg[0] - (-1.0) * a[0]).norm() < 1e-14);
        assert!((avg[1] - (-2.0) * a[1]).norm() < 1e-14);
    }

    #[test]
    fn constant_field_averages_to_zero() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| {
            CVec::from_element(v.len(), Complex64::new(0.3, -0.8))
        }));
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let avg = average_field(&p, &cvec(&[(1.0, 0.0), (0.5, 0.5)]), &rule).unwrap();
        assert!(avg.iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn resonant_monomial_is_invariant() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| v.map(|z| z.norm_sqr() * z)));
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let a = cvec(&[(0.9, 0.2), (-0.4, 0.6)]);
        let avg = average_field(&p, &a, &rule).unwrap();
        let expect = a.map(|z| z.norm_sqr() * z);
        for k in 0..2 {
            assert!((avg[k] - expect[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn squared_coordinate_averages_to_zero() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| v.map(|z| z * z)));
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let avg = average_field(&p, &cvec(&[(1.1, -0.3), (0.2, 0.8)]), &rule).unwrap();
        assert!(avg.iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn scalar_dispersion_averages_to_itself() {
        let sigma = 0.7;
        let b = DispersionField::constant(CMat::identity(2, 2) * Complex64::new(sigma, 0.0)).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let d = average_diffusion_state(&b, &cvec(&[(1.0, 0.0), (0.0, 1.0)]), &rule).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect_k = if i == j { sigma * sigma } else { 0.0 };
                let expect_root = if i == j { sigma } else { 0.0 };
                assert!((d.k[(i, j)] - Complex64::new(expect_k, 0.0)).norm() < 1e-12);
                assert!((d.root[(i, j)] - Complex64::new(expect_root, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_dispersion_phase_decoupling() {
        // For constant B the symbolic phase average of Φ B Bᴴ Φᴴ is the
        // diagonal of B Bᴴ; the quadrature must reproduce it.
        let mut m = CMat::zeros(2, 3);
        m[(0, 0)] = Complex64::new(1.0, 0.5);
        m[(0, 1)] = Complex64::new(0.3, 0.0);
        m[(0, 2)] = Complex64::new(0.0, -0.2);
        m[(1, 0)] = Complex64::new(0.0, 1.0);
        m[(1, 1)] = Complex64::new(2.0, 0.0);
        m[(1, 2)] = Complex64::new(0.1, 0.1);
        let row_sq: Vec<f64> = (0..2)
            .map(|k| (0..3).map(|j| m[(k, j)].norm_sqr()).sum())
            .collect();
        let b = DispersionField::constant(m).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let d = average_diffusion_state(&b, &cvec(&[(0.6, 0.1), (-0.4, 1.2)]), &rule).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { row_sq[i] } else { 0.0 };
                assert!(
                    (d.k[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-12,
                    "K[{i}{j}] = {}",
                    d.k[(i, j)]
                );
            }
        }
        // root·rootᴴ = K
        let rec = &d.root * d.root.adjoint();
        for i in 0..2 {
            for j in 0..2 {
                assert!((rec[(i, j)] - d.k[(i, j)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn averaged_root_and_any_other_root_give_equal_second_moments() {
        // Monte Carlo law check: one Euler step driven by ⟨⟨B⟩⟩ vs by the
        // Cholesky factor of the same K_eff must produce matching second
        // moments (weak equivalence of dispersion choices).
        use rand::SeedableRng;
        use rand_distr::StandardNormal;
        let mut m = CMat::zeros(2, 2);
        m[(0, 0)] = Complex64::new(1.0, 0.0);
        m[(0, 1)] = Complex64::new(0.4, 0.3);
        m[(1, 1)] = Complex64::new(1.5, 0.0);
        let b = DispersionField::constant(m).unwrap();
        let rule = QuadratureRule::tensor(2, 8).unwrap();
        let a0 = cvec(&[(0.0, 0.0), (0.0, 0.0)]);
        let d = average_diffusion_state(&b, &a0, &rule).unwrap();
        let chol = nalgebra::linalg::Cholesky::new(d.k.clone()).expect("K_eff PSD");
        let alt = chol.l();

        let n_samples = 30_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(991);
        let mut second = [CMat::zeros(2, 2), CMat::zeros(2, 2)];
        for (which, disp) in [&d.root, &alt].into_iter().enumerate() {
            for _ in 0..n_samples {
                let db = CVec::from_fn(2, |_, _| {
                    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
                });
                let x = disp * db;
                for i in 0..2 {
                    for j in 0..2 {
                        second[which][(i, j)] += x[i] * x[j].conj() / n_samples as f64;
                    }
                }
            }
        }
        // E x xᴴ = 2 K_eff for either root; compare the two estimates
        let tol = 6.0 * d.k[(1, 1)].re / (n_samples as f64).sqrt() * 2.0;
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (second[0][(i, j)] - second[1][(i, j)]).norm() < tol,
                    "moment mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn action_drift_examples() {
        let zero_p = PerturbationField::new(Arc::new(|v: &CVec| CVec::zeros(v.len())));
        let friction = PerturbationField::new(Arc::new(|v: &CVec| v.map(|z| -z)));
        let b0 = DispersionField::constant(CMat::zeros(2, 2)).unwrap();
        let bid = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let v = cvec(&[(1.0, 1.0), (0.5, -0.5)]);

        let f = action_drift(&zero_p, &b0, &v);
        assert!(f.iter().all(|&x| x == 0.0));

        let f = action_drift(&friction, &b0, &v);
        for k in 0..2 {
            assert_relative_eq!(f[k], -v[k].norm_sqr(), max_relative = 1e-14);
        }

        let f = action_drift(&zero_p, &bid, &v);
        for k in 0..2 {
            assert_relative_eq!(f[k], 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn action_dispersion_at_origin_vanishes() {
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let g = action_dispersion(&b, &CVec::zeros(2));
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn action_dispersion_row_norms_match_quadratic_variation() {
        let mut m = CMat::zeros(2, 2);
        m[(0, 0)] = Complex64::new(0.8, 0.1);
        m[(0, 1)] = Complex64::new(0.0, 0.4);
        m[(1, 0)] = Complex64::new(0.2, 0.0);
        m[(1, 1)] = Complex64::new(1.1, -0.3);
        let b = DispersionField::constant(m.clone()).unwrap();
        let v = cvec(&[(0.9, -0.2), (0.3, 1.4)]);
        let g = action_dispersion(&b, &v);
        for k in 0..2 {
            let row_sq: f64 = g.row(k).iter().map(|x| x * x).sum();
            let expect: f64 = (0..2).map(|j| (v[k].conj() * m[(k, j)]).norm_sqr()).sum();
            assert_relative_eq!(row_sq, expect, max_relative = 1e-13);
        }
    }

    #[test]
    fn constant_b_averaged_action_diffusion_is_diagonal() {
        // symbolic phase average: K_kk = 2 I_k Σ_j |B_kj|², K off-diagonal 0
        let mut m = CMat::zeros(2, 2);
        m[(0, 0)] = Complex64::new(1.0, 0.0);
        m[(0, 1)] = Complex64::new(0.3, 0.0);
        m[(1, 1)] = Complex64::new(2.0, 0.0);
        let b = DispersionField::constant(m.clone()).unwrap();
        let p = PerturbationField::new(Arc::new(|v: &CVec| CVec::zeros(v.len())));
        let rule = QuadratureRule::tensor(2, 32).unwrap();
        let actions = RVec::from_vec(vec![0.7, 1.9]);
        let (_, diff) = average_action_coefficients(&p, &b, &actions, &rule).unwrap();
        for k in 0..2 {
            let b_sq: f64 = (0..2).map(|j| m[(k, j)].norm_sqr()).sum();
            let expect_root = b_sq.sqrt() * (2.0 * actions[k]).sqrt();
            assert_relative_eq!(diff.root[(k, k)], expect_root, max_relative = 1e-10);
            assert_relative_eq!(diff.k[(k, k)], 2.0 * actions[k] * b_sq, max_relative = 1e-10);
        }
        assert!(diff.k[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn vanishing_action_degenerates_k() {
        let mut m = CMat::zeros(2, 2);
        m[(0, 0)] = Complex64::new(1.0, 0.2);
        m[(0, 1)] = Complex64::new(0.5, 0.0);
        m[(1, 1)] = Complex64::new(0.8, -0.6);
        let b = DispersionField::constant(m).unwrap();
        let p = PerturbationField::new(Arc::new(|v: &CVec| CVec::zeros(v.len())));
        let rule = QuadratureRule::tensor(2, 16).unwrap();
        let actions = RVec::from_vec(vec![0.0, 1.3]);
        let (_, diff) = average_action_coefficients(&p, &b, &actions, &rule).unwrap();
        let det = diff.k[(0, 0)] * diff.k[(1, 1)] - diff.k[(0, 1)] * diff.k[(1, 0)];
        assert!(det.abs() <= 1e-10);
    }

    #[test]
    fn friction_average_drift_is_resolution_independent() {
        let p = PerturbationField::new(Arc::new(|v: &CVec| v.map(|z| -z)));
        let b = DispersionField::constant(CMat::identity(2, 2)).unwrap();
        let actions = RVec::from_vec(vec![0.4, 1.1]);
        let coarse = QuadratureRule::tensor(2, 2).unwrap();
        let fine = QuadratureRule::tensor(2, 32).unwrap();
        let (f2, _) = average_action_coefficients(&p, &b, &actions, &coarse).unwrap();
        let (f32, _) = average_action_coefficients(&p, &b, &actions, &fine).unwrap();
        for k in 0..2 {
            assert_relative_eq!(f2[k], -2.0 * actions[k] + 1.0, max_relative = 1e-13);
            assert_relative_eq!(f32[k], f2[k], max_relative = 1e-13);
        }
    }

    #[test]
    fn psd_sqrt_diagonal() {
        let k = RMat::from_diagonal(&RVec::from_vec(vec![4.0, 9.0]));
        let root = psd_sqrt(&k).unwrap();
        assert_relative_eq!(root[(0, 0)], 2.0, max_relative = 1e-14);
        assert_relative_eq!(root[(1, 1)], 3.0, max_relative = 1e-14);
        assert!(root[(0, 1)].abs() < 1e-14);
        assert_eq!(psd_sqrt(&RMat::zeros(3, 3)).unwrap(), RMat::zeros(3, 3));
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let k = RMat::from_diagonal(&RVec::from_vec(vec![1.0, -0.5]));
        assert!(matches!(psd_sqrt(&k), Err(Error::NotPsd { .. })));
        // tiny negative eigenvalue inside the clamp window is tolerated
        let k = RMat::from_diagonal(&RVec::from_vec(vec![1.0, -1e-12]));
        let root = psd_sqrt(&k).unwrap();
        assert_eq!(root[(1, 1)], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psd_sqrt_squares_back(entries in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let a = RMat::from_vec(3, 3, entries);
            let k = &a * a.transpose();
            let root = psd_sqrt(&k).unwrap();
            let back = &root * root.transpose();
            let scale = k.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((back[(i, j)] - k[(i, j)]).abs() <= 1e-8 * scale);
                }
            }
        }

        #[test]
        fn hermitian_sqrt_squares_back(entries in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 4)) {
            let a = CMat::from_vec(2, 2, entries.iter().map(|&(re, im)| Complex64::new(re, im)).collect());
            let k = &a * a.adjoint();
            let root = psd_sqrt_hermitian(&k).unwrap();
            let back = &root * root.adjoint();
            let scale = k.iter().fold(1.0f64, |m, x| m.max(x.norm()));
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((back[(i, j)] - k[(i, j)]).norm() <= 1e-8 * scale);
                }
            }
        }

        #[test]
        fn averaging_is_rotation_equivariant(
            theta in proptest::collection::vec(0.0f64..TAU, 2),
            apt in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2),
        ) {
            // P with low-order angular harmonics; tensor M=16 integrates it exactly
            let p = PerturbationField::new(Arc::new(|v: &CVec| {
                CVec::from_vec(vec![
                    v[0] * v[0] * v[1].conj() - 0.5 * v[0],
                    v[1] * v[0].conj() + Complex64::new(0.1, 0.0) * v[1] * v[1].norm_sqr(),
                ])
            }));
            let rule = QuadratureRule::tensor(2, 16).unwrap();
            let a = CVec::from_vec(apt.iter().map(|&(re, im)| Complex64::new(re, im)).collect());
            let theta = RVec::from_vec(theta);
            let lhs = average_field(&p, &crate::state::rotate(&a, &theta), &rule).unwrap();
            let rhs = crate::state::rotate(&average_field(&p, &a, &rule).unwrap(), &theta);
            for k in 0..2 {
                prop_assert!((lhs[k] - rhs[k]).norm() <= 1e-10 * (1.0 + rhs[k].norm()));
            }
        }

        #[test]
        fn averaging_is_a_projection(apt in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2)) {
            let p = PerturbationField::new(Arc::new(|v: &CVec| {
                CVec::from_vec(vec![
                    v[0] * v[1] * v[1].conj() + v[0] * v[0].norm_sqr() + v[1] * v[1],
                    v[0] * v[0].conj() * v[1] - v[1] + v[0],
                ])
            }));
            let rule = QuadratureRule::tensor(2, 16).unwrap();
            let a = CVec::from_vec(apt.iter().map(|&(re, im)| Complex64::new(re, im)).collect());
            let once = average_field(&p, &a, &rule).unwrap();
            // ⟨⟨⟨⟨P⟩⟩⟩⟩: wrap ⟨⟨P⟩⟩ itself as a field and average again
            let inner_rule = QuadratureRule::tensor(2, 16).unwrap();
            let pc = p.clone();
            let averaged_once = PerturbationField::new(Arc::new(move |v: &CVec| {
                average_field(&pc, v, &inner_rule).expect("inner average")
            }));
            let twice = average_field(&averaged_once, &a, &rule).unwrap();
            for k in 0..2 {
                prop_assert!((twice[k] - once[k]).norm() <= 1e-12 * (1.0 + once[k].norm()));
            }
        }
    }
}
