//! Simulation laboratory for small stochastic perturbations of integrable
//! Hamiltonian systems.
//!
//! The unperturbed dynamics is a Birkhoff-integrable system in complex
//! coordinates, `d/dt v_k = i ∇_k H(I) v_k` with actions `I_k = |v_k|²/2`.
//! Adding an ε-small drift `P` and noise `B β̇ᶜ` and passing to slow time
//! `τ = εt` gives the stiff system
//!
//! ```text
//! v̇(τ) = i ε⁻¹ diag{∇_k H(I)} v + P(v) + B(v) β̇ᶜ(τ).
//! ```
//!
//! This crate integrates that system directly, constructs the averaged
//! action equation and the effective equation by explicit torus averaging,
//! and provides the Monte Carlo machinery (ensembles, empirical action
//! distributions, Wasserstein distances, exit times, stationary estimates)
//! needed to compare their laws as ε → 0.
//!
//! Module map:
//! - [`state`]: complex states, action-angle coordinates, rotations.
//! - [`fields`]: model ingredients `H`, `P`, `B`, `h` and Wirtinger calculus.
//! - [`checks`]: non-resonance, noise rank and coercivity checkers.
//! - [`averaging`]: torus quadrature and all `⟨⟨·⟩⟩` operators.
//! - [`sde`]: Wiener sampling, Euler-Maruyama / splitting / truncated steppers.
//! - [`equations`]: builders for the full, averaged and effective systems.
//! - [`ensemble`]: parallel Monte Carlo and distribution statistics.
//! - [`models`]: built-in models (linear, damped/driven, oscillator chain).

pub mod averaging;
pub mod checks;
pub mod ensemble;
pub mod equations;
pub mod fields;
pub mod models;
pub mod sde;
pub mod state;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

pub use num_complex::Complex64;

/// Complex state vector `v ∈ ℂⁿ`.
pub type CVec = nalgebra::DVector<Complex64>;
/// Complex matrix (dispersion fields, averaged diffusions).
pub type CMat = nalgebra::DMatrix<Complex64>;
/// Real vector (actions, angles, frequencies).
pub type RVec = nalgebra::DVector<f64>;
/// Real matrix (action dispersions, averaged action diffusions).
pub type RMat = nalgebra::DMatrix<f64>;
