//! Construction and validation of approximate quasi-periodic solutions of the
//! nonlinear Schrödinger equation i∂ₜu = −Δu + δ|u|^{2p}u on the d-torus.
//!
//! The solution ansatz is a space-time Fourier series
//! u(t,x) = Σ û(n,j) e^{i n·(θ+ωt)} e^{i j·x} over the lattice Z^{B+d},
//! with B basic frequencies ω pinned to prescribed amplitudes a_j on the
//! resonant set S = {(∓e_j, j)}. A finitely iterated Newton scheme solves the
//! off-resonant (P) equations while the frequencies solve the resonant (Q)
//! equations, after excising amplitude vectors on which the small-divisor
//! determinants degenerate. The crate also provides the linearized-flow basis
//! ∂u/∂a, ∂u/∂θ, initial-data matching by an open-mapping Newton solve, and an
//! independent split-step integrator used to validate long-time agreement.

pub mod cauchy;
pub mod field;
pub mod lattice;
pub mod linflow;
pub mod linop;
pub mod newton;
pub mod nonlinear;
pub mod resonance;

pub use field::{FieldError, FourierField, ModeData, ProblemSpec};
pub use newton::ApproximateSolution;
pub use lattice::{
    LatticeError, LatticeSite, ModeSet, ResonantSet, SiteIndex, TruncationSpec,
};

pub use nonlinear::FrequencyVector;
pub use resonance::ResonanceReport;


/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
