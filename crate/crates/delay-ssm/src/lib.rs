//! Spectral submanifold (SSM) reduction for nonlinear delay differential equations.
//!
//! The pipeline: a DDE with one discrete delay and polynomial nonlinearities
//! ([`delay_model::DelaySystem`]) is approximated by a delay-free ODE chain
//! ([`chain::ChainSystem`]), whose slowest spectral subspace carries a
//! two-dimensional invariant manifold. [`ssm::compute_ssm`] builds that manifold
//! as a polynomial expansion in normal-form style, yielding a polar reduced model
//! ρ̇ = a(ρ), θ̇ = b(ρ) plus a modal forcing term. [`rom_analysis`] turns the
//! reduced model into predictions — backbone curves, limit cycles, forced response
//! curves with fold/Hopf detection, and quasi-periodic tori — while [`simulate`]
//! provides reference integrators (method-of-steps for the DDE, an L-stable
//! implicit scheme for the stiff chain) to validate every prediction end to end.

pub mod chain;
pub mod delay_model;
pub(crate) mod linalg;
pub mod rom_analysis;
pub mod simulate;
pub mod spectral;
pub mod ssm;

pub use num_complex::Complex64;
