//! Data-driven compositional synthesis of control barrier certificates.
//!
//! The pipeline turns a single noisy input-state trajectory per subsystem into
//! a quadratic control storage certificate `S_i(x) = xᵀP_i x` together with a
//! fully decentralized polynomial controller, then composes the per-subsystem
//! certificates into a network-level barrier certificate via a dissipativity
//! LMI over the interconnection pattern. No identified model is required: the
//! dissipation inequality is enforced directly on the data matrices through a
//! matrix sum-of-squares program.
//!
//! Modules mirror the stages of the pipeline:
//!
//! * [`polyalg`] — monomials, polynomials, dictionaries and the Θ-factorization
//!   `R(x) = Θ(x)·x`.
//! * [`models`] — benchmark subsystem dynamics, regions and topologies.
//! * [`datagen`] — RK4 simulation and noisy trajectory collection.
//! * [`soscomp`] — scalar/matrix SOS compilation into semidefinite programs.
//! * [`sdp`] — an interior-point SDP solver and a structured Lanczos
//!   eigenvalue routine.
//! * [`certsynth`] — the per-subsystem certificate synthesis pipeline.
//! * [`composer`] — supply-rate composition and the network-level certificate.
//! * [`verify`] — independent grid/simulation verification and the published
//!   reference certificates.
//! * [`cli`] — command-line orchestration.

pub mod certsynth;
pub mod cli;
pub mod composer;
pub mod datagen;
pub mod models;
pub mod polyalg;
pub mod sdp;
pub mod soscomp;
pub mod verify;
