//! Spectral simulator for a compressible, viscous, resistive
//! magnetofluid sealed in the rectangular cavity of a freely moving
//! rigid body, written in the body frame.
//!
//! The crate is organized bottom-up:
//!
//! * [`trig`] / [`cavity_basis`]: tensor sine/cosine bases, exact
//!   Gram-matrix integration, collocation transforms;
//! * [`frame_kinematics`]: the rotation bookkeeping that maps the body
//!   frame back to the lab frame;
//! * [`system_state`]: parameter and state containers plus the global
//!   invariants (mass, momenta);
//! * [`field_operators`]: modal differential operators and the
//!   nonlinear force terms;
//! * [`rigid_coupling`]: the rigid-body side of the coupling;
//! * [`subsolvers`]: the split implicit/explicit time step;
//! * [`diagnostics`]: energy, Sobolev, relative-energy and weak-form
//!   residual reports;
//! * [`run_driver`]: configuration, output and study orchestration.

pub mod cavity_basis;
pub mod error;
pub mod field_operators;
pub mod frame_kinematics;
pub mod linalg;
pub mod rigid_coupling;
pub mod diagnostics;
pub mod run_driver;
pub mod subsolvers;
pub mod system_state;
pub mod trig;

pub use error::{CavError, Result};
