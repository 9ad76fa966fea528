//! Equilibrium solvers for a hierarchical digital-twin synchronization
//! game. A population of sensing devices distributes itself over virtual
//! service providers by replicator dynamics (lower level), while the
//! providers steer synchronization intensities as a differential game
//! (upper level), solved open-loop through the maximum principle as
//! two-point boundary-value problems.
//!
//! Module map:
//! - [`model`] — domain types and instantaneous formulas,
//! - [`ode`] — initial-value integration (RK4 and Dormand–Prince 5(4)),
//! - [`bvp`] — multiple shooting and Lobatto-IIIA collocation solvers,
//! - [`evo`] — lower-level evolutionary game and stability probes,
//! - [`nash`] — simultaneous-play open-loop Nash equilibrium,
//! - [`stackelberg`] — leader/follower hierarchical play,
//! - [`baseline`] — static Stackelberg benchmark,
//! - [`cli`] — scenario files, run/sweep drivers and output emission.

pub mod baseline;
pub mod bvp;
pub mod cli;
pub mod error;
pub mod evo;
pub mod linalg;
pub mod model;
pub mod nash;
pub mod ode;
pub mod quad;
pub mod stackelberg;

pub use error::{Error, Result};
pub use model::{ControlVector, PopulationParams, Role, Scenario, SystemState, VspParams};
