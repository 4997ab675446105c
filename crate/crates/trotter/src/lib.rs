//! Terrain-aware quadruped locomotion control and a desk-scale closed-loop
//! simulator.
//!
//! The crate covers the full stance-to-force pipeline:
//!
//! * [`terrain`]: height maps, cropping, plane fitting, terrain files
//! * [`gait`]: periodic contact schedules (trot by default)
//! * [`foothold`]: foothold prediction and terrain-aware adjustment
//! * [`reference`]: body reference trajectories anchored at stance changes
//! * [`model`]: linear time-varying centroidal dynamics, discretization,
//!   horizon condensation
//! * [`qpsolver`]: dense convex QP solver (dual active set)
//! * [`mpc`]: ground-reaction-force MPC over the condensed horizon
//! * [`compensation`]: leg inertia cross-coupling wrench and force
//!   distribution
//! * [`sim`]: closed-loop rigid-body simulation, logging, scenarios
//! * [`cli`]: scenario files and the `trotter` command-line entry points
//!
//! Start with the runnable examples (`cargo run --example flat_trot`); each
//! major capability has one. The `trotter` binary wraps scenario runs for
//! scripting (`trotter run scenarios/flat_trot.toml`).

pub mod cli;
pub mod compensation;
pub mod foothold;
pub mod gait;
pub mod model;
pub mod mpc;
pub mod qpsolver;
pub mod reference;
pub mod sim;
pub mod terrain;
