//! Safe model predictive control for torque-limited manipulators.
//!
//! The crate implements two safety mechanisms around a multiple-shooting
//! SQP trajectory optimizer:
//!
//! * **safe task abortion** — a terminal-constraint MPC that, on loss of
//!   feasibility, walks the last feasible plan while a second computational
//!   unit solves a stop-at-equilibrium problem, then hands over to the
//!   precomputed stopping trajectory;
//! * **receding constraint** — a hard safe-set membership constraint whose
//!   stage index slides backward every loop and jumps forward whenever a
//!   later predicted state re-enters the safe set.
//!
//! Safe sets are velocity-norm bounds `phi(q)` with margin `alpha`
//! (membership test `(1 - alpha) * phi(q) - ||dq|| >= 0`), backed either by
//! an interpolated grid or an MLP loaded from a weights file. A brute-force
//! viability-kernel grid over 1-DoF models serves as an exact oracle for
//! validating the approximate sets and the controllers built on them.
//!
//! The [`bench`] module runs seeded episode batches over the controller
//! schemes and aggregates completion/abortion/failure counts, tracking-cost
//! increments, and solver timing statistics.

pub mod bench;
pub mod controllers;
pub mod dynamics;
pub(crate) mod exec;
pub mod safeset;
pub mod trajopt;

pub use dynamics::{ControlVec, ManipulatorModel, ModelKind, StateVec};
pub use safeset::{KernelGrid, SafeSetModel};
pub use trajopt::{OcpSpec, SolveMode, SolveOutput, SqpSolver, Trajectory};
