//! Forced, constrained mechanical systems under a midpoint variational
//! integrator, with exact first- and second-order derivatives of the
//! discrete one-step map and controllers built on top of them.
//!
//! The crate is organized around a pipeline:
//!
//! * [`graph`] — expression DAGs with forward-mode derivatives to third
//!   order, plus a text form for untrusted input.
//! * [`model`] — continuous system descriptions (Lagrangian, forcing,
//!   constraints) and their fixed-step discretization.
//! * [`integrator`] — the implicit one-step map and trajectory rollout.
//! * [`linearizer`] — exact Jacobians and Hessians of the one-step map,
//!   singularity diagnostics, and a finite-difference cross-check.
//! * [`control`] — time-varying LQR and trajectory optimization driven
//!   by the exact linearizations.
//! * [`systems`] — built-in system templates.
//! * [`scenario`] — the text scenario format consumed by the CLI.

pub mod control;
pub mod graph;
pub mod integrator;
pub mod linearizer;
pub mod model;
pub mod scenario;
pub mod systems;

/// All matrix-valued results are plain `nalgebra` types; the crate is
/// re-exported so callers can name them without pinning a version.
pub use nalgebra;

pub use control::{
    cost_and_gradient, linearize_trajectory, optimize_trajectory, rollout_closed_loop, solve_lqr,
    trajectory_cost, IterationRecord, LqrProblem, LqrSolution, OptMethod, OptimizationLog, Weights,
};
pub use graph::{DerivOrder, ExprGraph, GraphBuilder};
pub use integrator::{simulate, step, DiscreteState, NewtonOpts, StepResult, Trajectory};
pub use linearizer::{
    check_singularity, fd_oracle, linearize, linearize2, linearize2_constrained,
    linearize_constrained, ConstraintSensitivities, FirstLinearization, SecondBlocks,
    SecondLinearization, SingularityReport,
};
pub use model::{discretize, slots, Discretization, MechSystem, SlotDerivatives};
pub use scenario::{
    parse_scenario, InputSpec, LqrTask, OptimizeTask, ParsedScenario, Scenario, ScenarioError,
    SystemSummary, Task,
};
pub use systems::{
    cartesian_pendulum, constrained_chain, pendulum, spherical_pendulum, ChainParams, ParamSpec,
    SystemTemplate,
};
