//! Constraint-free forward statics of continuum parallel robots.
//!
//! Rods are discretized into linear-strain elements whose nodal poses live
//! on SE(3). Rods attach to motor-driven base joints and to a rigid
//! end-effector platform through kinematic embeddings, so the equilibrium
//! problem has no connection constraints. It is solved with a Riemannian
//! Newton iteration on the product manifold of motor angles, poses and
//! strain slopes.
//!
//! Module map:
//! - [`lie`]: SE(3) kernel.
//! - [`element`]: linear strain element (Magnus map, Jacobians, energy).
//! - [`assembly`]: robot topology, embeddings, global residual and tangent.
//! - [`solver`]: Newton iteration with retraction and safeguards.
//! - [`scenario`]: description files, actuation protocol, sweeps, export, metrics.

pub mod assembly;
pub mod element;
pub mod lie;
pub mod scenario;
pub mod solver;

pub use assembly::{
    GeneralizedState, IndexMap, LoadSet, MotorAxis, NodeRef, RobotModel, RodSpec, TangentKind,
};
pub use element::{ElementKinematics, ElementMaterial, ElementState};
pub use lie::{Pose, Twist, Wrench};
pub use solver::{NewtonMethod, SolveReport, SolverConfig, ThetaMode};
