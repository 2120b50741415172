//! Control laboratory for a planar parallel-legged bipedal robot.
//!
//! The robot is a floating-base planar biped whose legs are five-bar linkages
//! actuated at the fore and rear hips. The crate provides:
//!
//! - [`model`]: robot definition, five-bar kinematics, task and loop Jacobians;
//! - [`dynamics`]: constrained rigid-body dynamics with the loop-closure
//!   null-space projection and actuated inverse dynamics;
//! - [`mft`]: motion/force transmissibility indices (LTI, RACI) of a leg;
//! - [`wsmap`]: offline workspace gridding, preferable-space extraction and
//!   conservative polyhedral approximation in the actuated joint space;
//! - [`qp`]: dense strictly-convex QP solver with warm starting;
//! - [`wbc`]: the transmissibility-constrained whole-body controller and the
//!   singularity-avoidance baseline;
//! - [`planner`]: gait state machine, foot placement and swing references;
//! - [`sim`]: deterministic physics simulation with penalty ground contact;
//! - [`harness`]: experiment orchestration (walking runs, push-recovery
//!   sweeps, reports).

pub mod dynamics;
pub mod harness;
pub mod mft;
pub mod model;
pub mod planner;
pub mod qp;
pub mod sim;
pub mod wbc;
pub mod wsmap;

pub use model::{GeneralizedState, RobotModel};
