//! Planar contact-implicit trajectory refinement and inertial identification.
//!
//! The crate refines noisy kinematic and torque measurements of a planar
//! articulated robot into dynamically consistent trajectories, jointly
//! recovering contact impulses and physically consistent inertial
//! parameters. It provides:
//!
//! * [`inertia`]: inertial-parameter representations (standard, pseudo-inertia,
//!   Log-Cholesky) and the smooth maps among them,
//! * [`model`]: the planar robot description and its JSON schema,
//! * [`dynamics`]: mass matrix, bias, contact kinematics, regressor, and their
//!   analytic derivatives,
//! * [`contact`]: exact LCP, Anitescu SOCP, and log-barrier smoothed contact
//!   time-steppers with impulse recovery and step derivatives,
//! * [`estimator`]: full-information estimation over a trajectory window via
//!   DDP / FDDP, with optional joint inertial identification and a
//!   fixed-contact-sequence baseline,
//! * [`datagen`]: synthetic ground-truth generation, measurement corruption,
//!   and evaluation metrics.

pub mod contact;
pub mod datagen;
pub mod dynamics;
pub mod estimator;
pub mod inertia;
pub mod model;
