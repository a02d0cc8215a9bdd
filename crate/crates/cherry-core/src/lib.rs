//! Numerical laboratory for Cherry-type flows on the 2-torus.
//!
//! The crate builds parameterized torus vector fields with a saddle/source
//! plug, integrates their orbits together with the tangent (variational)
//! flow, extracts the first-return circle map of the transverse section
//! `{y = 0}`, and measures the ergodic quantities that distinguish the
//! negative- and positive-divergence regimes: Birkhoff averages, Lyapunov
//! exponents of the (scaled) linear Poincaré cocycle, physical-measure
//! basin surveys, and the periodic-orbit structure under perturbation.
//!
//! The crate is `no_std` + `alloc`; everything that touches files, JSON,
//! CSV or threads lives in the companion `cherry-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod circle;
pub mod ergodic;
pub mod field;
pub mod flow;
pub(crate) mod math;
pub mod perturb;
pub mod section;
pub mod torus;

pub use field::{FieldSpec, RejectionReport, Singularity, SingularityClass, ValidatedSpec};
pub use flow::{StepControl, Trajectory};
pub use section::CherryMap;
pub use torus::{PlanarVector, TorusPoint};
