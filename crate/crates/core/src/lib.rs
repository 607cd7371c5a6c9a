//! Posture estimation of a seated teleoperator from leader-robot stylus
//! data, with RULA risk scoring.
//!
//! The pipeline: a [`model::HumanModel`] (segment lengths from [`calib`]),
//! a particle [`filter`] over joint angles and velocities driven by stylus
//! observations, least-squares [`ik`] baselines, and [`rula`] scoring of the
//! resulting posture distributions. [`synth`] generates tasks with known
//! ground truth.

pub mod calib;
pub mod compare;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod ik;
pub mod io;
pub mod likelihood;
pub mod lsq;
pub mod model;
pub mod rotation;
pub mod rula;
pub mod synth;

pub use error::{Error, Result};
pub use filter::{FilterConfig, ParticleFilter, ParticleSet, PostureEstimate};
pub use likelihood::ObservationNoise;
pub use model::{HumanModel, JointVector, PostureState, SegmentLengths, StylusObservation, TaskSpacePose};
