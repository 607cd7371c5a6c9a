//! Constant-velocity motion model with Gaussian joint accelerations.
//!
//! `q̇' ~ N(q̇, Σ_v)` followed by the Euler step `q' = q + q̇' dt`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HumanModel, JointVector, PostureState, NUM_JOINTS};

/// Diagonal velocity-noise covariance for one step of length `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionNoise {
    /// Diagonal of Σ_v in (rad/s)².
    pub sigma_v: [f64; NUM_JOINTS],
    /// Step length in seconds the covariance refers to.
    pub dt: f64,
}

impl MotionNoise {
    /// `0.01 · diag(0.01, 0.01, 0.01, 0.05, 0.05, 0.05)` mapped onto ten
    /// joints: the three torso joints take 0.01, the seven arm and wrist
    /// joints take 0.05. Nominal step is 50 Hz.
    pub fn reference() -> Self {
        let mut sigma_v = [0.01 * 0.05; NUM_JOINTS];
        for v in sigma_v.iter_mut().take(3) {
            *v = 0.01 * 0.01;
        }
        Self { sigma_v, dt: 0.02 }
    }

    pub fn zero(dt: f64) -> Self {
        Self {
            sigma_v: [0.0; NUM_JOINTS],
            dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("motion noise dt must be > 0, got {}", self.dt)));
        }
        if self.sigma_v.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("motion noise diagonal must be >= 0".into()));
        }
        Ok(())
    }

    /// Covariance for a different step length; Σ_v grows linearly with dt.
    pub fn rescaled(&self, dt: f64) -> Self {
        let f = dt / self.dt;
        Self {
            sigma_v: self.sigma_v.map(|v| v * f),
            dt,
        }
    }

    pub fn std_dev(&self) -> JointVector {
        JointVector::from_fn(|i, _| self.sigma_v[i].sqrt())
    }
}

/// One stochastic step of the motion model, without joint limits.
pub fn propagate<R: Rng + ?Sized>(state: &PostureState, noise: &MotionNoise, rng: &mut R) -> PostureState {
    let mut qdot = state.qdot;
    for i in 0..NUM_JOINTS {
        let s = noise.sigma_v[i];
        if s > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            qdot[i] += s.sqrt() * z;
        }
    }
    PostureState {
        q: state.q + qdot * noise.dt,
        qdot,
    }
}

/// Projects a propagated state onto the joint limits. A joint that had to be
/// clamped loses its velocity.
pub fn enforce_limits(model: &HumanModel, state: &mut PostureState) {
    for i in 0..NUM_JOINTS {
        let lo = model.layout.limits_lo[i];
        let hi = model.layout.limits_hi[i];
        if state.q[i] < lo {
            state.q[i] = lo;
            state.qdot[i] = 0.0;
        } else if state.q[i] > hi {
            state.q[i] = hi;
            state.qdot[i] = 0.0;
        }
    }
}

/// [`propagate`] followed by [`enforce_limits`].
pub fn propagate_within_limits<R: Rng + ?Sized>(
    model: &HumanModel,
    state: &PostureState,
    noise: &MotionNoise,
    rng: &mut R,
) -> PostureState {
    let mut next = propagate(state, noise, rng);
    enforce_limits(model, &mut next);
    next
}
