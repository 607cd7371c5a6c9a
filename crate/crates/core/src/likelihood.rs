//! Observation likelihood of a stylus measurement given a posture hypothesis.
//!
//! The residual layout, shared with the IK baselines, is
//! `(position[3], orientation[3], linear velocity[3], angular velocity[3])`
//! and Σ_K is diagonal in that order.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HumanModel, JointVector, PostureState, StylusObservation, NUM_JOINTS};
use crate::rotation::rotation_error;

pub const OBS_DIM: usize = 12;
pub type Residual = SVector<f64, OBS_DIM>;

/// Diagonal observation covariance Σ_K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoise {
    pub sigma_k: [f64; OBS_DIM],
}

impl ObservationNoise {
    /// `0.01 · diag(0.001 ×3, 0.05 ×3, 1 ×3, 10 ×3)`.
    pub fn reference() -> Self {
        Self::from_blocks(0.01 * 0.001, 0.01 * 0.05, 0.01, 0.01 * 10.0)
    }

    /// Per-block variances: position, orientation, linear and angular velocity.
    pub fn from_blocks(pos: f64, ori: f64, lin: f64, ang: f64) -> Self {
        let mut sigma_k = [0.0; OBS_DIM];
        for k in 0..3 {
            sigma_k[k] = pos;
            sigma_k[3 + k] = ori;
            sigma_k[6 + k] = lin;
            sigma_k[9 + k] = ang;
        }
        Self { sigma_k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_k.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "observation covariance must have strictly positive diagonal".into(),
            ));
        }
        Ok(())
    }

    /// `log det(2π Σ_K)`.
    pub fn log_det_2pi(&self) -> f64 {
        self.sigma_k
            .iter()
            .map(|v| (2.0 * std::f64::consts::PI * v).ln())
            .sum()
    }

    pub fn mahalanobis_sq(&self, r: &Residual) -> f64 {
        r.iter().zip(self.sigma_k.iter()).map(|(x, v)| x * x / v).sum()
    }

    pub fn std_dev(&self) -> Residual {
        Residual::from_fn(|i, _| self.sigma_k[i].sqrt())
    }
}

/// Predicted minus observed stylus state for `state`.
pub fn innovation(model: &HumanModel, state: &PostureState, obs: &StylusObservation) -> Result<Residual> {
    let (pose, vel) = model.forward_kinematics(state)?;
    let mut r = Residual::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&(pose.position - obs.pose.position));
    r.fixed_rows_mut::<3>(3)
        .copy_from(&rotation_error(&pose.orientation, &obs.pose.orientation));
    r.fixed_rows_mut::<3>(6)
        .copy_from(&(vel.linear - obs.velocity.linear));
    r.fixed_rows_mut::<3>(9)
        .copy_from(&(vel.angular - obs.velocity.angular));
    Ok(r)
}

/// `log(v_p) − ½ log det(2π Σ_K) − ½ rᵀ Σ_K⁻¹ r`; `v_p = 0` gives −∞.
pub fn log_weight(residual: &Residual, noise: &ObservationNoise, v_p: f64) -> f64 {
    if v_p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    v_p.ln() - 0.5 * noise.log_det_2pi() - 0.5 * noise.mahalanobis_sq(residual)
}

/// Posture validity in `[0, 1]` multiplying the observation likelihood.
///
/// Implement this to plug in a learned posture-dependent joint-limit model.
pub trait ValidityFn: Send + Sync {
    fn validity(&self, q: &JointVector) -> f64;
}

/// Every posture is valid.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysValid;

impl ValidityFn for AlwaysValid {
    fn validity(&self, _q: &JointVector) -> f64 {
        1.0
    }
}

/// Smooth surrogate of the fixed joint-limit box.
///
/// Per joint, the factor is 1 more than `margin` inside the limits, 0 more
/// than `margin` outside, and follows a smoothstep across the band, passing
/// through 0.5 on the limit itself. The posture validity is the product over
/// joints.
#[derive(Debug, Clone)]
pub struct BoxValidity {
    lo: JointVector,
    hi: JointVector,
    margin: f64,
}

impl BoxValidity {
    pub fn new(model: &HumanModel, margin: f64) -> Self {
        Self {
            lo: model.layout.limits_lo,
            hi: model.layout.limits_hi,
            margin: margin.max(0.0),
        }
    }

    fn ramp(&self, dist_inside: f64) -> f64 {
        if self.margin == 0.0 {
            return match dist_inside.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
        let u = ((dist_inside + self.margin) / (2.0 * self.margin)).clamp(0.0, 1.0);
        u * u * (3.0 - 2.0 * u)
    }
}

impl ValidityFn for BoxValidity {
    fn validity(&self, q: &JointVector) -> f64 {
        (0..NUM_JOINTS)
            .map(|i| self.ramp((q[i] - self.lo[i]).min(self.hi[i] - q[i])))
            .product()
    }
}

/// Convenience wrapper for [`BoxValidity`].
pub fn box_validity(model: &HumanModel, q: &JointVector, margin: f64) -> f64 {
    BoxValidity::new(model, margin).validity(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskSpacePose;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> HumanModel {
        HumanModel::default_seated()
    }

    fn random_state(m: &HumanModel, rng: &mut impl Rng) -> PostureState {
        PostureState {
            q: JointVector::from_fn(|i, _| rng.random_range(m.limits_lo()[i]..m.limits_hi()[i])),
            qdot: JointVector::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn self_observation_has_zero_residual() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = random_state(&m, &mut rng);
            let obs = StylusObservation::of_state(&m, &s, 0.0).unwrap();
            assert!(innovation(&m, &s, &obs).unwrap().amax() < 1e-12);
        }
    }

    #[test]
    fn position_offset_shows_only_in_position_block() {
        let m = model();
        let s = PostureState::at_rest(m.neutral_posture);
        let mut obs = StylusObservation::of_state(&m, &s, 0.0).unwrap();
        obs.pose.position.x -= 0.01;
        let r = innovation(&m, &s, &obs).unwrap();
        assert!((r[0] - 0.01).abs() < 1e-15);
        assert!(r.rows(1, 11).norm() < 1e-15);
    }

    #[test]
    fn world_z_rotation_gives_norm_point_one() {
        let m = model();
        let s = PostureState::at_rest(m.neutral_posture);
        let mut obs = StylusObservation::of_state(&m, &s, 0.0).unwrap();
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.1);
        obs.pose = TaskSpacePose::new(obs.pose.position, rz * obs.pose.orientation);
        let r = innovation(&m, &s, &obs).unwrap();
        assert!((r.fixed_rows::<3>(3).norm() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn log_weight_at_mode() {
        let n = ObservationNoise::reference();
        let lw = log_weight(&Residual::zeros(), &n, 1.0);
        assert!((lw + 0.5 * n.log_det_2pi()).abs() < 1e-12);
    }

    #[test]
    fn zero_validity_kills_particle() {
        let n = ObservationNoise::reference();
        assert_eq!(log_weight(&Residual::zeros(), &n, 0.0), f64::NEG_INFINITY);
        assert_eq!(log_weight(&Residual::from_element(3.0), &n, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn reference_exponent_for_unit_position_residual() {
        let n = ObservationNoise::reference();
        let mut r = Residual::zeros();
        r[0] = 1.0;
        let exponent = log_weight(&r, &n, 1.0) + 0.5 * n.log_det_2pi();
        let expected = -0.5 / (0.01 * 0.001);
        assert!((exponent - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn non_positive_covariance_is_config_error() {
        let mut n = ObservationNoise::reference();
        n.sigma_k[4] = 0.0;
        assert!(matches!(n.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn box_validity_values() {
        let m = model();
        let margin = 0.05;
        assert_eq!(box_validity(&m, &m.neutral_posture, margin), 1.0);
        let mut q = m.neutral_posture;
        q[4] = m.limits_hi()[4] + margin + 1e-9;
        assert_eq!(box_validity(&m, &q, margin), 0.0);
        // smoothstep(1/2) = 3/4 − 2/8 = 1/2
        q[4] = m.limits_hi()[4];
        assert!((box_validity(&m, &q, margin) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn box_validity_tends_to_indicator() {
        let m = model();
        let mut q = m.neutral_posture;
        q[2] = m.limits_hi()[2] - 1e-4;
        assert_eq!(box_validity(&m, &q, 0.0), 1.0);
        assert!(box_validity(&m, &q, 1e-6) == 1.0);
        q[2] = m.limits_hi()[2] + 1e-4;
        assert_eq!(box_validity(&m, &q, 0.0), 0.0);
        assert_eq!(box_validity(&m, &q, 1e-6), 0.0);
    }

    #[test]
    fn box_validity_is_continuous_across_band() {
        let m = model();
        let margin = 0.05;
        let hi = m.limits_hi()[0];
        let mut prev = None;
        let mut q = m.neutral_posture;
        for k in 0..=2000 {
            q[0] = hi - 0.1 + 0.2 * k as f64 / 2000.0;
            let v = box_validity(&m, &q, margin);
            assert!((0.0..=1.0).contains(&v));
            if let Some(p) = prev {
                let d: f64 = v - p;
                assert!(d.abs() < 0.02);
                assert!(d <= 0.0);
            }
            prev = Some(v);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn log_weight_non_increasing_along_ray(dir in proptest::collection::vec(-1.0f64..1.0, OBS_DIM), a in 0.0f64..2.0, b in 0.0f64..2.0) {
                let n = ObservationNoise::reference();
                let d = Residual::from_column_slice(&dir);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(log_weight(&(d * hi), &n, 1.0) <= log_weight(&(d * lo), &n, 1.0));
            }

            #[test]
            fn covariance_scaling_preserves_argmax(rs in proptest::collection::vec(-0.1f64..0.1, 5 * OBS_DIM), scale in 0.1f64..10.0) {
                let n = ObservationNoise::reference();
                let scaled = ObservationNoise { sigma_k: n.sigma_k.map(|v| v * scale) };
                let residuals: Vec<Residual> = rs.chunks(OBS_DIM).map(Residual::from_column_slice).collect();
                let argmax = |noise: &ObservationNoise| {
                    residuals.iter().enumerate()
                        .map(|(i, r)| (i, log_weight(r, noise, 1.0)))
                        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc }).0
                };
                prop_assert_eq!(argmax(&n), argmax(&scaled));
            }
        }
    }
}
