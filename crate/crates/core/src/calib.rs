//! Segment-length calibration by circle point analysis.
//!
//! Each routine starts at the neutral posture and moves a single joint; the
//! stylus then traces a circle around that joint's axis. With the seated
//! chain at neutral (upper arm vertical, elbow at 90°, forearm and hand
//! pointing forward) the radii relate to the lengths as follows:
//!
//! | routine              | joint                      | radius                         |
//! |----------------------|----------------------------|--------------------------------|
//! | `wrist_flexion`      | wrist flexion              | `hand`                         |
//! | `forearm_rotation`   | shoulder internal rotation | `forearm + hand`               |
//! | `shoulder_abduction` | shoulder abduction         | `upper_arm`                    |
//! | `hip_rotation`       | torso axial rotation       | `√(shoulder² + (forearm+hand)²)` |
//! | `hip_lateral_bend`   | torso lateral bend         | `√(shoulder² + (torso−upper_arm)²)` |
//!
//! Lengths are solved in that order, so distal estimates never use proximal
//! ones. The last formula assumes the stylus is below the shoulder.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{joint, HumanModel, SegmentLengths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationRoutine {
    WristFlexion,
    ForearmRotation,
    ShoulderAbduction,
    HipRotation,
    HipLateralBend,
}

impl CalibrationRoutine {
    pub const ALL: [CalibrationRoutine; 5] = [
        CalibrationRoutine::WristFlexion,
        CalibrationRoutine::ForearmRotation,
        CalibrationRoutine::ShoulderAbduction,
        CalibrationRoutine::HipRotation,
        CalibrationRoutine::HipLateralBend,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::WristFlexion => "wrist_flexion",
            Self::ForearmRotation => "forearm_rotation",
            Self::ShoulderAbduction => "shoulder_abduction",
            Self::HipRotation => "hip_rotation",
            Self::HipLateralBend => "hip_lateral_bend",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }

    /// Index of the joint the routine moves.
    pub fn joint(&self) -> usize {
        match self {
            Self::WristFlexion => joint::WRIST_FLEXION,
            Self::ForearmRotation => joint::SHOULDER_INTERNAL_ROTATION,
            Self::ShoulderAbduction => joint::SHOULDER_ABDUCTION,
            Self::HipRotation => joint::TORSO_AXIAL_ROTATION,
            Self::HipLateralBend => joint::TORSO_LATERAL_BEND,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecording {
    pub routine: CalibrationRoutine,
    /// `(timestamp, stylus position)` samples.
    pub samples: Vec<(f64, Vector3<f64>)>,
}

impl CalibrationRecording {
    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.samples.iter().map(|(_, p)| *p).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleFit {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub plane_normal: Vector3<f64>,
    pub rms_residual: f64,
    /// Angle covered by the samples around the center.
    pub arc_span: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub min_samples: usize,
    /// Arcs shorter than this (radians) are rejected.
    pub min_arc: f64,
    /// Arcs shorter than this (radians) get a warning.
    pub warn_arc: f64,
    /// Largest acceptable rms fit residual in meters.
    pub max_rms: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            min_samples: 10,
            min_arc: 20f64.to_radians(),
            warn_arc: 45f64.to_radians(),
            max_rms: 0.01,
        }
    }
}

/// Fits a circle in 3D: total-least-squares plane, algebraic circle in the
/// plane, then geometric least squares refinement.
pub fn fit_circle_3d(points: &[Vector3<f64>]) -> Result<CircleFit> {
    if points.len() < 4 {
        return Err(Error::InvalidInput(format!("circle fit needs >= 4 points, got {}", points.len())));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidInput("non-finite point in circle fit".into()));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l0 > 0.0) || l1 <= 1e-12 * l0 {
        return Err(Error::RankDeficient("points are collinear or coincident".into()));
    }
    let u = eig.eigenvectors.column(order[0]).into_owned();
    let v = eig.eigenvectors.column(order[1]).into_owned();
    let normal = u.cross(&v).normalize();

    let plane: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            Vector2::new(d.dot(&u), d.dot(&v))
        })
        .collect();

    // algebraic fit: x² + y² = 2ax + 2by + c
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in &plane {
        let row = Vector3::new(2.0 * p.x, 2.0 * p.y, 1.0);
        ata += row * row.transpose();
        atb += row * p.norm_squared();
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::RankDeficient("degenerate circle configuration".into()))?;
    let mut c2 = Vector2::new(sol.x, sol.y);
    let mut r = (sol.z + c2.norm_squared()).max(0.0).sqrt();
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::RankDeficient("degenerate circle configuration".into()));
    }

    // geometric refinement over (center, radius)
    for _ in 0..50 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for p in &plane {
            let d = p - c2;
            let dist = d.norm();
            if dist < 1e-15 {
                continue;
            }
            let res = dist - r;
            let jrow = Vector3::new(-d.x / dist, -d.y / dist, -1.0);
            jtj += jrow * jrow.transpose();
            jtr += jrow * res;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        c2 += Vector2::new(step.x, step.y);
        r += step.z;
        if step.norm() <= 1e-14 * (1.0 + r) {
            break;
        }
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::RankDeficient("circle fit diverged".into()));
    }
    let center = centroid + u * c2.x + v * c2.y;

    let mut sq = 0.0;
    let mut angles = Vec::with_capacity(points.len());
    for p in points {
        let d = p - center;
        let h = d.dot(&normal);
        let inplane = d - normal * h;
        let rho = inplane.norm();
        sq += h * h + (rho - r).powi(2);
        angles.push(inplane.dot(&v).atan2(inplane.dot(&u)));
    }
    Ok(CircleFit {
        center,
        radius: r,
        plane_normal: normal,
        rms_residual: (sq / n).sqrt(),
        arc_span: arc_span(&mut angles),
        warning: None,
    })
}

/// Angle covered by a set of directions: 2π minus the widest gap.
fn arc_span(angles: &mut [f64]) -> f64 {
    if angles.len() < 2 {
        return 0.0;
    }
    angles.sort_by(f64::total_cmp);
    let mut gap: f64 = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
    for w in angles.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    std::f64::consts::TAU - gap
}

/// Fits one routine's recording and applies the quality checks.
pub fn fit_recording(rec: &CalibrationRecording, opts: &CalibrationOptions) -> Result<CircleFit> {
    if rec.samples.len() < opts.min_samples {
        return Err(Error::InvalidInput(format!(
            "{}: {} samples, need at least {}",
            rec.routine.name(),
            rec.samples.len(),
            opts.min_samples
        )));
    }
    let mut fit = fit_circle_3d(&rec.points())?;
    if fit.arc_span < opts.min_arc {
        return Err(Error::InvalidInput(format!(
            "{}: arc spans {:.1} deg, need {:.1}",
            rec.routine.name(),
            fit.arc_span.to_degrees(),
            opts.min_arc.to_degrees()
        )));
    }
    if fit.arc_span < opts.warn_arc {
        let msg = format!(
            "{}: short arc ({:.1} deg), radius may be ill-conditioned",
            rec.routine.name(),
            fit.arc_span.to_degrees()
        );
        log::warn!("{msg}");
        fit.warning = Some(msg);
    }
    if fit.rms_residual > opts.max_rms {
        return Err(Error::CalibrationQuality {
            routine: rec.routine.name().into(),
            rms: fit.rms_residual,
            threshold: opts.max_rms,
        });
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lengths: SegmentLengths,
    pub fits: Vec<(CalibrationRoutine, CircleFit)>,
}

/// Segment lengths from the five routines. `template` supplies the chain
/// the lengths are validated against.
pub fn estimate_segment_lengths(
    recordings: &[CalibrationRecording],
    template: &HumanModel,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let mut fits = Vec::with_capacity(5);
    for routine in CalibrationRoutine::ALL {
        let rec = recordings
            .iter()
            .find(|r| r.routine == routine)
            .ok_or_else(|| Error::IncompleteCalibration(routine.name().into()))?;
        fits.push((routine, fit_recording(rec, opts)?));
    }
    let r = |i: usize| fits[i].1.radius;
    let hand_len = r(0);
    let forearm_len = r(1) - hand_len;
    let upper_arm_len = r(2);
    let reach = forearm_len + hand_len;
    let shoulder_sq = r(3).powi(2) - reach.powi(2);
    if !(shoulder_sq > 0.0) {
        return Err(Error::InvalidInput(format!(
            "hip_rotation radius {:.4} m does not exceed forearm+hand {:.4} m",
            r(3),
            reach
        )));
    }
    let shoulder_offset = shoulder_sq.sqrt();
    let drop_sq = r(4).powi(2) - shoulder_sq;
    if !(drop_sq > 0.0) {
        return Err(Error::InvalidInput(format!(
            "hip_lateral_bend radius {:.4} m does not exceed shoulder offset {:.4} m",
            r(4),
            shoulder_offset
        )));
    }
    let lengths = SegmentLengths {
        torso_len: upper_arm_len + drop_sq.sqrt(),
        shoulder_offset,
        upper_arm_len,
        forearm_len,
        hand_len,
    };
    lengths.validate()?;
    template.with_lengths(lengths)?;
    Ok(CalibrationResult { lengths, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn circle(center: Vector3<f64>, radius: f64, normal: Vector3<f64>, from: f64, to: f64, n: usize) -> Vec<Vector3<f64>> {
        let rot = Rotation3::rotation_between(&Vector3::z(), &normal).unwrap_or_else(Rotation3::identity);
        (0..n)
            .map(|k| {
                let a = from + (to - from) * k as f64 / (n - 1) as f64;
                center + rot * Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect()
    }

    #[test]
    fn exact_circle_recovered() {
        let c = Vector3::new(0.1, 0.2, 0.3);
        let pts = circle(c, 0.25, Vector3::z(), 0.0, 6.0, 20);
        let fit = fit_circle_3d(&pts).unwrap();
        assert!((fit.center - c).norm() < 1e-9);
        assert!((fit.radius - 0.25).abs() < 1e-9);
        assert!(fit.plane_normal.cross(&Vector3::z()).norm() < 1e-9);
        assert!(fit.rms_residual < 1e-9);
    }

    #[test]
    fn tilted_short_arc_recovered() {
        let n = Vector3::new(1.0, -2.0, 0.5).normalize();
        let c = Vector3::new(-0.3, 0.1, 0.7);
        let pts = circle(c, 0.08, n, 0.2, 0.2 + 0.5, 15);
        let fit = fit_circle_3d(&pts).unwrap();
        assert!((fit.radius - 0.08).abs() < 1e-9);
        assert!((fit.center - c).norm() < 1e-9);
        assert!((fit.arc_span - 0.5).abs() < 1e-9);
    }

    #[test]
    fn noisy_circle_radius_within_2mm() {
        let c = Vector3::new(0.1, 0.2, 0.3);
        let clean = circle(c, 0.25, Vector3::z(), 0.0, 6.0, 20);
        let noise = Normal::new(0.0, 0.001).unwrap();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = clean
                .iter()
                .map(|p| p + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let fit = fit_circle_3d(&pts).unwrap();
            assert!((fit.radius - 0.25).abs() < 0.002, "seed {seed}: {}", fit.radius);
        }
    }

    #[test]
    fn collinear_points_rejected() {
        let pts: Vec<_> = (0..10).map(|k| Vector3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
        assert!(matches!(fit_circle_3d(&pts), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = circle(Vector3::zeros(), 1.0, Vector3::z(), 0.0, 2.0, 3);
        assert!(fit_circle_3d(&pts).is_err());
    }

    fn recording(routine: CalibrationRoutine, pts: Vec<Vector3<f64>>) -> CalibrationRecording {
        CalibrationRecording {
            routine,
            samples: pts.into_iter().enumerate().map(|(k, p)| (k as f64 * 0.01, p)).collect(),
        }
    }

    #[test]
    fn short_arc_rejected_and_medium_arc_warned() {
        let opts = CalibrationOptions::default();
        let short = recording(
            CalibrationRoutine::WristFlexion,
            circle(Vector3::zeros(), 0.1, Vector3::z(), 0.0, 0.2, 30),
        );
        assert!(fit_recording(&short, &opts).is_err());
        let medium = recording(
            CalibrationRoutine::WristFlexion,
            circle(Vector3::zeros(), 0.1, Vector3::z(), 0.0, 0.6, 30),
        );
        assert!(fit_recording(&medium, &opts).unwrap().warning.is_some());
    }

    #[test]
    fn poor_fit_names_routine() {
        let mut pts = circle(Vector3::zeros(), 0.1, Vector3::z(), 0.0, 2.0, 30);
        for (k, p) in pts.iter_mut().enumerate() {
            p.z += if k % 2 == 0 { 0.05 } else { -0.05 };
        }
        let rec = recording(CalibrationRoutine::HipRotation, pts);
        match fit_recording(&rec, &CalibrationOptions::default()) {
            Err(Error::CalibrationQuality { routine, .. }) => assert_eq!(routine, "hip_rotation"),
            other => panic!("{other:?}"),
        }
    }

    /// Stylus positions while sweeping one joint, computed straight from FK.
    fn sweep(model: &HumanModel, routine: CalibrationRoutine, arc: f64) -> CalibrationRecording {
        let j = routine.joint();
        let pts = (0..60)
            .map(|k| {
                let mut q = model.neutral_posture;
                q[j] += arc * (k as f64 / 59.0 - 0.5);
                model.stylus_pose(&q).unwrap().position
            })
            .collect();
        recording(routine, pts)
    }

    #[test]
    fn lengths_recovered_from_exact_sweeps() {
        let model = HumanModel::default_seated();
        let recs: Vec<_> = CalibrationRoutine::ALL.iter().map(|r| sweep(&model, *r, 0.6)).collect();
        let got = estimate_segment_lengths(&recs, &model, &CalibrationOptions::default()).unwrap();
        let want = model.lengths.as_array();
        for (a, b) in got.lengths.as_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn missing_routine_reported() {
        let model = HumanModel::default_seated();
        let recs: Vec<_> = CalibrationRoutine::ALL
            .iter()
            .filter(|r| **r != CalibrationRoutine::HipRotation)
            .map(|r| sweep(&model, *r, 0.6))
            .collect();
        match estimate_segment_lengths(&recs, &model, &CalibrationOptions::default()) {
            Err(Error::IncompleteCalibration(name)) => assert_eq!(name, "hip_rotation"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rigid_and_scale_invariance() {
        let model = HumanModel::default_seated();
        let recs: Vec<_> = CalibrationRoutine::ALL.iter().map(|r| sweep(&model, *r, 0.6)).collect();
        let base = estimate_segment_lengths(&recs, &model, &CalibrationOptions::default())
            .unwrap()
            .lengths
            .as_array();
        let rot = UnitQuaternion::from_euler_angles(0.3, -1.1, 2.0);
        let shift = Vector3::new(1.0, -2.0, 0.4);
        let moved: Vec<_> = recs
            .iter()
            .map(|r| CalibrationRecording {
                routine: r.routine,
                samples: r.samples.iter().map(|(t, p)| (*t, rot * p + shift)).collect(),
            })
            .collect();
        let got = estimate_segment_lengths(&moved, &model, &CalibrationOptions::default())
            .unwrap()
            .lengths
            .as_array();
        for (a, b) in got.iter().zip(base) {
            assert!((a - b).abs() < 1e-9);
        }
        let s = 1.3;
        let scaled: Vec<_> = recs
            .iter()
            .map(|r| CalibrationRecording {
                routine: r.routine,
                samples: r.samples.iter().map(|(t, p)| (*t, p * s)).collect(),
            })
            .collect();
        let got = estimate_segment_lengths(&scaled, &model, &CalibrationOptions::default())
            .unwrap()
            .lengths
            .as_array();
        for (a, b) in got.iter().zip(base) {
            assert!((a - s * b).abs() < 1e-9);
        }
    }

    #[test]
    fn routine_names_round_trip() {
        for r in CalibrationRoutine::ALL {
            assert_eq!(CalibrationRoutine::from_name(r.name()), Some(r));
        }
        assert_eq!(CalibrationRoutine::from_name("elbow"), None);
    }
}
