//! Synthetic tasks with known ground truth.
//!
//! A task is a stylus path relative to the neutral stylus pose. The ground
//! truth joint trajectory is the trajectory IK solution of that path, and
//! observations are its forward kinematics plus seeded Gaussian noise.

use std::f64::consts::TAU;

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationRecording, CalibrationRoutine};
use crate::dynamics::MotionNoise;
use crate::error::{Error, Result};
use crate::ik::{offline_traj_ik, online_ik, sigma2_from_motion, IkConfig};
use crate::likelihood::{ObservationNoise, OBS_DIM};
use crate::model::{HumanModel, PostureState, StylusObservation, TaskSpacePose, TaskSpaceVelocity, NUM_JOINTS};

/// Largest FK-to-path distance accepted for the generated ground truth.
pub const TRACKING_TOLERANCE: f64 = 0.002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LineX,
    LineY,
    Circle,
    TwoBlocks,
    Static,
    /// Minimum-jerk segments through offsets (meters) from the neutral
    /// stylus position.
    CustomSpline { waypoints: Vec<[f64; 3]> },
}

impl TaskKind {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "line_x" => Self::LineX,
            "line_y" => Self::LineY,
            "circle" => Self::Circle,
            "two_blocks" => Self::TwoBlocks,
            "static" => Self::Static,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LineX => "line_x",
            Self::LineY => "line_y",
            Self::Circle => "circle",
            Self::TwoBlocks => "two_blocks",
            Self::Static => "static",
            Self::CustomSpline { .. } => "custom_spline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub rate: f64,
    /// `None` gives noiseless observations.
    pub noise: Option<ObservationNoise>,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, duration: f64, rate: f64, noise: Option<ObservationNoise>, seed: u64) -> Self {
        Self {
            kind,
            duration,
            rate,
            noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::InvalidInput(format!("task rate must be > 0, got {}", self.rate)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidInput(format!("task duration must be > 0, got {}", self.duration)));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if let TaskKind::CustomSpline { waypoints } = &self.kind {
            if waypoints.is_empty() {
                return Err(Error::InvalidInput("custom spline needs at least one waypoint".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration * self.rate).round() as usize + 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }
}

/// Observation noise used by the benchmark tasks: position and orientation
/// standard deviations as given, velocity blocks as in the reference Σ_K.
pub fn benchmark_noise(sigma_pos: f64, sigma_ori: f64) -> ObservationNoise {
    let r = ObservationNoise::reference();
    ObservationNoise::from_blocks(sigma_pos * sigma_pos, sigma_ori * sigma_ori, r.sigma_k[6], r.sigma_k[9])
}

/// Stylus target at one instant, relative to the neutral stylus pose.
#[derive(Debug, Clone, Copy)]
struct PathSample {
    offset: Vector3<f64>,
    velocity: Vector3<f64>,
    yaw: f64,
    yaw_rate: f64,
}

fn min_jerk(tau: f64) -> (f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    (
        t * t * t * (10.0 - 15.0 * t + 6.0 * t * t),
        30.0 * t * t * (1.0 - t) * (1.0 - t),
    )
}

/// Piecewise minimum-jerk interpolation of `(time, offset, yaw)` knots.
struct Knots(Vec<(f64, Vector3<f64>, f64)>);

impl Knots {
    fn sample(&self, t: f64) -> PathSample {
        let k = &self.0;
        let last = k.len() - 1;
        if t >= k[last].0 {
            return PathSample {
                offset: k[last].1,
                velocity: Vector3::zeros(),
                yaw: k[last].2,
                yaw_rate: 0.0,
            };
        }
        let i = k.iter().rposition(|(ti, _, _)| *ti <= t).unwrap_or(0);
        let (t0, p0, y0) = k[i];
        let (t1, p1, y1) = k[i + 1];
        let span = t1 - t0;
        let (s, ds) = min_jerk((t - t0) / span);
        PathSample {
            offset: p0 + (p1 - p0) * s,
            velocity: (p1 - p0) * ds / span,
            yaw: y0 + (y1 - y0) * s,
            yaw_rate: (y1 - y0) * ds / span,
        }
    }
}

const LINE_AMPLITUDE: f64 = 0.15;
const LINE_PERIOD: f64 = 5.0;
const CIRCLE_RADIUS: f64 = 0.1;
const CIRCLE_PERIOD: f64 = 5.0;

fn two_blocks_knots(duration: f64, rng: &mut ChaCha8Rng) -> Knots {
    // two blocks at different heights, each touched on one of four sides
    let blocks = [Vector3::new(0.12, 0.04, 0.0), Vector3::new(0.04, 0.18, 0.10)];
    let sides = [
        (Vector3::new(-0.04, 0.0, 0.0), 0.0),
        (Vector3::new(0.0, 0.04, 0.0), 0.4),
        (Vector3::new(0.0, -0.04, 0.0), -0.4),
        (Vector3::new(0.0, 0.0, 0.04), 0.2),
    ];
    let segment = 2.5;
    let moves = ((duration / segment).floor() as usize).max(1);
    let mut order: Vec<(usize, usize)> = (0..2).flat_map(|b| (0..4).map(move |s| (b, s))).collect();
    let mut knots = vec![(0.0, Vector3::zeros(), 0.0)];
    let mut k = 0;
    while knots.len() <= moves {
        if k % order.len() == 0 {
            order.shuffle(rng);
        }
        let (b, s) = order[k % order.len()];
        k += 1;
        let t = knots.len() as f64 * segment;
        knots.push((t.min(duration), blocks[b] + sides[s].0, sides[s].1));
    }
    Knots(knots)
}

fn path_fn(kind: &TaskKind, duration: f64, rng: &mut ChaCha8Rng) -> Box<dyn Fn(f64) -> PathSample> {
    match kind {
        TaskKind::Static => Box::new(|_| PathSample {
            offset: Vector3::zeros(),
            velocity: Vector3::zeros(),
            yaw: 0.0,
            yaw_rate: 0.0,
        }),
        TaskKind::LineX | TaskKind::LineY => {
            let dir = if *kind == TaskKind::LineX {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let w = TAU / LINE_PERIOD;
            Box::new(move |t| PathSample {
                offset: dir * (0.5 * LINE_AMPLITUDE * (1.0 - (w * t).cos())),
                velocity: dir * (0.5 * LINE_AMPLITUDE * w * (w * t).sin()),
                yaw: 0.0,
                yaw_rate: 0.0,
            })
        }
        TaskKind::Circle => {
            // whole turns with a minimum-jerk angle profile; starts and ends at rest
            let turns = (duration / CIRCLE_PERIOD).round().max(1.0);
            let total = turns * TAU;
            Box::new(move |t| {
                let (s, ds) = min_jerk(t / duration);
                let a = total * s;
                let da = total * ds / duration;
                PathSample {
                    offset: Vector3::new(CIRCLE_RADIUS * (1.0 - a.cos()), CIRCLE_RADIUS * a.sin(), 0.0),
                    velocity: Vector3::new(CIRCLE_RADIUS * a.sin(), CIRCLE_RADIUS * a.cos(), 0.0) * da,
                    yaw: 0.0,
                    yaw_rate: 0.0,
                }
            })
        }
        TaskKind::TwoBlocks => {
            let knots = two_blocks_knots(duration, rng);
            Box::new(move |t| knots.sample(t))
        }
        TaskKind::CustomSpline { waypoints } => {
            let n = waypoints.len();
            let mut knots = vec![(0.0, Vector3::zeros(), 0.0)];
            for (i, w) in waypoints.iter().enumerate() {
                knots.push((duration * (i + 1) as f64 / n as f64, Vector3::from(*w), 0.0));
            }
            let knots = Knots(knots);
            Box::new(move |t| knots.sample(t))
        }
    }
}

/// Ground truth and observations of one synthetic run.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub times: Vec<f64>,
    pub truth: Vec<PostureState>,
    pub observations: Vec<StylusObservation>,
    /// Stylus positions the task asked for.
    pub targets: Vec<Vector3<f64>>,
}

/// IK weights used to turn a stylus path into a joint trajectory: tight on
/// the stylus pose, motion term from the reference Σ_v, and a weak pull
/// towards the neutral posture (stronger on the torso) that picks a
/// comfortable, repeatable solution out of the redundant ones.
pub fn generation_ik_config(dt: f64) -> IkConfig {
    let mut sigma1 = [0.0; OBS_DIM];
    for i in 0..3 {
        sigma1[i] = 1e-4f64.powi(2);
        sigma1[3 + i] = 0.01f64.powi(2);
        sigma1[6 + i] = 0.02f64.powi(2);
        sigma1[9 + i] = 0.2f64.powi(2);
    }
    let mut prior = [0.5f64.powi(2); NUM_JOINTS];
    for v in prior.iter_mut().take(3) {
        *v = 0.15f64.powi(2);
    }
    IkConfig {
        sigma1,
        sigma2: sigma2_from_motion(&MotionNoise::reference(), dt),
        max_iters: 50,
        offline_max_iters: 30,
        tol: 1e-10,
        restarts: 0,
        restart_std: 0.0,
        seed: 0,
        posture_prior: Some(prior),
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adds noise drawn from `noise` to a clean observation. The orientation is
/// perturbed by a world-frame rotation vector.
pub fn perturb_observation(obs: &StylusObservation, noise: &ObservationNoise, rng: &mut ChaCha8Rng) -> StylusObservation {
    let sd = noise.std_dev();
    let e: Vec<f64> = (0..OBS_DIM)
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd[i]
        })
        .collect();
    let dp = Vector3::new(e[0], e[1], e[2]);
    let dr = Vector3::new(e[3], e[4], e[5]);
    StylusObservation {
        t: obs.t,
        pose: TaskSpacePose::new(
            obs.pose.position + dp,
            UnitQuaternion::from_scaled_axis(dr) * obs.pose.orientation,
        ),
        velocity: TaskSpaceVelocity {
            linear: obs.velocity.linear + Vector3::new(e[6], e[7], e[8]),
            angular: obs.velocity.angular + Vector3::new(e[9], e[10], e[11]),
        },
    }
}

pub fn generate_task(model: &HumanModel, task: &SyntheticTask) -> Result<SyntheticRun> {
    task.validate()?;
    let n = task.steps();
    let dt = task.dt();
    let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let mut layout_rng = rng_stream(task.seed, 1);
    let path = path_fn(&task.kind, task.duration, &mut layout_rng);
    let home = model.stylus_pose(&model.neutral_posture)?;

    let targets: Vec<StylusObservation> = times
        .iter()
        .map(|&t| {
            let s = path(t);
            StylusObservation {
                t,
                pose: TaskSpacePose::new(
                    home.position + s.offset,
                    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), s.yaw) * home.orientation,
                ),
                velocity: TaskSpaceVelocity {
                    linear: s.velocity,
                    angular: Vector3::z() * s.yaw_rate,
                },
            }
        })
        .collect();

    let truth = if task.kind == TaskKind::Static {
        vec![PostureState::at_rest(model.neutral_posture); n]
    } else {
        // per-step comfortable posture first (motion term switched off),
        // then a joint solve that makes the trajectory dynamically consistent
        let cfg = generation_ik_config(dt);
        let per_step = IkConfig {
            sigma2: cfg.sigma2.map(|v| v * 1e10),
            ..cfg.clone()
        };
        let init = online_ik(&targets, model, &per_step)?;
        offline_traj_ik(&targets, model, &cfg, &init.states)?.states
    };

    for (k, (s, target)) in truth.iter().zip(&targets).enumerate() {
        let err = (model.stylus_pose(&s.q)?.position - target.pose.position).norm();
        if !(err <= TRACKING_TOLERANCE) {
            return Err(Error::Unreachable { index: k, residual: err });
        }
    }

    let mut noise_rng = rng_stream(task.seed, 2);
    let observations = truth
        .iter()
        .zip(&times)
        .map(|(s, &t)| {
            let clean = StylusObservation::of_state(model, s, t)?;
            Ok(match &task.noise {
                Some(noise) => perturb_observation(&clean, noise, &mut noise_rng),
                None => clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticRun {
        times,
        truth,
        observations,
        targets: targets.iter().map(|o| o.pose.position).collect(),
    })
}

pub const CALIBRATION_SAMPLES: usize = 300;
pub const CALIBRATION_RATE: f64 = 100.0;

/// Default sweep for each routine, in degrees, chosen inside the bundled
/// model's limits.
pub fn default_arc_deg(routine: CalibrationRoutine) -> f64 {
    match routine {
        CalibrationRoutine::WristFlexion => 120.0,
        CalibrationRoutine::ForearmRotation => 120.0,
        CalibrationRoutine::ShoulderAbduction => 60.0,
        CalibrationRoutine::HipRotation => 60.0,
        CalibrationRoutine::HipLateralBend => 40.0,
    }
}

/// Stylus positions while only the routine's joint moves: neutral, then
/// `+arc/2`, `−arc/2` and back, with isotropic position noise `noise_m`.
pub fn generate_calibration(
    model: &HumanModel,
    routine: CalibrationRoutine,
    arc_deg: f64,
    noise_m: f64,
    seed: u64,
) -> Result<CalibrationRecording> {
    let j = routine.joint();
    let half = 0.5 * arc_deg.to_radians();
    let q0 = model.neutral_posture[j];
    if !(half > 0.0 && half.is_finite()) {
        return Err(Error::InvalidInput(format!("calibration arc must be > 0, got {arc_deg}")));
    }
    if q0 + half > model.limits_hi()[j] || q0 - half < model.limits_lo()[j] {
        return Err(Error::InvalidInput(format!(
            "{}: arc {arc_deg} deg from neutral exceeds joint limits",
            routine.name()
        )));
    }
    if !(noise_m >= 0.0 && noise_m.is_finite()) {
        return Err(Error::InvalidInput(format!("calibration noise must be >= 0, got {noise_m}")));
    }
    let normal = Normal::new(0.0, noise_m).expect("finite std");
    let mut rng = rng_stream(seed, 3);
    let samples = (0..CALIBRATION_SAMPLES)
        .map(|k| {
            let s = k as f64 / CALIBRATION_SAMPLES as f64;
            let mut q = model.neutral_posture;
            q[j] = q0 + half * (TAU * s).sin();
            let mut p = model.stylus_pose(&q)?.position;
            if noise_m > 0.0 {
                p += Vector3::from_fn(|_, _| normal.sample(&mut rng));
            }
            Ok((k as f64 / CALIBRATION_RATE, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationRecording { routine, samples })
}
