//! File formats: stylus trajectories and posture trajectories (CSV), model
//! and pipeline configuration (TOML), estimates (JSON lines), calibration
//! recordings (CSV) and reports (JSON).
//!
//! Every CSV file starts with a `# <kind> format_version=1` comment line;
//! TOML and JSON documents carry a `format_version` field. Floats are written
//! in shortest round-trip form so that write → read → write is byte-stable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationRecording, CalibrationRoutine};
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, PostureEstimate};
use crate::ik::IkSettings;
use crate::model::{
    HumanModel, JointVector, PostureState, SegmentLengths, StylusObservation, TaskSpacePose,
    TaskSpaceVelocity, JOINT_NAMES, NUM_JOINTS,
};
use crate::rotation::{canonical, rotation_error};
use crate::rula::RulaAssumptions;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MODEL_TOML: &str = include_str!("../data/default_model.toml");

const TRAJECTORY_HEADER: [&str; 14] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
];
/// Quaternion norm drift that is silently corrected (with a warning).
const QUAT_RENORMALIZE_TOL: f64 = 1e-3;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn check_version(found: u32, path: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("unsupported format_version {found}, expected {FORMAT_VERSION}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// model file

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LengthsSection {
    torso_len: f64,
    shoulder_offset: f64,
    upper_arm_len: f64,
    forearm_len: f64,
    hand_len: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasePoseSection {
    position: [f64; 3],
    /// w, x, y, z
    orientation: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointSection {
    name: String,
    lower_deg: f64,
    upper_deg: f64,
    neutral_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    lengths: LengthsSection,
    base_pose: BasePoseSection,
    joints: Vec<JointSection>,
}

fn toml_error(path: &str, text: &str, err: toml::de::Error) -> Error {
    let line = err
        .span()
        .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(1);
    Error::Parse {
        path: path.into(),
        line,
        message: err.message().to_string(),
    }
}

pub fn parse_model_toml(text: &str, path: &str) -> Result<HumanModel> {
    let file: ModelFile = toml::from_str(text).map_err(|e| toml_error(path, text, e))?;
    check_version(file.format_version, path)?;
    if file.joints.len() != NUM_JOINTS {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("expected {NUM_JOINTS} joints, found {}", file.joints.len()),
        });
    }
    let mut lo = JointVector::zeros();
    let mut hi = JointVector::zeros();
    let mut neutral = JointVector::zeros();
    for (i, j) in file.joints.iter().enumerate() {
        if j.name != JOINT_NAMES[i] {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("joint {i} must be {}, found {}", JOINT_NAMES[i], j.name),
            });
        }
        lo[i] = j.lower_deg.to_radians();
        hi[i] = j.upper_deg.to_radians();
        neutral[i] = j.neutral_deg.to_radians();
    }
    let l = file.lengths;
    let lengths = SegmentLengths {
        torso_len: l.torso_len,
        shoulder_offset: l.shoulder_offset,
        upper_arm_len: l.upper_arm_len,
        forearm_len: l.forearm_len,
        hand_len: l.hand_len,
    };
    let [w, x, y, z] = file.base_pose.orientation;
    let quat = Quaternion::new(w, x, y, z);
    if (quat.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "base_pose orientation is not a unit quaternion".into(),
        });
    }
    let base = TaskSpacePose::new(
        Vector3::from(file.base_pose.position),
        UnitQuaternion::from_quaternion(quat),
    );
    HumanModel::new(lengths, lo, hi, base, neutral)
}

pub fn model_to_toml(model: &HumanModel) -> String {
    let l = model.lengths;
    let o = model.base_pose.orientation;
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        lengths: LengthsSection {
            torso_len: l.torso_len,
            shoulder_offset: l.shoulder_offset,
            upper_arm_len: l.upper_arm_len,
            forearm_len: l.forearm_len,
            hand_len: l.hand_len,
        },
        base_pose: BasePoseSection {
            position: model.base_pose.position.into(),
            orientation: [o.w, o.i, o.j, o.k],
        },
        joints: (0..NUM_JOINTS)
            .map(|i| JointSection {
                name: JOINT_NAMES[i].into(),
                lower_deg: model.layout.limits_lo[i].to_degrees(),
                upper_deg: model.layout.limits_hi[i].to_degrees(),
                neutral_deg: model.neutral_posture[i].to_degrees(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("model serializes")
}

pub fn read_model(path: &Path) -> Result<HumanModel> {
    let text = std::fs::read_to_string(path)?;
    parse_model_toml(&text, &path_str(path))
}

pub fn write_model(path: &Path, model: &HumanModel) -> Result<()> {
    std::fs::write(path, model_to_toml(model))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline config

/// Everything the CLI can configure from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub filter: FilterConfig,
    pub ik: IkSettings,
    pub rula: RulaAssumptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            filter: FilterConfig::default(),
            ik: IkSettings::default(),
            rula: RulaAssumptions::default(),
        }
    }
}

pub fn parse_config_toml(text: &str, path: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = toml::from_str(text).map_err(|e| toml_error(path, text, e))?;
    check_version(cfg.format_version, path)?;
    cfg.filter.validate()?;
    cfg.ik.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_toml(&text, &path_str(path))
}

pub fn config_to_toml(cfg: &PipelineConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

// ---------------------------------------------------------------------------
// CSV helpers

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_row(record: &csv::StringRecord, expected: usize, path: &str, line: usize) -> Result<Vec<f64>> {
    if record.len() != expected {
        return Err(Error::Parse {
            path: path.into(),
            line,
            message: format!("expected {expected} fields, found {}", record.len()),
        });
    }
    record
        .iter()
        .enumerate()
        .map(|(k, cell)| {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line,
                message: format!("field {} is not a number: {cell:?}", k + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("field {} is not finite", k + 1),
                });
            }
            Ok(v)
        })
        .collect()
}

fn check_header(reader: &mut csv::Reader<File>, expected: &[&str], path: &str) -> Result<()> {
    let header = reader.headers().map_err(|e| Error::Parse {
        path: path.into(),
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.into(),
            line: header.position().map(|p| p.line() as usize).unwrap_or(1),
            message: format!("unexpected header {got:?}"),
        });
    }
    Ok(())
}

/// Reads all data rows as `(line, values)` after validating the header.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let p = path_str(path);
    let mut reader = csv_reader(path)?;
    check_header(&mut reader, header, &p)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: p.clone(),
            line: e.position().map(|pos| pos.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|pos| pos.line() as usize).unwrap_or(0);
        rows.push((line, parse_row(&rec, header.len(), &p, line)?));
    }
    let mut prev: Option<f64> = None;
    for (line, row) in &rows {
        if let Some(t) = prev {
            if !(row[0] > t) {
                return Err(Error::Ordering {
                    path: p.clone(),
                    line: *line,
                });
            }
        }
        prev = Some(row[0]);
    }
    Ok(rows)
}

fn write_csv(path: &Path, kind: &str, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# {kind} format_version={FORMAT_VERSION}")?;
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// stylus trajectories

pub fn observation_row(o: &StylusObservation) -> Vec<f64> {
    let p = o.pose.position;
    let q = o.pose.orientation;
    let v = o.velocity.linear;
    let w = o.velocity.angular;
    vec![o.t, p.x, p.y, p.z, q.w, q.i, q.j, q.k, v.x, v.y, v.z, w.x, w.y, w.z]
}

pub fn write_trajectory(path: &Path, observations: &[StylusObservation]) -> Result<()> {
    let header: Vec<String> = TRAJECTORY_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(path, "stylus_trajectory", &header, observations.iter().map(observation_row))
}

/// One trajectory row (`t, position, quaternion wxyz, linear, angular`) as
/// an observation. Quaternions within 1e-3 of unit norm are renormalized.
pub fn observation_from_row(r: &[f64]) -> std::result::Result<StylusObservation, String> {
    if r.len() != TRAJECTORY_HEADER.len() {
        return Err(format!("expected {} values, got {}", TRAJECTORY_HEADER.len(), r.len()));
    }
    if let Some(v) = r.iter().find(|v| !v.is_finite()) {
        return Err(format!("non-finite value {v}"));
    }
    let quat = Quaternion::new(r[4], r[5], r[6], r[7]);
    let drift = (quat.norm() - 1.0).abs();
    if drift > QUAT_RENORMALIZE_TOL {
        return Err(format!("quaternion norm {:.6} is not unit", quat.norm()));
    }
    let orientation = if drift > 1e-12 {
        UnitQuaternion::from_quaternion(quat)
    } else {
        UnitQuaternion::new_unchecked(quat)
    };
    Ok(StylusObservation {
        t: r[0],
        pose: TaskSpacePose {
            position: Vector3::new(r[1], r[2], r[3]),
            orientation: canonical(orientation),
        },
        velocity: TaskSpaceVelocity {
            linear: Vector3::new(r[8], r[9], r[10]),
            angular: Vector3::new(r[11], r[12], r[13]),
        },
    })
}

/// Reads and validates a stylus trajectory.
///
/// Quaternions within 1e-3 of unit norm are renormalized with a warning;
/// anything further off is rejected with the offending line.
pub fn read_trajectory(path: &Path) -> Result<Vec<StylusObservation>> {
    let p = path_str(path);
    read_rows(path, &TRAJECTORY_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let obs = observation_from_row(&r).map_err(|message| Error::Parse {
                path: p.clone(),
                line,
                message,
            })?;
            let drift = (Quaternion::new(r[4], r[5], r[6], r[7]).norm() - 1.0).abs();
            if drift > 1e-12 {
                log::warn!("{p}:{line}: renormalizing quaternion (norm drift {drift:.2e})");
            }
            Ok(obs)
        })
        .collect()
}

/// Stylus observations from a pose-only log.
///
/// Linear velocity is a central difference (one-sided at the ends); angular
/// velocity is the rotation vector of the relative rotation over the same
/// interval divided by its duration.
pub fn velocity_from_poses(poses: &[(f64, TaskSpacePose)]) -> Result<Vec<StylusObservation>> {
    if poses.len() < 2 {
        return Err(Error::InvalidInput(
            "velocity estimation needs at least two poses".into(),
        ));
    }
    for (i, w) in poses.windows(2).enumerate() {
        if !(w[1].0 > w[0].0) {
            return Err(Error::OutOfOrder { index: i + 1 });
        }
    }
    let n = poses.len();
    Ok((0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            let dt = poses[b].0 - poses[a].0;
            let linear = (poses[b].1.position - poses[a].1.position) / dt;
            let angular = rotation_error(&poses[b].1.orientation, &poses[a].1.orientation) / dt;
            StylusObservation {
                t: poses[i].0,
                pose: poses[i].1,
                velocity: TaskSpaceVelocity { linear, angular },
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// posture trajectories

fn posture_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(JOINT_NAMES.iter().map(|n| n.to_string()));
    h.extend(JOINT_NAMES.iter().map(|n| format!("{n}_vel")));
    h
}

/// Timestamped joint-space trajectory (ground truth or IK output).
#[derive(Debug, Clone, PartialEq)]
pub struct PostureTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<PostureState>,
}

pub fn write_postures(path: &Path, traj: &PostureTrajectory) -> Result<()> {
    write_csv(
        path,
        "posture_trajectory",
        &posture_header(),
        traj.times.iter().zip(&traj.states).map(|(t, s)| {
            let mut row = vec![*t];
            row.extend(s.q.iter());
            row.extend(s.qdot.iter());
            row
        }),
    )
}

pub fn read_postures(path: &Path) -> Result<PostureTrajectory> {
    let header = posture_header();
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = read_rows(path, &header)?;
    Ok(PostureTrajectory {
        times: rows.iter().map(|(_, r)| r[0]).collect(),
        states: rows
            .iter()
            .map(|(_, r)| PostureState {
                q: JointVector::from_column_slice(&r[1..1 + NUM_JOINTS]),
                qdot: JointVector::from_column_slice(&r[1 + NUM_JOINTS..]),
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// estimates (JSON lines)

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EstimateLine {
    format_version: u32,
    #[serde(flatten)]
    estimate: PostureEstimate,
}

pub fn write_estimates(path: &Path, estimates: &[PostureEstimate]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in estimates {
        let line = EstimateLine {
            format_version: FORMAT_VERSION,
            estimate: e.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_estimates(path: &Path) -> Result<Vec<PostureEstimate>> {
    let p = path_str(path);
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EstimateLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: p.clone(),
            line: k + 1,
            message: e.to_string(),
        })?;
        if parsed.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: p.clone(),
                line: k + 1,
                message: format!("unsupported format_version {}", parsed.format_version),
            });
        }
        if let Some(prev) = out.last().map(|e: &PostureEstimate| e.timestamp) {
            if !(parsed.estimate.timestamp > prev) {
                return Err(Error::Ordering { path: p, line: k + 1 });
            }
        }
        out.push(parsed.estimate);
    }
    Ok(out)
}

/// Appends one particle-cloud snapshot as a JSON line.
pub fn write_particle_dump<W: Write>(out: &mut W, step: usize, t: f64, ps: &crate::filter::ParticleSet) -> Result<()> {
    #[derive(Serialize)]
    struct Dump<'a> {
        format_version: u32,
        step: usize,
        t: f64,
        q: Vec<[f64; NUM_JOINTS]>,
        log_weights: &'a [f64],
    }
    let dump = Dump {
        format_version: FORMAT_VERSION,
        step,
        t,
        q: ps.states.iter().map(|s| s.q.into()).collect(),
        log_weights: &ps.log_weights,
    };
    serde_json::to_writer(&mut *out, &dump).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// calibration recordings

pub fn write_calibration(path: &Path, rec: &CalibrationRecording) -> Result<()> {
    let header: Vec<String> = ["t", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
    write_csv(
        path,
        &format!("calibration routine={}", rec.routine.name()),
        &header,
        rec.samples.iter().map(|(t, p)| vec![*t, p.x, p.y, p.z]),
    )
}

/// Reads a calibration CSV. The routine comes from the leading comment line
/// or, failing that, from `routine`.
pub fn read_calibration(path: &Path, routine: Option<CalibrationRoutine>) -> Result<CalibrationRecording> {
    let p = path_str(path);
    let first = BufReader::new(File::open(path)?)
        .lines()
        .next()
        .transpose()?
        .unwrap_or_default();
    let from_file = first
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("routine="))
        .map(|name| {
            CalibrationRoutine::from_name(name).ok_or_else(|| Error::Parse {
                path: p.clone(),
                line: 1,
                message: format!("unknown routine {name}"),
            })
        })
        .transpose()?;
    let routine = from_file.or(routine).ok_or_else(|| Error::Parse {
        path: p.clone(),
        line: 1,
        message: "calibration routine not given".into(),
    })?;
    let rows = read_rows(path, &["t", "x", "y", "z"])?;
    Ok(CalibrationRecording {
        routine,
        samples: rows
            .into_iter()
            .map(|(_, r)| (r[0], Vector3::new(r[1], r[2], r[3])))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// JSON reports

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
