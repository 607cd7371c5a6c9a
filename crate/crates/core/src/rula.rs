//! RULA scoring of postures and posture distributions.
//!
//! The worksheet tables and angle thresholds live in
//! `data/rula_tables.toml`. Joint mapping: shoulder flexion and abduction
//! give the upper-arm bin, elbow flexion the lower-arm bin, wrist flexion
//! and deviation the wrist bin, forearm pronation the wrist twist, and the
//! torso joints the trunk bin (only when the trunk is not assumed
//! vertical). The model has no neck, so the neck bin comes from the
//! assumptions.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ParticleSet;
use crate::model::{joint, JointVector};

pub const RULA_TABLES_TOML: &str = include_str!("../data/rula_tables.toml");

/// Task-level inputs RULA needs beyond the joint angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulaAssumptions {
    pub seated: bool,
    pub load_kg: f64,
    /// Static posture or more than 4 repetitions per minute.
    pub muscle_use_high_freq: bool,
    pub neck_twisted: bool,
    /// Score the trunk as upright and untwisted regardless of torso angles.
    pub trunk_vertical_override: bool,
    pub legs_supported: bool,
}

impl Default for RulaAssumptions {
    fn default() -> Self {
        Self {
            seated: true,
            load_kg: 0.0,
            muscle_use_high_freq: false,
            neck_twisted: false,
            trunk_vertical_override: true,
            legs_supported: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct UpperArmBins {
    extension: f64,
    bands: [f64; 3],
    abducted_above: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct LowerArmBins {
    neutral_lo: f64,
    neutral_hi: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct WristBins {
    neutral_band: f64,
    mild_limit: f64,
    deviated_above: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct TwistBins {
    mid_range: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct TrunkBins {
    upright_band: f64,
    bands: [f64; 2],
    twisted_above: f64,
    side_bent_above: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct LoadBins {
    light_below_kg: f64,
    heavy_above_kg: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct Tables {
    table_a: [[[u8; 8]; 3]; 6],
    table_b: [[u8; 12]; 6],
    table_c: [[u8; 7]; 8],
}

/// Parsed worksheet data.
#[derive(Debug, Clone, Deserialize)]
pub struct RulaTables {
    format_version: u32,
    upper_arm: UpperArmBins,
    lower_arm: LowerArmBins,
    wrist: WristBins,
    wrist_twist: TwistBins,
    trunk: TrunkBins,
    load: LoadBins,
    tables: Tables,
}

impl RulaTables {
    pub fn parse(text: &str) -> Result<Self> {
        let t: RulaTables = toml::from_str(text).map_err(|e| Error::Config(format!("rula tables: {e}")))?;
        if t.format_version != 1 {
            return Err(Error::Config(format!("rula tables: unsupported format_version {}", t.format_version)));
        }
        Ok(t)
    }

    /// The bundled worksheet.
    pub fn bundled() -> &'static RulaTables {
        static TABLES: OnceLock<RulaTables> = OnceLock::new();
        TABLES.get_or_init(|| RulaTables::parse(RULA_TABLES_TOML).expect("bundled RULA tables are valid"))
    }

    fn upper_arm(&self, flexion: f64, abduction: f64) -> u8 {
        let b = &self.upper_arm;
        let base = if flexion <= b.extension {
            2
        } else if flexion < b.bands[0] {
            1
        } else if flexion < b.bands[1] {
            2
        } else if flexion < b.bands[2] {
            3
        } else {
            4
        };
        base + u8::from(abduction > b.abducted_above)
    }

    fn lower_arm(&self, elbow: f64) -> u8 {
        if (self.lower_arm.neutral_lo..=self.lower_arm.neutral_hi).contains(&elbow) {
            1
        } else {
            2
        }
    }

    fn wrist(&self, flexion: f64, deviation: f64) -> u8 {
        let b = &self.wrist;
        let f = flexion.abs();
        let base = if f <= b.neutral_band {
            1
        } else if f <= b.mild_limit {
            2
        } else {
            3
        };
        base + u8::from(deviation.abs() > b.deviated_above)
    }

    fn twist(&self, pronation: f64) -> u8 {
        if pronation.abs() <= self.wrist_twist.mid_range {
            1
        } else {
            2
        }
    }

    fn trunk(&self, flexion: f64, side_bend: f64, twist: f64) -> u8 {
        let b = &self.trunk;
        let f = flexion.abs();
        let base = if f <= b.upright_band {
            1
        } else if f < b.bands[0] {
            2
        } else if f < b.bands[1] {
            3
        } else {
            4
        };
        base + u8::from(twist.abs() > b.twisted_above) + u8::from(side_bend.abs() > b.side_bent_above)
    }

    fn load_score(&self, kg: f64, repeated: bool) -> u8 {
        if kg < self.load.light_below_kg {
            0
        } else if kg <= self.load.heavy_above_kg {
            if repeated {
                2
            } else {
                1
            }
        } else {
            3
        }
    }
}

/// One worksheet evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulaScore {
    pub upper_arm: u8,
    pub lower_arm: u8,
    pub wrist: u8,
    pub wrist_twist: u8,
    pub neck: u8,
    pub trunk: u8,
    pub legs: u8,
    /// Posture score from Table A, before muscle-use and load modifiers.
    pub table_a: u8,
    /// Posture score from Table B, before muscle-use and load modifiers.
    pub table_b: u8,
    pub score_a: u8,
    pub score_b: u8,
    pub table_c: u8,
    pub grand: u8,
    pub action_level: u8,
}

/// Action level for a grand score: 1–2 → 1, 3–4 → 2, 5–6 → 3, 7 → 4.
pub fn action_level(grand: u8) -> u8 {
    match grand {
        0..=2 => 1,
        3..=4 => 2,
        5..=6 => 3,
        _ => 4,
    }
}

/// Scores a posture with the bundled worksheet.
pub fn score_posture(q: &JointVector, assume: &RulaAssumptions) -> RulaScore {
    score_posture_with(RulaTables::bundled(), q, assume)
}

pub fn score_posture_with(t: &RulaTables, q: &JointVector, assume: &RulaAssumptions) -> RulaScore {
    let deg = |i: usize| q[i].to_degrees();
    let upper_arm = t.upper_arm(deg(joint::SHOULDER_FLEXION), deg(joint::SHOULDER_ABDUCTION)).clamp(1, 6);
    let lower_arm = t.lower_arm(deg(joint::ELBOW_FLEXION)).clamp(1, 3);
    let wrist = t.wrist(deg(joint::WRIST_FLEXION), deg(joint::WRIST_DEVIATION)).clamp(1, 4);
    let wrist_twist = t.twist(deg(joint::FOREARM_PRONATION)).clamp(1, 2);
    let neck = (1 + u8::from(assume.neck_twisted)).clamp(1, 6);
    let trunk = if assume.trunk_vertical_override {
        1
    } else {
        t.trunk(
            deg(joint::TORSO_FLEXION),
            deg(joint::TORSO_LATERAL_BEND),
            deg(joint::TORSO_AXIAL_ROTATION),
        )
        .clamp(1, 6)
    };
    let legs = if assume.legs_supported { 1 } else { 2 };

    let table_a = t.tables.table_a[usize::from(upper_arm - 1)][usize::from(lower_arm - 1)]
        [usize::from((wrist - 1) * 2 + (wrist_twist - 1))];
    let table_b = t.tables.table_b[usize::from(neck - 1)][usize::from((trunk - 1) * 2 + (legs - 1))];
    let extra = u8::from(assume.muscle_use_high_freq) + t.load_score(assume.load_kg, assume.muscle_use_high_freq);
    let score_a = table_a + extra;
    let score_b = table_b + extra;
    let table_c = t.tables.table_c[usize::from(score_a.min(8) - 1)][usize::from(score_b.min(7) - 1)];
    RulaScore {
        upper_arm,
        lower_arm,
        wrist,
        wrist_twist,
        neck,
        trunk,
        legs,
        table_a,
        table_b,
        score_a,
        score_b,
        table_c,
        grand: table_c,
        action_level: action_level(table_c),
    }
}

/// Grand-score distribution over a weighted particle set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub expected: f64,
    pub std: f64,
    /// Probability of grand scores 1..=7.
    pub histogram: [f64; 7],
}

pub fn score_distribution(ps: &ParticleSet, assume: &RulaAssumptions) -> ScoreDistribution {
    let w = ps.weights();
    let total: f64 = w.iter().sum();
    let mut histogram = [0.0; 7];
    for (s, wi) in ps.states.iter().zip(&w) {
        let g = score_posture(&s.q, assume).grand;
        histogram[usize::from(g - 1)] += wi / total;
    }
    let expected: f64 = histogram.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum();
    let var: f64 = histogram
        .iter()
        .enumerate()
        .map(|(k, p)| ((k + 1) as f64 - expected).powi(2) * p)
        .sum();
    ScoreDistribution {
        expected,
        std: var.max(0.0).sqrt(),
        histogram,
    }
}

/// Grand-score distribution of independent per-joint Gaussians, estimated
/// from `samples` draws. Used when only moments of the posture are stored.
pub fn sampled_distribution<R: rand::Rng + ?Sized>(
    mean: &JointVector,
    std: &JointVector,
    samples: usize,
    assume: &RulaAssumptions,
    rng: &mut R,
) -> ScoreDistribution {
    let states = (0..samples.max(1))
        .map(|_| {
            let q = JointVector::from_fn(|i, _| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean[i] + std[i] * z
            });
            crate::model::PostureState::at_rest(q)
        })
        .collect();
    score_distribution(&ParticleSet::uniform(states), assume)
}

/// The record with the largest grand score; the earliest wins ties.
pub fn max_score(scores: &[RulaScore]) -> Result<(usize, RulaScore)> {
    let mut best: Option<(usize, RulaScore)> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s.grand > b.grand) {
            best = Some((i, *s));
        }
    }
    best.ok_or_else(|| Error::InvalidInput("max_score of an empty trajectory".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HumanModel, PostureState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn neutral() -> JointVector {
        HumanModel::default_seated().neutral_posture
    }

    fn with(pairs: &[(usize, f64)]) -> JointVector {
        let mut q = neutral();
        for (i, d) in pairs {
            q[*i] = d.to_radians();
        }
        q
    }

    #[test]
    fn neutral_golden_case() {
        // upper arm 1, lower arm 1 (90°), wrist 1, twist 1 → A = 1;
        // neck 1, trunk 1, legs 1 → B = 1; C(1, 1) = 1
        let s = score_posture(&neutral(), &RulaAssumptions::default());
        assert_eq!((s.upper_arm, s.lower_arm, s.wrist, s.wrist_twist), (1, 1, 1, 1));
        assert_eq!((s.table_a, s.table_b, s.grand, s.action_level), (1, 1, 1, 1));
    }

    #[test]
    fn raised_arm_golden_case() {
        // flexion 100° → 4; wrist 20° → 3; A(4,1,3,1) = 4; C(4, 1) = 3
        let q = with(&[(joint::SHOULDER_FLEXION, 100.0), (joint::WRIST_FLEXION, 20.0)]);
        let s = score_posture(&q, &RulaAssumptions::default());
        assert_eq!((s.upper_arm, s.wrist, s.table_a), (4, 3, 4));
        assert_eq!((s.grand, s.action_level), (3, 2));
        assert!(s.grand > score_posture(&neutral(), &RulaAssumptions::default()).grand);
    }

    #[test]
    fn worst_arm_golden_case() {
        // flexion 120° + abduction 60° → 5; elbow 30° → 2; wrist 30° + deviation 15° → 4;
        // pronation 60° → 2; A(5,2,4,2) = 7; C(7, 1) = 5
        let q = with(&[
            (joint::SHOULDER_FLEXION, 120.0),
            (joint::SHOULDER_ABDUCTION, 60.0),
            (joint::ELBOW_FLEXION, 30.0),
            (joint::WRIST_FLEXION, 30.0),
            (joint::WRIST_DEVIATION, -15.0),
            (joint::FOREARM_PRONATION, 60.0),
        ]);
        let s = score_posture(&q, &RulaAssumptions::default());
        assert_eq!((s.upper_arm, s.lower_arm, s.wrist, s.wrist_twist), (5, 2, 4, 2));
        assert_eq!((s.table_a, s.grand, s.action_level), (7, 5, 3));
    }

    #[test]
    fn load_and_trunk_modifiers() {
        // trunk flexed 30° → 3, side bend 15° → +1 = 4; B(1, trunk 4, legs 1) = 5;
        // load 5 kg intermittent → +1 on both; C(A 2, B 6) = 5
        let q = with(&[(joint::TORSO_FLEXION, 30.0), (joint::TORSO_LATERAL_BEND, 15.0)]);
        let assume = RulaAssumptions {
            trunk_vertical_override: false,
            load_kg: 5.0,
            ..RulaAssumptions::default()
        };
        let s = score_posture(&q, &assume);
        assert_eq!((s.trunk, s.table_b, s.score_a, s.score_b, s.grand), (4, 5, 2, 6, 5));
    }

    #[test]
    fn grand_in_range_for_random_postures() {
        let model = HumanModel::default_seated();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let assume = [
            RulaAssumptions::default(),
            RulaAssumptions {
                trunk_vertical_override: false,
                load_kg: 12.0,
                muscle_use_high_freq: true,
                neck_twisted: true,
                legs_supported: false,
                seated: true,
            },
        ];
        for _ in 0..10_000 {
            let q = JointVector::from_fn(|i, _| rng.random_range(model.limits_lo()[i]..=model.limits_hi()[i]));
            for a in &assume {
                let s = score_posture(&q, a);
                assert!((1..=7).contains(&s.grand));
                assert_eq!(s.action_level, action_level(s.grand));
                assert!((1..=6).contains(&s.upper_arm) && (1..=3).contains(&s.lower_arm));
                assert!((1..=4).contains(&s.wrist) && (1..=2).contains(&s.wrist_twist));
            }
        }
    }

    #[test]
    fn bins_monotone_in_each_angle() {
        let assume = RulaAssumptions::default();
        let joints = [
            joint::SHOULDER_FLEXION,
            joint::SHOULDER_ABDUCTION,
            joint::WRIST_FLEXION,
            joint::WRIST_DEVIATION,
            joint::FOREARM_PRONATION,
        ];
        for j in joints {
            let mut prev = 0;
            for d in 0..=170 {
                let s = score_posture(&with(&[(j, d as f64)]), &assume);
                let bin = match j {
                    joint::SHOULDER_FLEXION | joint::SHOULDER_ABDUCTION => s.upper_arm,
                    joint::WRIST_FLEXION | joint::WRIST_DEVIATION => s.wrist,
                    _ => s.wrist_twist,
                };
                assert!(bin >= prev, "joint {j} at {d} deg");
                prev = bin;
            }
        }
    }

    fn set(qs: &[JointVector], w: &[f64]) -> ParticleSet {
        let mut ps = ParticleSet::uniform(qs.iter().map(|q| PostureState::at_rest(*q)).collect());
        ps.log_weights = w.iter().map(|x| x.ln()).collect();
        ps.normalize();
        ps
    }

    #[test]
    fn point_mass_distribution() {
        let q = with(&[(joint::SHOULDER_FLEXION, 100.0), (joint::WRIST_FLEXION, 20.0)]);
        let d = score_distribution(&set(&[q, q, q], &[0.2, 0.3, 0.5]), &RulaAssumptions::default());
        assert_eq!(d.expected, 3.0);
        assert_eq!(d.std, 0.0);
        assert_eq!(d.expected, f64::from(score_posture(&q, &RulaAssumptions::default()).grand));
    }

    #[test]
    fn two_point_distribution() {
        let three = with(&[(joint::SHOULDER_FLEXION, 100.0), (joint::WRIST_FLEXION, 20.0)]);
        let five = with(&[
            (joint::SHOULDER_FLEXION, 120.0),
            (joint::SHOULDER_ABDUCTION, 60.0),
            (joint::ELBOW_FLEXION, 30.0),
            (joint::WRIST_FLEXION, 30.0),
            (joint::WRIST_DEVIATION, -15.0),
            (joint::FOREARM_PRONATION, 60.0),
        ]);
        let d = score_distribution(&set(&[three, five], &[0.5, 0.5]), &RulaAssumptions::default());
        assert!((d.expected - 4.0).abs() < 1e-12);
        assert!((d.std - 1.0).abs() < 1e-12);
        assert!((d.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn grand(g: u8) -> RulaScore {
        let mut s = score_posture(&neutral(), &RulaAssumptions::default());
        s.grand = g;
        s
    }

    #[test]
    fn max_score_picks_earliest_maximum() {
        let scores: Vec<_> = [2, 3, 7, 3].into_iter().map(grand).collect();
        assert_eq!(max_score(&scores).unwrap().0, 2);
        let tied: Vec<_> = [2, 5, 1, 5].into_iter().map(grand).collect();
        assert_eq!(max_score(&tied).unwrap().0, 1);
        let flat: Vec<_> = [4, 4, 4].into_iter().map(grand).collect();
        assert_eq!(max_score(&flat).unwrap(), (0, grand(4)));
        assert!(max_score(&[]).is_err());
    }

    #[test]
    fn action_levels() {
        let levels: Vec<u8> = (1..=7).map(action_level).collect();
        assert_eq!(levels, vec![1, 1, 2, 2, 3, 3, 4]);
    }
}
