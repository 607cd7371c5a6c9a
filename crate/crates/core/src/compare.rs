//! Agreement between two posture trajectories: per-joint absolute deviation
//! statistics and RULA agreement of their maximum scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JointVector, JOINT_NAMES, NUM_JOINTS};
use crate::rula::{action_level, max_score, score_posture, RulaAssumptions};

/// RULA grand scores above this call for investigation.
pub const ALERT_ABOVE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

/// Quartiles by linear interpolation between order statistics.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no values to summarize".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Ok(Summary {
        q1: at(0.25),
        median: at(0.5),
        q3: at(0.75),
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDeviation {
    pub joint: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub per_joint: Vec<JointDeviation>,
    pub pooled: Summary,
}

/// `|a_t − b_t|` per joint, all joints pooled.
pub fn abs_deviations(a: &[JointVector], b: &[JointVector]) -> Result<Vec<[f64; NUM_JOINTS]>> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "trajectories differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| std::array::from_fn(|i| (x[i] - y[i]).abs()))
        .collect())
}

pub fn deviation_report(a: &[JointVector], b: &[JointVector]) -> Result<DeviationReport> {
    let d = abs_deviations(a, b)?;
    let per_joint = (0..NUM_JOINTS)
        .map(|i| {
            let col: Vec<f64> = d.iter().map(|r| r[i]).collect();
            Ok(JointDeviation {
                joint: JOINT_NAMES[i].to_string(),
                summary: summarize(&col)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = d.iter().flatten().copied().collect();
    Ok(DeviationReport {
        per_joint,
        pooled: summarize(&pooled)?,
    })
}

/// Maximum-score agreement for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulaAgreement {
    pub reference_max: u8,
    pub estimate_max: u8,
    pub same_grand: bool,
    pub same_action_level: bool,
    /// Reference maximum above [`ALERT_ABOVE`].
    pub reference_alert: bool,
    pub estimate_alert: bool,
}

pub fn rula_agreement(
    reference: &[JointVector],
    estimate: &[JointVector],
    assume: &RulaAssumptions,
) -> Result<RulaAgreement> {
    let score = |traj: &[JointVector]| {
        let s: Vec<_> = traj.iter().map(|q| score_posture(q, assume)).collect();
        max_score(&s).map(|(_, m)| m.grand)
    };
    let r = score(reference)?;
    let e = score(estimate)?;
    Ok(RulaAgreement {
        reference_max: r,
        estimate_max: e,
        same_grand: r == e,
        same_action_level: action_level(r) == action_level(e),
        reference_alert: r > ALERT_ABOVE,
        estimate_alert: e > ALERT_ABOVE,
    })
}

/// Rates over many trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementRates {
    pub trials: usize,
    pub same_grand: f64,
    pub same_action_level: f64,
    /// Fraction of reference alerts the estimate also raised; 1 when the
    /// reference never alerts.
    pub alert_recall: f64,
}

pub fn agreement_rates(trials: &[RulaAgreement]) -> AgreementRates {
    let n = trials.len().max(1) as f64;
    let alerts = trials.iter().filter(|t| t.reference_alert).count();
    let caught = trials.iter().filter(|t| t.reference_alert && t.estimate_alert).count();
    AgreementRates {
        trials: trials.len(),
        same_grand: trials.iter().filter(|t| t.same_grand).count() as f64 / n,
        same_action_level: trials.iter().filter(|t| t.same_action_level).count() as f64 / n,
        alert_recall: if alerts == 0 { 1.0 } else { caught as f64 / alerts as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub format_version: u32,
    pub steps: usize,
    pub deviation: DeviationReport,
    pub rula: RulaAgreement,
}

pub fn compare(
    reference: &[JointVector],
    estimate: &[JointVector],
    assume: &RulaAssumptions,
) -> Result<CompareReport> {
    Ok(CompareReport {
        format_version: crate::io::FORMAT_VERSION,
        steps: reference.len(),
        deviation: deviation_report(estimate, reference)?,
        rula: rula_agreement(reference, estimate, assume)?,
    })
}
