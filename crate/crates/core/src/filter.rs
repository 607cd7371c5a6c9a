//! Particle filter over joint angles and velocities.
//!
//! Each step propagates every particle through the motion model, multiplies
//! its weight by the observation likelihood times the posture validity,
//! normalizes in log space and resamples systematically once the effective
//! sample size falls below `resample_threshold · M`.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_within_limits, MotionNoise};
use crate::error::{Error, Result};
use crate::likelihood::{innovation, log_weight, ObservationNoise, ValidityFn};
use crate::model::{HumanModel, JointVector, PostureState, StylusObservation, NUM_JOINTS};

/// How the initial particle cloud is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Truncated normal around the neutral posture.
    Neutral,
    /// Uniform over the joint-limit box.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Particle count M.
    pub m: usize,
    /// Initial standard deviation per joint as a fraction of its range of motion.
    pub sigma0_scale: f64,
    pub init: InitMode,
    pub motion: MotionNoise,
    pub obs_noise: ObservationNoise,
    /// Resample when ESS < resample_threshold · M.
    pub resample_threshold: f64,
    /// Width of the box-validity ramp in radians; `None` disables validity.
    pub validity_margin: Option<f64>,
    /// Fraction of particles redrawn from the prior when all weights vanish.
    pub reinject_fraction: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            m: 500,
            sigma0_scale: 0.2,
            init: InitMode::Neutral,
            motion: MotionNoise::reference(),
            obs_noise: ObservationNoise::reference(),
            resample_threshold: 0.5,
            validity_margin: Some(0.05),
            reinject_fraction: 0.1,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("particle count must be > 0".into()));
        }
        if !(self.sigma0_scale.is_finite() && self.sigma0_scale >= 0.0) {
            return Err(Error::Config("sigma0_scale must be >= 0".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Config("resample_threshold must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.reinject_fraction) {
            return Err(Error::Config("reinject_fraction must be in [0, 1]".into()));
        }
        if let Some(m) = self.validity_margin {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Config("validity_margin must be >= 0".into()));
            }
        }
        self.motion.validate()?;
        self.obs_noise.validate()
    }
}

/// Weighted posture hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub states: Vec<PostureState>,
    /// Normalized: `Σ exp(log_weights) = 1`.
    pub log_weights: Vec<f64>,
    pub ess: f64,
}

impl ParticleSet {
    pub fn uniform(states: Vec<PostureState>) -> Self {
        let m = states.len();
        let lw = -(m as f64).ln();
        Self {
            states,
            log_weights: vec![lw; m],
            ess: m as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Normalizes the log weights with max subtraction and updates the ESS.
    /// Returns `false` when every weight is zero.
    pub fn normalize(&mut self) -> bool {
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return false;
        }
        let sum: f64 = self.log_weights.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        let mut sq = 0.0;
        for l in self.log_weights.iter_mut() {
            *l -= log_norm;
            let w = l.exp();
            sq += w * w;
        }
        self.ess = (1.0 / sq).min(self.len() as f64);
        true
    }

    pub fn argmax(&self) -> usize {
        self.log_weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
            .0
    }

    /// Weighted mean and standard deviation of the joint angles.
    pub fn moments(&self) -> (JointVector, JointVector) {
        let mut mean = JointVector::zeros();
        for (s, l) in self.states.iter().zip(&self.log_weights) {
            mean += s.q * l.exp();
        }
        let mut var = JointVector::zeros();
        for (s, l) in self.states.iter().zip(&self.log_weights) {
            let d = s.q - mean;
            var += d.component_mul(&d) * l.exp();
        }
        (mean, var.map(|v| v.max(0.0).sqrt()))
    }

    /// Systematic resampling; leaves uniform weights and ESS = M.
    pub fn resample_systematic<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let idx = systematic_indices(&self.weights(), rng);
        self.states = idx.into_iter().map(|i| self.states[i]).collect();
        let m = self.states.len();
        self.log_weights = vec![-(m as f64).ln(); m];
        self.ess = m as f64;
    }
}

/// Indices selected by systematic resampling of normalized `weights`.
pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let m = weights.len();
    let step = 1.0 / m as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(m);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..m {
        while u > cum && i + 1 < m {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

/// Point summary of the particle cloud at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureEstimate {
    pub timestamp: f64,
    /// Highest-weight particle.
    pub map_q: [f64; NUM_JOINTS],
    pub map_qdot: [f64; NUM_JOINTS],
    pub mean_q: [f64; NUM_JOINTS],
    pub std_q: [f64; NUM_JOINTS],
    pub ess: f64,
}

impl PostureEstimate {
    pub fn map_state(&self) -> PostureState {
        PostureState {
            q: JointVector::from(self.map_q),
            qdot: JointVector::from(self.map_qdot),
        }
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(lo, hi);
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + std * z;
        if x >= lo && x <= hi {
            return x;
        }
    }
}

/// Draws the initial cloud: q from the configured prior, q̇ = 0, uniform weights.
pub fn initialize<R: Rng + ?Sized>(model: &HumanModel, cfg: &FilterConfig, rng: &mut R) -> ParticleSet {
    let std = model.layout.range_of_motion() * cfg.sigma0_scale;
    let states = (0..cfg.m)
        .map(|_| PostureState::at_rest(sample_prior(model, cfg.init, &model.neutral_posture, &std, rng)))
        .collect();
    ParticleSet::uniform(states)
}

fn sample_prior<R: Rng + ?Sized>(
    model: &HumanModel,
    mode: InitMode,
    mean: &JointVector,
    std: &JointVector,
    rng: &mut R,
) -> JointVector {
    let lo = model.limits_lo();
    let hi = model.limits_hi();
    JointVector::from_fn(|i, _| match mode {
        InitMode::Neutral => truncated_normal(rng, mean[i].clamp(lo[i], hi[i]), std[i], lo[i], hi[i]),
        InitMode::Uniform => rng.random_range(lo[i]..=hi[i]),
    })
}

/// Builds the validity function named by the config.
pub fn validity_from_config(model: &HumanModel, cfg: &FilterConfig) -> Box<dyn ValidityFn> {
    match cfg.validity_margin {
        Some(m) => Box::new(crate::likelihood::BoxValidity::new(model, m)),
        None => Box::new(crate::likelihood::AlwaysValid),
    }
}

/// Single-owner filter state.
pub struct ParticleFilter<'a> {
    model: Cow<'a, HumanModel>,
    cfg: FilterConfig,
    particles: ParticleSet,
    rng: ChaCha8Rng,
    last_t: Option<f64>,
    steps: usize,
    last_estimate: Option<PostureEstimate>,
    degenerate_events: usize,
}

impl<'a> ParticleFilter<'a> {
    pub fn new(model: &'a HumanModel, cfg: FilterConfig) -> Result<Self> {
        Self::with_model(Cow::Borrowed(model), cfg)
    }

    /// A filter that owns its model.
    pub fn owned(model: HumanModel, cfg: FilterConfig) -> Result<ParticleFilter<'static>> {
        ParticleFilter::with_model(Cow::Owned(model), cfg)
    }

    fn with_model(model: Cow<'a, HumanModel>, cfg: FilterConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let particles = initialize(&model, &cfg, &mut rng);
        Ok(Self {
            model,
            cfg,
            particles,
            rng,
            last_t: None,
            steps: 0,
            last_estimate: None,
            degenerate_events: 0,
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn degenerate_events(&self) -> usize {
        self.degenerate_events
    }

    /// Processes one observation. The first observation weights the initial
    /// cloud directly; later ones propagate by the elapsed time first.
    pub fn step(&mut self, obs: &StylusObservation, validity: &dyn ValidityFn) -> Result<PostureEstimate> {
        if !obs.t.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite timestamp at step {}", self.steps)));
        }
        if let Some(prev) = self.last_t {
            if obs.t <= prev {
                return Err(Error::OutOfOrder { index: self.steps });
            }
            let noise = self.cfg.motion.rescaled(obs.t - prev);
            for s in self.particles.states.iter_mut() {
                *s = propagate_within_limits(&self.model, s, &noise, &mut self.rng);
            }
        }
        self.last_t = Some(obs.t);
        let step = self.steps;
        self.steps += 1;

        for (s, lw) in self.particles.states.iter().zip(self.particles.log_weights.iter_mut()) {
            let r = innovation(&self.model, s, obs)?;
            *lw += log_weight(&r, &self.cfg.obs_noise, validity.validity(&s.q));
        }
        if !self.particles.normalize() {
            self.recover_from_degeneracy();
            self.degenerate_events += 1;
            log::warn!("filter degenerate at step {step}; re-injected particles from the prior");
            return Err(Error::DegenerateFilter {
                step,
                last_estimate: self.last_estimate.clone().map(Box::new),
            });
        }

        let estimate = self.estimate(obs.t);
        if self.particles.ess < self.cfg.resample_threshold * self.particles.len() as f64 {
            self.particles.resample_systematic(&mut self.rng);
        }
        self.last_estimate = Some(estimate.clone());
        Ok(estimate)
    }

    fn estimate(&self, t: f64) -> PostureEstimate {
        let best = self.particles.states[self.particles.argmax()];
        let (mean, std) = self.particles.moments();
        PostureEstimate {
            timestamp: t,
            map_q: best.q.into(),
            map_qdot: best.qdot.into(),
            mean_q: mean.into(),
            std_q: std.into(),
            ess: self.particles.ess,
        }
    }

    /// Clamps the cloud, redraws a fraction of it around the last valid mean
    /// and resets to uniform weights.
    fn recover_from_degeneracy(&mut self) {
        let model: &HumanModel = &self.model;
        let center = self
            .last_estimate
            .as_ref()
            .map(|e| JointVector::from(e.mean_q))
            .unwrap_or(model.neutral_posture);
        let std = model.layout.range_of_motion() * self.cfg.sigma0_scale;
        let m = self.particles.len();
        let n_new = ((m as f64) * self.cfg.reinject_fraction).round() as usize;
        for (k, s) in self.particles.states.iter_mut().enumerate() {
            if k < n_new {
                *s = PostureState::at_rest(sample_prior(model, InitMode::Neutral, &center, &std, &mut self.rng));
            } else {
                s.q = model.clamp_posture(&s.q);
            }
        }
        self.particles = ParticleSet::uniform(std::mem::take(&mut self.particles.states));
    }

    /// Pull-style consumption: one estimate per incoming observation.
    pub fn estimates<'v, I>(&'v mut self, observations: I, validity: &'v dyn ValidityFn) -> Estimates<'v, 'a, I::IntoIter>
    where
        I: IntoIterator<Item = StylusObservation>,
    {
        Estimates {
            filter: self,
            inner: observations.into_iter(),
            validity,
        }
    }
}

/// Iterator returned by [`ParticleFilter::estimates`].
pub struct Estimates<'v, 'a, I> {
    filter: &'v mut ParticleFilter<'a>,
    inner: I,
    validity: &'v dyn ValidityFn,
}

impl<I: Iterator<Item = StylusObservation>> Iterator for Estimates<'_, '_, I> {
    type Item = Result<PostureEstimate>;

    fn next(&mut self) -> Option<Self::Item> {
        let obs = self.inner.next()?;
        Some(self.filter.step(&obs, self.validity))
    }
}

/// Batch run: one estimate per observation.
///
/// Timestamps are checked up front. A degenerate step emits the last valid
/// estimate (re-stamped) and the filter continues from its recovered cloud.
pub fn run(
    observations: &[StylusObservation],
    model: &HumanModel,
    cfg: &FilterConfig,
    validity: &dyn ValidityFn,
) -> Result<Vec<PostureEstimate>> {
    for (i, w) in observations.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::OutOfOrder { index: i + 1 });
        }
    }
    let mut pf = ParticleFilter::new(model, cfg.clone())?;
    let mut out = Vec::with_capacity(observations.len());
    for obs in observations {
        match pf.step(obs, validity) {
            Ok(e) => out.push(e),
            Err(Error::DegenerateFilter { last_estimate, .. }) => {
                let mut e = match last_estimate {
                    Some(e) => *e,
                    None => {
                        let q = model.neutral_posture;
                        PostureEstimate {
                            timestamp: obs.t,
                            map_q: q.into(),
                            map_qdot: [0.0; NUM_JOINTS],
                            mean_q: q.into(),
                            std_q: [0.0; NUM_JOINTS],
                            ess: 0.0,
                        }
                    }
                };
                e.timestamp = obs.t;
                out.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Sarle's bimodality coefficient of weighted samples; values above 5/9
/// suggest more than one mode.
pub fn bimodality_coefficient(values: &[f64], weights: &[f64]) -> f64 {
    let n = values.len() as f64;
    let wsum: f64 = weights.iter().sum();
    let mean = values.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / wsum;
    let moment = |k: i32| values.iter().zip(weights).map(|(x, w)| w * (x - mean).powi(k)).sum::<f64>() / wsum;
    let m2 = moment(2);
    if m2 <= 0.0 || n < 4.0 {
        return 0.0;
    }
    let skew = moment(3) / m2.powf(1.5);
    let excess = moment(4) / (m2 * m2) - 3.0;
    (skew * skew + 1.0) / (excess + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
}
