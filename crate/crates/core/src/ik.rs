//! Least-squares IK baselines over the joint-space trajectory.
//!
//! Both baselines minimize
//!
//! ```text
//! Σ_t ‖φ(q_t, q̇_t) − z_t‖²_Σ1 + ‖x_t − F x_{t−1}‖²_Σ2,   q_min ≤ q_t ≤ q_max
//! ```
//!
//! with `x_t = [q_t; q̇_t]` and `F x = [q + q̇ dt; q̇]`, the deterministic part
//! of the motion model. The first step has no motion term. Online-IK solves
//! one step at a time with the previous solution fixed; Offline-TrajIK
//! solves all steps jointly, exploiting the block-tridiagonal normal matrix.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::MotionNoise;
use crate::error::{Error, Result};
use crate::likelihood::{ObservationNoise, OBS_DIM};
use crate::lsq::{self, DenseLinearization, LeastSquaresProblem, Linearization, SolverOptions};
use crate::model::{velocity_jacobian, HumanModel, JointVector, PostureState, StylusObservation, NUM_JOINTS};
use crate::rotation::{left_jacobian_inv, rotation_error};

pub const STATE_DIM: usize = 2 * NUM_JOINTS;
type StateVec = SVector<f64, STATE_DIM>;
type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;
type ObsJac = SMatrix<f64, OBS_DIM, STATE_DIM>;

/// Configuration-file view of the IK settings. Missing weights are derived
/// from the filter's Σ_K and Σ_v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkSettings {
    pub sigma1: Option<[f64; OBS_DIM]>,
    pub sigma2: Option<Vec<f64>>,
    /// Multiplies the motion-derived Σ_2 when `sigma2` is unset. The raw
    /// motion covariance makes the one-step solve lag far behind the stylus.
    pub sigma2_scale: f64,
    /// Solver iterations per Online-IK step.
    pub max_iters: usize,
    /// Solver iterations for the whole-trajectory problem.
    pub offline_max_iters: usize,
    pub tol: f64,
    /// Extra perturbed starts per solve ("boosting").
    pub restarts: usize,
    pub restart_std: f64,
    pub seed: u64,
    /// Optional per-joint variance of a weak pull towards the neutral posture.
    pub posture_prior: Option<[f64; NUM_JOINTS]>,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            sigma1: None,
            sigma2: None,
            sigma2_scale: 100.0,
            max_iters: 100,
            offline_max_iters: 50,
            tol: 1e-10,
            restarts: 3,
            restart_std: 0.05,
            seed: 0,
            posture_prior: None,
        }
    }
}

impl IkSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.offline_max_iters == 0 {
            return Err(Error::Config("ik max_iters must be > 0".into()));
        }
        if !(self.sigma2_scale > 0.0 && self.sigma2_scale.is_finite()) {
            return Err(Error::Config("ik sigma2_scale must be positive".into()));
        }
        if let Some(s) = &self.sigma1 {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("ik sigma1 must be positive".into()));
            }
        }
        if let Some(s) = &self.sigma2 {
            if s.len() != STATE_DIM || s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("ik sigma2 must have {STATE_DIM} positive entries")));
            }
        }
        Ok(())
    }

    /// Concrete weights for a trajectory sampled every `dt` seconds.
    pub fn resolve(&self, obs_noise: &ObservationNoise, motion: &MotionNoise, dt: f64) -> Result<IkConfig> {
        self.validate()?;
        let sigma1 = self.sigma1.unwrap_or(obs_noise.sigma_k);
        let sigma2 = match &self.sigma2 {
            Some(v) => {
                let mut a = [0.0; STATE_DIM];
                a.copy_from_slice(v);
                a
            }
            None => sigma2_from_motion(motion, dt).map(|v| v * self.sigma2_scale),
        };
        let cfg = IkConfig {
            sigma1,
            sigma2,
            max_iters: self.max_iters,
            offline_max_iters: self.offline_max_iters,
            tol: self.tol,
            restarts: self.restarts,
            restart_std: self.restart_std,
            seed: self.seed,
            posture_prior: self.posture_prior,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Motion-term covariance implied by the motion model: `Σ_v dt²` on the
/// angle block and `Σ_v` on the velocity block, with Σ_v taken at step `dt`.
pub fn sigma2_from_motion(motion: &MotionNoise, dt: f64) -> [f64; STATE_DIM] {
    let m = motion.rescaled(dt);
    let mut s = [0.0; STATE_DIM];
    for i in 0..NUM_JOINTS {
        let v = m.sigma_v[i].max(1e-12);
        s[i] = v * dt * dt;
        s[NUM_JOINTS + i] = v;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkConfig {
    /// Diagonal of Σ_1 (observation term).
    pub sigma1: [f64; OBS_DIM],
    /// Diagonal of Σ_2 (motion term).
    pub sigma2: [f64; STATE_DIM],
    pub max_iters: usize,
    pub offline_max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub restart_std: f64,
    pub seed: u64,
    /// Diagonal variance of an extra `q − q_neutral` term; `None` leaves the
    /// objective as above.
    pub posture_prior: Option<[f64; NUM_JOINTS]>,
}

impl IkConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .sigma1
            .iter()
            .chain(self.sigma2.iter())
            .chain(self.posture_prior.iter().flatten())
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::Config("ik weights must be positive".into()));
        }
        if self.max_iters == 0 || self.offline_max_iters == 0 {
            return Err(Error::Config("ik max_iters must be > 0".into()));
        }
        Ok(())
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.max_iters,
            xtol: self.tol,
            ftol: self.tol * 1e-2,
            gtol: self.tol,
        }
    }

    fn w1(&self) -> SVector<f64, OBS_DIM> {
        SVector::from_fn(|i, _| 1.0 / self.sigma1[i].sqrt())
    }

    fn w2(&self) -> StateVec {
        StateVec::from_fn(|i, _| 1.0 / self.sigma2[i].sqrt())
    }

    fn w_prior(&self) -> Option<JointVector> {
        self.posture_prior
            .map(|p| JointVector::from_fn(|i, _| 1.0 / p[i].sqrt()))
    }
}

/// Weighted `q − q_neutral`, if the prior is enabled.
fn prior_residual(model: &HumanModel, w: &JointVector, q: &[f64]) -> JointVector {
    JointVector::from_fn(|i, _| w[i] * (q[i] - model.neutral_posture[i]))
}

fn pack(s: &PostureState) -> StateVec {
    let mut x = StateVec::zeros();
    x.fixed_rows_mut::<NUM_JOINTS>(0).copy_from(&s.q);
    x.fixed_rows_mut::<NUM_JOINTS>(NUM_JOINTS).copy_from(&s.qdot);
    x
}

fn unpack(x: &[f64]) -> PostureState {
    PostureState {
        q: JointVector::from_column_slice(&x[..NUM_JOINTS]),
        qdot: JointVector::from_column_slice(&x[NUM_JOINTS..STATE_DIM]),
    }
}

/// `F x`: deterministic constant-velocity prediction over `dt`.
fn predict(x: &StateVec, dt: f64) -> StateVec {
    let mut out = *x;
    for i in 0..NUM_JOINTS {
        out[i] += x[NUM_JOINTS + i] * dt;
    }
    out
}

fn transition(dt: f64) -> StateMat {
    let mut f = StateMat::identity();
    for i in 0..NUM_JOINTS {
        f[(i, NUM_JOINTS + i)] = dt;
    }
    f
}

/// Weighted observation residual `Σ1^{-1/2}(φ(x) − z)` and its Jacobian.
pub fn observation_term(
    model: &HumanModel,
    cfg: &IkConfig,
    state: &PostureState,
    obs: &StylusObservation,
) -> (SVector<f64, OBS_DIM>, ObsJac) {
    let frames = model.frames(&state.q);
    let jac = crate::model::jacobian_from_frames(&frames);
    let twist = jac * state.qdot;
    let dtwist = velocity_jacobian(&frames, &state.qdot);
    let ori = rotation_error(&frames.tip.orientation, &obs.pose.orientation);
    let mut r = SVector::<f64, OBS_DIM>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(frames.tip.position - obs.pose.position));
    r.fixed_rows_mut::<3>(3).copy_from(&ori);
    r.fixed_rows_mut::<3>(6).copy_from(&(twist.fixed_rows::<3>(0) - obs.velocity.linear));
    r.fixed_rows_mut::<3>(9).copy_from(&(twist.fixed_rows::<3>(3) - obs.velocity.angular));

    let mut a = ObsJac::zeros();
    a.fixed_view_mut::<3, NUM_JOINTS>(0, 0).copy_from(&jac.fixed_rows::<3>(0));
    a.fixed_view_mut::<3, NUM_JOINTS>(3, 0)
        .copy_from(&(left_jacobian_inv(&ori) * jac.fixed_rows::<3>(3)));
    a.fixed_view_mut::<6, NUM_JOINTS>(6, 0).copy_from(&dtwist);
    a.fixed_view_mut::<6, NUM_JOINTS>(6, NUM_JOINTS).copy_from(&jac);

    let w = cfg.w1();
    for k in 0..OBS_DIM {
        r[k] *= w[k];
        for c in 0..STATE_DIM {
            a[(k, c)] *= w[k];
        }
    }
    (r, a)
}

fn bounds(model: &HumanModel, steps: usize) -> (DVector<f64>, DVector<f64>) {
    let n = steps * STATE_DIM;
    let lo = DVector::from_fn(n, |i, _| {
        let k = i % STATE_DIM;
        if k < NUM_JOINTS {
            model.layout.limits_lo[k]
        } else {
            f64::NEG_INFINITY
        }
    });
    let hi = DVector::from_fn(n, |i, _| {
        let k = i % STATE_DIM;
        if k < NUM_JOINTS {
            model.layout.limits_hi[k]
        } else {
            f64::INFINITY
        }
    });
    (lo, hi)
}

// ---------------------------------------------------------------------------
// single step

struct StepProblem<'a> {
    model: &'a HumanModel,
    cfg: &'a IkConfig,
    obs: &'a StylusObservation,
    /// Previous state and step length, if any.
    prev: Option<(StateVec, f64)>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl StepProblem<'_> {
    fn rows(&self) -> usize {
        OBS_DIM
            + if self.prev.is_some() { STATE_DIM } else { 0 }
            + if self.cfg.posture_prior.is_some() { NUM_JOINTS } else { 0 }
    }

    fn residual_and_jacobian(&self, x: &DVector<f64>, want_jac: bool) -> (DVector<f64>, DMatrix<f64>) {
        let s = unpack(x.as_slice());
        let (ro, ao) = observation_term(self.model, self.cfg, &s, self.obs);
        let mut r = DVector::zeros(self.rows());
        let mut j = if want_jac {
            DMatrix::zeros(self.rows(), STATE_DIM)
        } else {
            DMatrix::zeros(0, 0)
        };
        r.rows_mut(0, OBS_DIM).copy_from(&ro);
        if want_jac {
            j.view_mut((0, 0), (OBS_DIM, STATE_DIM)).copy_from(&ao);
        }
        if let Some((prev, dt)) = &self.prev {
            let w = self.cfg.w2();
            let m = (pack(&s) - predict(prev, *dt)).component_mul(&w);
            r.rows_mut(OBS_DIM, STATE_DIM).copy_from(&m);
            if want_jac {
                for k in 0..STATE_DIM {
                    j[(OBS_DIM + k, k)] = w[k];
                }
            }
        }
        if let Some(w) = self.cfg.w_prior() {
            let row = self.rows() - NUM_JOINTS;
            r.rows_mut(row, NUM_JOINTS)
                .copy_from(&prior_residual(self.model, &w, x.as_slice()));
            if want_jac {
                for k in 0..NUM_JOINTS {
                    j[(row + k, k)] = w[k];
                }
            }
        }
        (r, j)
    }
}

impl LeastSquaresProblem for StepProblem<'_> {
    type Lin = DenseLinearization;

    fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.residual_and_jacobian(x, false).0.norm_squared()
    }

    fn linearize(&self, x: &DVector<f64>) -> DenseLinearization {
        let (residual, jacobian) = self.residual_and_jacobian(x, true);
        DenseLinearization { jacobian, residual }
    }
}

/// Per-step solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    /// ‖φ(q̂) − z‖ in meters.
    pub position_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    pub method: String,
    pub steps: Vec<StepDiagnostics>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct IkSolution {
    pub states: Vec<PostureState>,
    pub report: IkReport,
}

fn check_stream(traj: &[StylusObservation]) -> Result<()> {
    for (i, w) in traj.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::OutOfOrder { index: i + 1 });
        }
    }
    Ok(())
}

fn position_error(model: &HumanModel, s: &PostureState, obs: &StylusObservation) -> f64 {
    (model.frames(&s.q).tip.position - obs.pose.position).norm()
}

/// Online-IK: each step solved with the previous solution fixed and used as
/// the warm start, plus `restarts` perturbed starts; the best is kept.
pub fn online_ik(traj: &[StylusObservation], model: &HumanModel, cfg: &IkConfig) -> Result<IkSolution> {
    cfg.validate()?;
    check_stream(traj)?;
    let (lower, upper) = bounds(model, 1);
    let opts = cfg.solver_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let perturb = Normal::new(0.0, cfg.restart_std.max(0.0)).expect("finite std");
    let mut prev = pack(&PostureState::at_rest(model.neutral_posture));
    let mut states = Vec::with_capacity(traj.len());
    let mut steps = Vec::with_capacity(traj.len());
    let mut objective = 0.0;
    let mut total_iters = 0;

    for (t, obs) in traj.iter().enumerate() {
        let dt = if t > 0 { obs.t - traj[t - 1].t } else { 0.0 };
        let problem = StepProblem {
            model,
            cfg,
            obs,
            prev: (t > 0).then_some((prev, dt)),
            lower: lower.clone(),
            upper: upper.clone(),
        };
        let warm = if t > 0 { predict(&prev, dt) } else { prev };
        let warm = DVector::from_column_slice(warm.as_slice());
        let mut best = lsq::solve(&problem, &warm, &opts);
        let mut iters = best.iterations;
        for _ in 0..cfg.restarts {
            let mut start = warm.clone();
            for i in 0..NUM_JOINTS {
                start[i] += perturb.sample(&mut rng);
            }
            let candidate = lsq::solve(&problem, &start, &opts);
            iters += candidate.iterations;
            if candidate.cost < best.cost {
                best = candidate;
            }
        }
        let s = unpack(best.x.as_slice());
        if !best.converged {
            log::debug!("online IK did not converge at step {t}");
        }
        steps.push(StepDiagnostics {
            iterations: iters,
            converged: best.converged,
            cost: best.cost,
            position_error: position_error(model, &s, obs),
        });
        objective += best.cost;
        total_iters += iters;
        prev = best.x.fixed_rows::<STATE_DIM>(0).into_owned();
        states.push(s);
    }
    let converged = steps.iter().all(|s| s.converged);
    Ok(IkSolution {
        states,
        report: IkReport {
            method: "online".into(),
            steps,
            objective,
            iterations: total_iters,
            converged,
        },
    })
}

// ---------------------------------------------------------------------------
// whole trajectory

/// The joint objective over all steps.
pub struct TrajectoryProblem<'a> {
    model: &'a HumanModel,
    cfg: &'a IkConfig,
    traj: &'a [StylusObservation],
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl<'a> TrajectoryProblem<'a> {
    pub fn new(model: &'a HumanModel, cfg: &'a IkConfig, traj: &'a [StylusObservation]) -> Self {
        let (lower, upper) = bounds(model, traj.len());
        Self {
            model,
            cfg,
            traj,
            lower,
            upper,
        }
    }

    fn dt(&self, t: usize) -> f64 {
        self.traj[t].t - self.traj[t - 1].t
    }

    fn block(x: &DVector<f64>, t: usize) -> StateVec {
        x.fixed_rows::<STATE_DIM>(t * STATE_DIM).into_owned()
    }

    fn motion_residual(&self, x: &DVector<f64>, t: usize) -> StateVec {
        let w = self.cfg.w2();
        (Self::block(x, t) - predict(&Self::block(x, t - 1), self.dt(t))).component_mul(&w)
    }

    fn rows(&self) -> usize {
        let n = self.traj.len();
        n * OBS_DIM
            + n.saturating_sub(1) * STATE_DIM
            + if self.cfg.posture_prior.is_some() { n * NUM_JOINTS } else { 0 }
    }

    /// Stacked residual: all observation terms, then all motion terms, then
    /// the posture prior if enabled.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.traj.len();
        let rows = self.rows();
        let mut r = DVector::zeros(rows);
        for t in 0..n {
            let s = unpack(&x.as_slice()[t * STATE_DIM..(t + 1) * STATE_DIM]);
            let (ro, _) = observation_term(self.model, self.cfg, &s, &self.traj[t]);
            r.rows_mut(t * OBS_DIM, OBS_DIM).copy_from(&ro);
        }
        for t in 1..n {
            r.rows_mut(n * OBS_DIM + (t - 1) * STATE_DIM, STATE_DIM)
                .copy_from(&self.motion_residual(x, t));
        }
        if let Some(w) = self.cfg.w_prior() {
            let base = n * OBS_DIM + n.saturating_sub(1) * STATE_DIM;
            for t in 0..n {
                let q = &x.as_slice()[t * STATE_DIM..t * STATE_DIM + NUM_JOINTS];
                r.rows_mut(base + t * NUM_JOINTS, NUM_JOINTS)
                    .copy_from(&prior_residual(self.model, &w, q));
            }
        }
        r
    }

    /// Dense Jacobian of [`Self::residual`]; meant for short trajectories.
    pub fn dense_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.traj.len();
        let mut j = DMatrix::zeros(self.rows(), n * STATE_DIM);
        for t in 0..n {
            let s = unpack(&x.as_slice()[t * STATE_DIM..(t + 1) * STATE_DIM]);
            let (_, a) = observation_term(self.model, self.cfg, &s, &self.traj[t]);
            j.view_mut((t * OBS_DIM, t * STATE_DIM), (OBS_DIM, STATE_DIM)).copy_from(&a);
        }
        let w = self.cfg.w2();
        for t in 1..n {
            let row = n * OBS_DIM + (t - 1) * STATE_DIM;
            let wf = StateMat::from_diagonal(&w) * transition(self.dt(t));
            j.view_mut((row, t * STATE_DIM), (STATE_DIM, STATE_DIM))
                .copy_from(&StateMat::from_diagonal(&w));
            j.view_mut((row, (t - 1) * STATE_DIM), (STATE_DIM, STATE_DIM)).copy_from(&(-wf));
        }
        if let Some(wp) = self.cfg.w_prior() {
            let base = n * OBS_DIM + n.saturating_sub(1) * STATE_DIM;
            for t in 0..n {
                for k in 0..NUM_JOINTS {
                    j[(base + t * NUM_JOINTS + k, t * STATE_DIM + k)] = wp[k];
                }
            }
        }
        j
    }

    pub fn objective(&self, states: &[PostureState]) -> f64 {
        self.cost(&flatten(states))
    }
}

/// Block-tridiagonal Gauss-Newton linearization of the trajectory problem.
pub struct BandedLinearization {
    obs_jac: Vec<ObsJac>,
    obs_res: Vec<SVector<f64, OBS_DIM>>,
    /// `W` and `W F_t` for each motion term t ≥ 1 (index t − 1).
    w: StateVec,
    f: Vec<StateMat>,
    mot_res: Vec<StateVec>,
    /// Posture-prior weights and weighted residuals per step.
    prior: Option<(JointVector, Vec<JointVector>)>,
}

impl BandedLinearization {
    fn steps(&self) -> usize {
        self.obs_jac.len()
    }

    fn vblock(v: &DVector<f64>, t: usize) -> StateVec {
        v.fixed_rows::<STATE_DIM>(t * STATE_DIM).into_owned()
    }

    fn motion_jv(&self, v: &DVector<f64>, t: usize) -> StateVec {
        (Self::vblock(v, t) - self.f[t - 1] * Self::vblock(v, t - 1)).component_mul(&self.w)
    }
}

impl Linearization for BandedLinearization {
    fn gradient(&self) -> DVector<f64> {
        let n = self.steps();
        let mut g = DVector::zeros(n * STATE_DIM);
        for t in 0..n {
            let gt = self.obs_jac[t].tr_mul(&self.obs_res[t]);
            let mut block = g.fixed_rows_mut::<STATE_DIM>(t * STATE_DIM);
            block += gt;
        }
        for t in 1..n {
            let wm = self.mot_res[t - 1].component_mul(&self.w);
            {
                let mut block = g.fixed_rows_mut::<STATE_DIM>(t * STATE_DIM);
                block += wm;
            }
            let back = self.f[t - 1].tr_mul(&wm);
            let mut block = g.fixed_rows_mut::<STATE_DIM>((t - 1) * STATE_DIM);
            block -= back;
        }
        if let Some((w, res)) = &self.prior {
            for (t, r) in res.iter().enumerate() {
                let mut block = g.fixed_rows_mut::<NUM_JOINTS>(t * STATE_DIM);
                block += r.component_mul(w);
            }
        }
        g
    }

    fn jv_norm_sq(&self, v: &DVector<f64>) -> f64 {
        let n = self.steps();
        let mut s = 0.0;
        for t in 0..n {
            s += (self.obs_jac[t] * Self::vblock(v, t)).norm_squared();
        }
        for t in 1..n {
            s += self.motion_jv(v, t).norm_squared();
        }
        if let Some((w, _)) = &self.prior {
            for t in 0..n {
                s += v.fixed_rows::<NUM_JOINTS>(t * STATE_DIM).component_mul(w).norm_squared();
            }
        }
        s
    }

    fn column_norms(&self) -> DVector<f64> {
        let n = self.steps();
        let mut sq = DVector::zeros(n * STATE_DIM);
        let w2 = self.w.component_mul(&self.w);
        for t in 0..n {
            let wf = (t + 1 < n).then(|| StateMat::from_diagonal(&self.w) * self.f[t]);
            for k in 0..STATE_DIM {
                let mut c = self.obs_jac[t].column(k).norm_squared();
                if t > 0 {
                    c += w2[k];
                }
                if let Some(wf) = &wf {
                    c += wf.column(k).norm_squared();
                }
                if let (Some((w, _)), true) = (&self.prior, k < NUM_JOINTS) {
                    c += w[k] * w[k];
                }
                sq[t * STATE_DIM + k] = c;
            }
        }
        sq.map(f64::sqrt)
    }

    fn gauss_newton_step(&self, free: &[bool]) -> DVector<f64> {
        let n = self.steps();
        let ww = StateMat::from_diagonal(&self.w.component_mul(&self.w));
        let mut diag: Vec<StateMat> = self.obs_jac.iter().map(|a| a.tr_mul(a)).collect();
        // lower[t] is the (t, t−1) block
        let mut lower: Vec<StateMat> = vec![StateMat::zeros(); n];
        for t in 1..n {
            let f = &self.f[t - 1];
            diag[t] += ww;
            diag[t - 1] += f.transpose() * ww * f;
            lower[t] = -(ww * f);
        }
        if let Some((w, _)) = &self.prior {
            for d in diag.iter_mut() {
                for k in 0..NUM_JOINTS {
                    d[(k, k)] += w[k] * w[k];
                }
            }
        }
        let mut dmax: f64 = 0.0;
        for (t, d) in diag.iter().enumerate() {
            for k in 0..STATE_DIM {
                if free[t * STATE_DIM + k] {
                    dmax = dmax.max(d[(k, k)]);
                }
            }
        }
        for d in diag.iter_mut() {
            for k in 0..STATE_DIM {
                d[(k, k)] += lsq::GN_REGULARIZATION * dmax;
            }
        }
        let g = self.gradient();
        let mut rhs: Vec<StateVec> = (0..n).map(|t| -Self::vblock(&g, t)).collect();
        for t in 0..n {
            for k in 0..STATE_DIM {
                if !free[t * STATE_DIM + k] {
                    for c in 0..STATE_DIM {
                        diag[t][(k, c)] = 0.0;
                        diag[t][(c, k)] = 0.0;
                        lower[t][(k, c)] = 0.0;
                        if t + 1 < n {
                            lower[t + 1][(c, k)] = 0.0;
                        }
                    }
                    diag[t][(k, k)] = 1.0;
                    rhs[t][k] = 0.0;
                }
            }
        }
        let p = solve_block_tridiagonal(&diag, &lower, &rhs);
        let mut out = DVector::zeros(n * STATE_DIM);
        for (t, b) in p.iter().enumerate() {
            out.fixed_rows_mut::<STATE_DIM>(t * STATE_DIM).copy_from(b);
        }
        out
    }
}

fn factor(m: &StateMat) -> nalgebra::Cholesky<f64, nalgebra::Const<STATE_DIM>> {
    if let Some(c) = m.cholesky() {
        return c;
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut eps = 1e-12 * scale;
    loop {
        if let Some(c) = (m + StateMat::identity() * eps).cholesky() {
            return c;
        }
        eps *= 10.0;
    }
}

/// Solves the symmetric block-tridiagonal system with diagonal blocks `diag`
/// and sub-diagonal blocks `lower[t] = H[t, t−1]` (block Cholesky/Thomas).
pub fn solve_block_tridiagonal(diag: &[StateMat], lower: &[StateMat], rhs: &[StateVec]) -> Vec<StateVec> {
    let n = diag.len();
    if n == 0 {
        return Vec::new();
    }
    let mut chol = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    chol.push(factor(&diag[0]));
    y.push(rhs[0]);
    for t in 1..n {
        let prev = &chol[t - 1];
        // S_t = D_t − L_t S_{t−1}^{-1} L_tᵀ
        let sinv_lt = prev.solve(&lower[t].transpose());
        let s = diag[t] - lower[t] * sinv_lt;
        let yt = rhs[t] - lower[t] * prev.solve(&y[t - 1]);
        chol.push(factor(&s));
        y.push(yt);
    }
    let mut x = vec![StateVec::zeros(); n];
    x[n - 1] = chol[n - 1].solve(&y[n - 1]);
    for t in (0..n - 1).rev() {
        x[t] = chol[t].solve(&(y[t] - lower[t + 1].transpose() * x[t + 1]));
    }
    x
}

impl LeastSquaresProblem for TrajectoryProblem<'_> {
    type Lin = BandedLinearization;

    fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.residual(x).norm_squared()
    }

    fn linearize(&self, x: &DVector<f64>) -> BandedLinearization {
        let n = self.traj.len();
        let mut obs_jac = Vec::with_capacity(n);
        let mut obs_res = Vec::with_capacity(n);
        for t in 0..n {
            let s = unpack(&x.as_slice()[t * STATE_DIM..(t + 1) * STATE_DIM]);
            let (r, a) = observation_term(self.model, self.cfg, &s, &self.traj[t]);
            obs_jac.push(a);
            obs_res.push(r);
        }
        BandedLinearization {
            obs_jac,
            obs_res,
            w: self.cfg.w2(),
            f: (1..n).map(|t| transition(self.dt(t))).collect(),
            mot_res: (1..n).map(|t| self.motion_residual(x, t)).collect(),
            prior: self.cfg.w_prior().map(|w| {
                let res = (0..n)
                    .map(|t| prior_residual(self.model, &w, &x.as_slice()[t * STATE_DIM..t * STATE_DIM + NUM_JOINTS]))
                    .collect();
                (w, res)
            }),
        }
    }
}

/// Dense-Jacobian view of the same problem (for short trajectories).
pub struct DenseTrajectoryProblem<'a>(pub TrajectoryProblem<'a>);

impl LeastSquaresProblem for DenseTrajectoryProblem<'_> {
    type Lin = DenseLinearization;

    fn lower(&self) -> &DVector<f64> {
        &self.0.lower
    }

    fn upper(&self) -> &DVector<f64> {
        &self.0.upper
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        self.0.cost(x)
    }

    fn linearize(&self, x: &DVector<f64>) -> DenseLinearization {
        DenseLinearization {
            jacobian: self.0.dense_jacobian(x),
            residual: self.0.residual(x),
        }
    }
}

/// Longest trajectory the dense solver path accepts.
pub const DENSE_MAX_STEPS: usize = 200;

pub fn flatten(states: &[PostureState]) -> DVector<f64> {
    let mut x = DVector::zeros(states.len() * STATE_DIM);
    for (t, s) in states.iter().enumerate() {
        x.fixed_rows_mut::<STATE_DIM>(t * STATE_DIM).copy_from(&pack(s));
    }
    x
}

fn unflatten(x: &DVector<f64>) -> Vec<PostureState> {
    x.as_slice().chunks(STATE_DIM).map(unpack).collect()
}

/// Offline-TrajIK: joint solve over all steps starting from `init`
/// (usually the Online-IK solution). `dense` selects the dense linear
/// algebra path, available up to [`DENSE_MAX_STEPS`] steps.
pub fn offline_traj_ik_with(
    traj: &[StylusObservation],
    model: &HumanModel,
    cfg: &IkConfig,
    init: &[PostureState],
    dense: bool,
) -> Result<IkSolution> {
    cfg.validate()?;
    check_stream(traj)?;
    if init.len() != traj.len() {
        return Err(Error::InvalidInput(format!(
            "initial trajectory has {} steps, observations have {}",
            init.len(),
            traj.len()
        )));
    }
    if traj.is_empty() {
        return Ok(IkSolution {
            states: Vec::new(),
            report: IkReport {
                method: "offline".into(),
                steps: Vec::new(),
                objective: 0.0,
                iterations: 0,
                converged: true,
            },
        });
    }
    if dense && traj.len() > DENSE_MAX_STEPS {
        return Err(Error::InvalidInput(format!(
            "dense trajectory IK limited to {DENSE_MAX_STEPS} steps"
        )));
    }
    let problem = TrajectoryProblem::new(model, cfg, traj);
    let x0 = flatten(init);
    let opts = SolverOptions {
        max_iters: cfg.offline_max_iters,
        ..cfg.solver_options()
    };
    let report = if dense {
        lsq::solve(&DenseTrajectoryProblem(TrajectoryProblem::new(model, cfg, traj)), &x0, &opts)
    } else {
        lsq::solve(&problem, &x0, &opts)
    };
    if !report.converged {
        log::debug!("offline trajectory IK stopped after {} iterations", report.iterations);
    }
    let states = unflatten(&report.x);
    let steps = states
        .iter()
        .zip(traj)
        .map(|(s, o)| StepDiagnostics {
            iterations: report.iterations,
            converged: report.converged,
            cost: f64::NAN,
            position_error: position_error(model, s, o),
        })
        .collect();
    Ok(IkSolution {
        states,
        report: IkReport {
            method: "offline".into(),
            steps,
            objective: report.cost,
            iterations: report.iterations,
            converged: report.converged,
        },
    })
}

/// Offline-TrajIK with the banded solver.
pub fn offline_traj_ik(
    traj: &[StylusObservation],
    model: &HumanModel,
    cfg: &IkConfig,
    init: &[PostureState],
) -> Result<IkSolution> {
    offline_traj_ik_with(traj, model, cfg, init, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model() -> HumanModel {
        HumanModel::default_seated()
    }

    fn cfg() -> IkConfig {
        IkSettings::default()
            .resolve(&ObservationNoise::reference(), &MotionNoise::reference(), 0.02)
            .unwrap()
    }

    /// Smooth joint trajectory near neutral and its noiseless observations.
    fn smooth_case(n: usize) -> (Vec<PostureState>, Vec<StylusObservation>) {
        let m = model();
        let dt = 0.02;
        let amp = JointVector::from_fn(|i, _| if i < 3 { 0.02 } else { 0.15 } * if i % 2 == 0 { 1.0 } else { -0.7 });
        let states: Vec<PostureState> = (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                let s = (1.0 - (1.5 * t).cos()) * 0.5;
                let sd = 0.75 * (1.5 * t).sin();
                PostureState {
                    q: m.neutral_posture + amp * s,
                    qdot: amp * sd,
                }
            })
            .collect();
        let obs = states
            .iter()
            .enumerate()
            .map(|(k, s)| StylusObservation::of_state(&m, s, k as f64 * dt).unwrap())
            .collect();
        (states, obs)
    }

    #[test]
    fn observation_jacobian_matches_finite_differences() {
        let m = model();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..20 {
            let s = PostureState {
                q: JointVector::from_fn(|i, _| rng.random_range(m.limits_lo()[i] + 0.1..m.limits_hi()[i] - 0.1)),
                qdot: JointVector::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            };
            let target = PostureState {
                q: m.clamp_posture(&(s.q + JointVector::from_fn(|_, _| rng.random_range(-0.3..0.3)))),
                qdot: JointVector::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            };
            let obs = StylusObservation::of_state(&m, &target, 0.0).unwrap();
            let (_, a) = observation_term(&m, &c, &s, &obs);
            let x = pack(&s);
            for k in 0..STATE_DIM {
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let (rp, _) = observation_term(&m, &c, &unpack(xp.as_slice()), &obs);
                let (rm, _) = observation_term(&m, &c, &unpack(xm.as_slice()), &obs);
                let fd = (rp - rm) / (2.0 * h);
                // compare in unweighted units
                let w = c.w1();
                for r in 0..OBS_DIM {
                    let err = (fd[r] - a[(r, k)]).abs() / w[r];
                    assert!(err < 1e-5, "row {r} col {k}: {} vs {}", fd[r], a[(r, k)]);
                }
            }
        }
    }

    fn with_prior() -> IkConfig {
        IkConfig {
            posture_prior: Some([0.3; NUM_JOINTS]),
            ..cfg()
        }
    }

    #[test]
    fn banded_and_dense_linearizations_agree() {
        for c in [cfg(), with_prior()] {
            linearizations_agree(&c);
        }
    }

    fn linearizations_agree(c: &IkConfig) {
        let m = model();
        let (truth, obs) = smooth_case(6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noisy: Vec<PostureState> = truth
            .iter()
            .map(|s| PostureState {
                q: m.clamp_posture(&(s.q + JointVector::from_fn(|_, _| rng.random_range(-0.05..0.05)))),
                qdot: s.qdot,
            })
            .collect();
        let p = TrajectoryProblem::new(&m, c, &obs);
        let x = flatten(&noisy);
        let banded = p.linearize(&x);
        let dense = DenseLinearization {
            jacobian: p.dense_jacobian(&x),
            residual: p.residual(&x),
        };
        let g1 = banded.gradient();
        let g2 = dense.gradient();
        assert!((&g1 - &g2).amax() < 1e-6 * g2.amax().max(1.0));
        let v = DVector::from_fn(x.len(), |_, _| rng.random_range(-1.0..1.0));
        assert!((banded.jv_norm_sq(&v) - dense.jv_norm_sq(&v)).abs() < 1e-8 * dense.jv_norm_sq(&v));
        let mut free = vec![true; x.len()];
        free[3] = false;
        free[STATE_DIM + 7] = false;
        let s1 = banded.gauss_newton_step(&free);
        let s2 = dense.gauss_newton_step(&free);
        assert!((&s1 - &s2).amax() < 1e-6 * s2.amax().max(1e-3), "{}", (&s1 - &s2).amax());
        assert_eq!(s1[3], 0.0);
    }

    #[test]
    fn dense_jacobian_matches_finite_differences() {
        for c in [cfg(), with_prior()] {
            dense_jacobian_fd(&c);
        }
    }

    fn dense_jacobian_fd(c: &IkConfig) {
        let m = model();
        let (truth, obs) = smooth_case(3);
        let p = TrajectoryProblem::new(&m, c, &obs);
        let mut x = flatten(&truth);
        x[4] += 0.05;
        let j = p.dense_jacobian(&x);
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (p.residual(&xp) - p.residual(&xm)) / (2.0 * h);
            let scale = j.column(k).amax().max(1.0);
            assert!((fd - j.column(k)).amax() < 1e-5 * scale);
        }
    }

    #[test]
    fn static_neutral_observation_stays_at_neutral() {
        let m = model();
        let c = cfg();
        let s = PostureState::at_rest(m.neutral_posture);
        let obs: Vec<_> = (0..10)
            .map(|k| StylusObservation::of_state(&m, &s, 0.02 * k as f64).unwrap())
            .collect();
        let sol = online_ik(&obs, &m, &c).unwrap();
        for st in &sol.states {
            assert!((st.q - m.neutral_posture).amax() < 1e-9);
            assert!(st.qdot.amax() < 1e-9);
        }
    }

    #[test]
    fn online_ik_tracks_noiseless_smooth_motion() {
        let m = model();
        // observation term dominant, so the motion prior only picks among exact fits
        let base = cfg();
        let c = IkConfig {
            sigma1: base.sigma1.map(|v| v * 1e-10),
            ..base
        };
        let (_, obs) = smooth_case(40);
        let sol = online_ik(&obs, &m, &c).unwrap();
        for st in &sol.report.steps {
            assert!(st.position_error < 1e-6, "{}", st.position_error);
        }
    }

    #[test]
    fn offline_never_increases_objective_and_respects_bounds() {
        let m = model();
        let c = cfg();
        let (_, obs) = smooth_case(12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy: Vec<StylusObservation> = obs
            .iter()
            .map(|o| {
                let mut o = *o;
                o.pose.position += nalgebra::Vector3::from_fn(|_, _| rng.random_range(-0.003..0.003));
                o
            })
            .collect();
        let online = online_ik(&noisy, &m, &c).unwrap();
        let p = TrajectoryProblem::new(&m, &c, &noisy);
        let before = p.objective(&online.states);
        let off = offline_traj_ik(&noisy, &m, &c, &online.states).unwrap();
        let after = p.objective(&off.states);
        assert!(after <= before, "{after} > {before}");
        for s in &off.states {
            assert!(m.within_limits(&s.q));
        }
        let dense = offline_traj_ik_with(&noisy, &m, &c, &online.states, true).unwrap();
        assert!(p.objective(&dense.states) <= before);
    }

    #[test]
    fn offline_optimum_is_a_fixed_point() {
        // constant joint velocity: zero motion residual and zero observation
        // residual, so the truth is a global optimum
        let m = model();
        let c = cfg();
        let qdot = JointVector::from_fn(|i, _| 0.05 * (i as f64 - 4.5));
        let truth: Vec<PostureState> = (0..25)
            .map(|k| PostureState {
                q: m.neutral_posture + qdot * (0.02 * k as f64),
                qdot,
            })
            .collect();
        let obs: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(k, s)| StylusObservation::of_state(&m, s, 0.02 * k as f64).unwrap())
            .collect();
        let off = offline_traj_ik(&obs, &m, &c, &truth).unwrap();
        assert!(off.report.converged);
        for (a, b) in off.states.iter().zip(&truth) {
            assert!((a.q - b.q).amax() < 1e-9);
            assert!((a.qdot - b.qdot).amax() < 1e-9);
        }
    }

    #[test]
    fn mismatched_init_rejected() {
        let m = model();
        let c = cfg();
        let (truth, obs) = smooth_case(5);
        assert!(offline_traj_ik(&obs, &m, &c, &truth[..4]).is_err());
    }

    #[test]
    fn random_targets_stay_in_bounds() {
        let m = model();
        let c = IkConfig {
            restarts: 1,
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let q = JointVector::from_fn(|i, _| rng.random_range(m.limits_lo()[i]..m.limits_hi()[i]));
            let mut obs = StylusObservation::of_state(&m, &PostureState::at_rest(q), 0.0).unwrap();
            obs.pose.position += nalgebra::Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
            let sol = online_ik(&[obs], &m, &c).unwrap();
            assert!(m.within_limits(&sol.states[0].q));
        }
    }
}
