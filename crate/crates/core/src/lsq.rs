//! Bound-constrained nonlinear least squares with a dogleg step inside a
//! rectangular (∞-norm) trust region.
//!
//! Minimizes `½‖r(x)‖²` subject to `lo ≤ x ≤ hi`. Variables sitting on a
//! bound whose negative gradient points outward are frozen for the
//! iteration; the Gauss-Newton and Cauchy steps are computed on the rest and
//! combined into a dogleg path inside the trust box, then projected onto the
//! feasible box. The linear algebra is delegated to a
//! [`Linearization`] so that structured problems can supply their own
//! Gauss-Newton solver.

use nalgebra::{DMatrix, DVector};

/// Relative Tikhonov term on the Gauss-Newton point. Keeps steps finite
/// along directions the Jacobian barely sees (redundant joints).
pub const GN_REGULARIZATION: f64 = 1e-10;

/// Local model of the residual at the current iterate.
pub trait Linearization {
    /// `Jᵀ r`.
    fn gradient(&self) -> DVector<f64>;
    /// `‖J v‖²`.
    fn jv_norm_sq(&self, v: &DVector<f64>) -> f64;
    /// Euclidean norm of every Jacobian column.
    fn column_norms(&self) -> DVector<f64>;
    /// Gauss-Newton point over the free variables: `(JᵀJ + μI) p = −Jᵀr`
    /// with `μ` = [`GN_REGULARIZATION`] times the largest diagonal entry of
    /// `JᵀJ`. Frozen entries of the result are zero.
    fn gauss_newton_step(&self, free: &[bool]) -> DVector<f64>;
}

pub trait LeastSquaresProblem {
    type Lin: Linearization;

    fn lower(&self) -> &DVector<f64>;
    fn upper(&self) -> &DVector<f64>;
    fn cost(&self, x: &DVector<f64>) -> f64;
    fn linearize(&self, x: &DVector<f64>) -> Self::Lin;
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative step-size tolerance.
    pub xtol: f64,
    /// Relative cost-decrease tolerance.
    pub ftol: f64,
    /// ∞-norm of the projected gradient.
    pub gtol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            xtol: 1e-10,
            ftol: 1e-12,
            gtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn clip(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    x.zip_zip_map(lo, hi, |v, l, h| v.max(l).min(h))
}

/// Largest `α ≥ 0` with `lo ≤ x + α d ≤ hi`, elementwise.
fn step_to_bound(x: &DVector<f64>, d: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 {
            alpha = alpha.min((hi[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            alpha = alpha.min((lo[i] - x[i]) / d[i]);
        }
    }
    alpha.max(0.0)
}

fn inside(p: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> bool {
    p.iter().zip(lo.iter().zip(hi.iter())).all(|(v, (l, h))| *v >= *l && *v <= *h)
}

/// Dogleg step within the box `[lo, hi]` (which contains 0), along the path
/// 0 → Cauchy point → Gauss-Newton point. `sd` is the scaled steepest
/// descent direction. Returns the step and whether the box cut it.
fn dogleg(
    gn: &DVector<f64>,
    g: &DVector<f64>,
    sd: &DVector<f64>,
    lin: &impl Linearization,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (DVector<f64>, bool) {
    if inside(gn, lo, hi) {
        return (gn.clone(), false);
    }
    let zero = DVector::zeros(g.len());
    let gd = -g.dot(sd);
    let jd = lin.jv_norm_sq(sd);
    let cauchy = if jd > 0.0 { sd * (gd / jd) } else { sd.clone() };
    if !inside(&cauchy, lo, hi) {
        let alpha = step_to_bound(&zero, sd, lo, hi);
        return (sd * alpha, true);
    }
    let d = gn - &cauchy;
    let alpha = step_to_bound(&cauchy, &d, lo, hi).min(1.0);
    (cauchy + d * alpha, true)
}

/// Runs the bounded dogleg iteration from `x0` (projected onto the bounds).
///
/// The trust region is a box in variables scaled by the inverse Jacobian
/// column norms (running maximum), so variables with different units share
/// one radius.
pub fn solve<P: LeastSquaresProblem>(problem: &P, x0: &DVector<f64>, opts: &SolverOptions) -> SolveReport {
    let lo = problem.lower().clone();
    let hi = problem.upper().clone();
    let n = x0.len();
    let mut x = clip(x0, &lo, &hi);
    let mut cost = problem.cost(&x);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut col_norm = DVector::<f64>::zeros(n);
    let mut delta = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iters {
        iterations += 1;
        let lin = problem.linearize(&x);
        let norms = lin.column_norms();
        for i in 0..n {
            col_norm[i] = col_norm[i].max(norms[i]);
        }
        let scale = col_norm.map(|c| if c > 0.0 { 1.0 / c } else { 1.0 });
        if delta.is_nan() {
            delta = x.component_div(&scale).amax();
            if delta == 0.0 || !delta.is_finite() {
                delta = 1.0;
            }
        }
        let mut g = lin.gradient();
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        for i in 0..n {
            if !free[i] {
                g[i] = 0.0;
            }
        }
        if g.amax() < opts.gtol {
            converged = true;
            break;
        }
        let gn = lin.gauss_newton_step(&free);
        let sd = -g.component_mul(&scale).component_mul(&scale);

        loop {
            let tr_lo = DVector::from_fn(n, |i, _| if free[i] { -delta * scale[i] } else { 0.0 });
            let tr_hi = DVector::from_fn(n, |i, _| if free[i] { delta * scale[i] } else { 0.0 });
            let (raw, hit) = dogleg(&gn, &g, &sd, &lin, &tr_lo, &tr_hi);
            // project back onto the feasible box
            let step = clip(&(&x + &raw), &lo, &hi) - &x;
            let predicted = -(g.dot(&step) + 0.5 * lin.jv_norm_sq(&step));
            let x_new = &x + &step;
            let cost_new = problem.cost(&x_new);
            let actual = cost - cost_new;
            let step_norm = step.component_div(&scale).amax();
            let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };

            if ratio < 0.25 {
                delta = 0.25 * step_norm;
            } else if ratio > 0.75 && hit {
                delta = (2.0 * delta).max(2.0 * step_norm);
            }

            let small_step = step.amax() <= opts.xtol * (opts.xtol + x.amax());
            if actual > 0.0 && cost_new.is_finite() {
                let small_decrease = actual <= opts.ftol * cost;
                x = x_new;
                cost = cost_new;
                history.push(cost);
                if small_step || small_decrease {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if small_step || delta < 1e-300 {
                // no decrease available at machine precision
                converged = true;
                break 'outer;
            }
        }
    }

    SolveReport {
        x,
        cost,
        initial_cost,
        iterations,
        converged,
        cost_history: history,
    }
}

/// Linearization backed by a dense Jacobian.
#[derive(Debug, Clone)]
pub struct DenseLinearization {
    pub jacobian: DMatrix<f64>,
    pub residual: DVector<f64>,
}

impl Linearization for DenseLinearization {
    fn gradient(&self) -> DVector<f64> {
        self.jacobian.tr_mul(&self.residual)
    }

    fn jv_norm_sq(&self, v: &DVector<f64>) -> f64 {
        (&self.jacobian * v).norm_squared()
    }

    fn column_norms(&self) -> DVector<f64> {
        DVector::from_fn(self.jacobian.ncols(), |i, _| self.jacobian.column(i).norm())
    }

    fn gauss_newton_step(&self, free: &[bool]) -> DVector<f64> {
        let cols: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
        let mut out = DVector::zeros(free.len());
        if cols.is_empty() {
            return out;
        }
        let sub = self.jacobian.select_columns(cols.iter());
        let mut normal = sub.tr_mul(&sub);
        let mu = GN_REGULARIZATION * normal.diagonal().amax();
        for k in 0..cols.len() {
            normal[(k, k)] += mu;
        }
        let rhs = -sub.tr_mul(&self.residual);
        let p = match normal.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => normal.svd(true, true).solve(&rhs, 0.0).unwrap_or_else(|_| DVector::zeros(cols.len())),
        };
        for (k, &i) in cols.iter().enumerate() {
            out[i] = p[k];
        }
        out
    }
}

/// A problem given by closures returning residuals and a dense Jacobian.
pub struct DenseProblem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    pub residual: R,
    pub jacobian: J,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl<R, J> LeastSquaresProblem for DenseProblem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    type Lin = DenseLinearization;

    fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * (self.residual)(x).norm_squared()
    }

    fn linearize(&self, x: &DVector<f64>) -> DenseLinearization {
        DenseLinearization {
            jacobian: (self.jacobian)(x),
            residual: (self.residual)(x),
        }
    }
}
