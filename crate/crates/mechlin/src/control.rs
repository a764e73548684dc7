//! Controllers built on the exact discrete linearizations: finite-horizon
//! time-varying LQR, closed-loop rollout under the resulting feedback
//! law, and trajectory optimization by first- and second-order descent
//! on the input sequence.
//!
//! The state throughout is the stacked phase vector `x = (q, p)` of
//! dimension `2n`; gains and cost weights are sized against it.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::integrator::{
    simulate, step_with, DiscreteState, EnergyMap, NewtonOpts, SimError, StepResult, Trajectory,
};
use crate::linearizer::{linearize, linearize2, LinError};
use crate::model::{Discretization, SlotCtx};

/// Failure of an LQR solve, rollout, or optimization run.
#[derive(Clone, Debug)]
pub enum ControlError {
    /// Matrix or sequence dimensions do not line up.
    Shape { detail: String },
    /// An input-cost pivot `R + Bᵀ P B` lost positive definiteness at
    /// the given transition.
    NotPositiveDefinite { index: usize },
    /// Linearizing along the trajectory failed.
    Lin(LinError),
    /// A nonlinear rollout failed.
    Sim(SimError),
}

impl fmt::Display for ControlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlError::Shape { detail } => write!(f, "shape mismatch: {detail}"),
            ControlError::NotPositiveDefinite { index } => {
                write!(f, "input-cost pivot at transition {index} is not positive definite")
            }
            ControlError::Lin(e) => write!(f, "{e}"),
            ControlError::Sim(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ControlError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ControlError::Lin(e) => Some(e),
            ControlError::Sim(e) => Some(e),
            _ => None,
        }
    }
}

impl From<LinError> for ControlError {
    fn from(e: LinError) -> Self {
        ControlError::Lin(e)
    }
}

impl From<SimError> for ControlError {
    fn from(e: SimError) -> Self {
        ControlError::Sim(e)
    }
}

fn shape(detail: impl Into<String>) -> ControlError {
    ControlError::Shape { detail: detail.into() }
}

/// Stacks a discrete state into the phase vector `(q, p)`.
fn stack(s: &DiscreteState) -> DVector<f64> {
    let n = s.q.len();
    DVector::from_fn(2 * n, |i, _| if i < n { s.q[i] } else { s.p[i - n] })
}

fn state_error(s: &DiscreteState, reference: &DiscreteState) -> DVector<f64> {
    stack(s) - stack(reference)
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-10 * (1.0 + m.amax())
}

// --------------------------------------------------------------------------
// LQR

/// Finite-horizon quadratic regulator data along a reference trajectory.
///
/// Sequences are indexed by transition: `a`, `b`, and `r` carry one entry
/// per step while `q` carries one entry per state, its final entry being
/// the terminal weight.
#[derive(Clone, Debug)]
pub struct LqrProblem {
    /// State transition Jacobians, `2n x 2n` per step.
    pub a: Vec<DMatrix<f64>>,
    /// Input Jacobians, `2n x m` per step.
    pub b: Vec<DMatrix<f64>>,
    /// Symmetric state weights, one per state index.
    pub q: Vec<DMatrix<f64>>,
    /// Symmetric positive definite input weights, one per step.
    pub r: Vec<DMatrix<f64>>,
}

impl LqrProblem {
    /// Assembles a problem and validates the sequence lengths, matrix
    /// shapes, and weight symmetry. Positive definiteness of `r` is
    /// established where it is consumed, during the backward recursion.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
    ) -> Result<Self, ControlError> {
        let steps = a.len();
        if steps == 0 {
            return Err(shape("regulator horizon must cover at least one transition"));
        }
        if b.len() != steps || r.len() != steps || q.len() != steps + 1 {
            return Err(shape(format!(
                "sequence lengths (a: {}, b: {}, q: {}, r: {}) do not describe one horizon",
                steps,
                b.len(),
                q.len(),
                r.len()
            )));
        }
        let d = a[0].nrows();
        let m = b[0].ncols();
        for k in 0..steps {
            if a[k].shape() != (d, d) || b[k].shape() != (d, m) || r[k].shape() != (m, m) {
                return Err(shape(format!("matrix shapes at transition {k} are inconsistent")));
            }
            if !is_symmetric(&r[k]) {
                return Err(shape(format!("input weight at transition {k} is not symmetric")));
            }
        }
        for (k, qk) in q.iter().enumerate() {
            if qk.shape() != (d, d) {
                return Err(shape(format!("state weight at index {k} has the wrong shape")));
            }
            if !is_symmetric(qk) {
                return Err(shape(format!("state weight at index {k} is not symmetric")));
            }
        }
        Ok(LqrProblem { a, b, q, r })
    }

    /// Builds a problem with the same weights at every index.
    pub fn uniform(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, ControlError> {
        let steps = a.len();
        LqrProblem::new(a, b, vec![q; steps + 1], vec![r; steps])
    }

    /// Number of transitions covered.
    pub fn horizon(&self) -> usize {
        self.a.len()
    }
}

/// Backward Riccati solution. `p[k]` is the cost-to-go matrix at state
/// index `k` (so `p` has one more entry than `k`), and `k[j]` the gain
/// applied over transition `j`:
/// `u(j) = u_d(j) - k[j] (x(j) - x_d(j))`.
#[derive(Clone, Debug)]
pub struct LqrSolution {
    pub p: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
}

/// Solves the finite-horizon discrete regulator by the backward Riccati
/// recursion from the terminal weight, producing the time-varying gains
/// `K(k) = [R(k) + Bᵀ(k) P(k+1) B(k)]⁻¹ Bᵀ(k) P(k+1) A(k)`.
pub fn solve_lqr(problem: &LqrProblem) -> Result<LqrSolution, ControlError> {
    let steps = problem.horizon();
    let mut p = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); steps];
    p[steps] = problem.q[steps].clone();

    for k in (0..steps).rev() {
        let (a, b) = (&problem.a[k], &problem.b[k]);
        let pb = &p[k + 1] * b;
        let pivot = &problem.r[k] + b.transpose() * &pb;
        let chol = Cholesky::new(pivot)
            .ok_or(ControlError::NotPositiveDefinite { index: k })?;
        let gain = chol.solve(&(pb.transpose() * a));
        let mut pk = &problem.q[k] + a.transpose() * &p[k + 1] * a
            - (a.transpose() * &pb) * &gain;
        // The recursion preserves symmetry exactly; only roundoff breaks
        // it, and letting it accumulate over long horizons skews gains.
        pk = (&pk + pk.transpose()) * 0.5;
        p[k] = pk;
        gains[k] = gain;
    }

    Ok(LqrSolution { p, k: gains })
}

/// Exact first-order linearizations `(A(k), B(k))` along every transition
/// of an accepted trajectory.
pub fn linearize_trajectory(
    disc: &Discretization,
    traj: &Trajectory,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), ControlError> {
    let steps = traj.steps();
    let mut a = Vec::with_capacity(steps);
    let mut b = Vec::with_capacity(steps);
    for k in 0..steps {
        let lin = linearize(disc, &traj.states[k], &traj.inputs[k], &transition(traj, k))?;
        a.push(lin.a);
        b.push(lin.b);
    }
    Ok((a, b))
}

/// Repackages transition `k` of a trajectory as a step result so the
/// linearizer can be pointed at it.
fn transition(traj: &Trajectory, k: usize) -> StepResult {
    StepResult {
        state: traj.states[k + 1].clone(),
        lambda: traj.lambdas[k].clone(),
        newton_iters: 0,
        residual: 0.0,
    }
}

/// Simulates the closed loop `u(k) = u_d(k) - K(k) (x(k) - x_d(k))` from
/// `x0`, stepping the full nonlinear system rather than the linear model.
pub fn rollout_closed_loop(
    disc: &Discretization,
    x0: &DiscreteState,
    reference: &Trajectory,
    gains: &LqrSolution,
    opts: &NewtonOpts,
) -> Result<Trajectory, ControlError> {
    let n = disc.nq();
    let steps = reference.steps();
    if gains.k.len() != steps {
        return Err(shape(format!(
            "{} gains for a reference with {} transitions",
            gains.k.len(),
            steps
        )));
    }
    if x0.q.len() != n || x0.p.len() != n {
        return Err(shape("initial state does not match the system dimension"));
    }
    for (k, gain) in gains.k.iter().enumerate() {
        if gain.shape() != (disc.nu(), 2 * n) {
            return Err(shape(format!("gain at transition {k} has the wrong shape")));
        }
    }

    let dt = disc.dt();
    let mut ctx = SlotCtx::new();
    let energy = EnergyMap::new(disc);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(steps),
        lambdas: Vec::with_capacity(steps),
        energies: Vec::with_capacity(steps),
    };

    for k in 0..steps {
        let prev = traj.states.last().expect("nonempty").clone();
        let err = state_error(&prev, &reference.states[k]);
        let u = &reference.inputs[k] - &gains.k[k] * err;
        let res = step_with(disc, &prev, &u, opts, &mut ctx)
            .map_err(|source| SimError::Step { step: k, source })?;
        let e = energy
            .at(disc, &prev.q, &res.state.q, &mut ctx)
            .map_err(|e| SimError::Step { step: k, source: e.into() })?;
        traj.times.push((k + 1) as f64 * dt);
        traj.inputs.push(u);
        traj.lambdas.push(res.lambda);
        traj.energies.push(e);
        traj.states.push(res.state);
    }

    Ok(traj)
}

// --------------------------------------------------------------------------
// Trajectory optimization

/// Quadratic tracking weights: running state and input penalties plus a
/// terminal state penalty. The state weight is sized against the stacked
/// phase vector, configuration entries first.
#[derive(Clone, Debug)]
pub struct Weights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
}

impl Weights {
    /// Diagonal recipe used by the bundled scenarios: weight `cfg` on
    /// every configuration entry of the state, identity elsewhere, with
    /// the terminal weight equal to the running weight.
    pub fn configuration_weighted(n: usize, m: usize, cfg: f64) -> Self {
        let q = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            if i != j {
                0.0
            } else if i < n {
                cfg
            } else {
                1.0
            }
        });
        Weights { q: q.clone(), r: DMatrix::identity(m, m), q_terminal: q }
    }

    fn validate(&self, n: usize, m: usize) -> Result<(), ControlError> {
        if self.q.shape() != (2 * n, 2 * n) || self.q_terminal.shape() != (2 * n, 2 * n) {
            return Err(shape("state weight does not match the stacked state dimension"));
        }
        if self.r.shape() != (m, m) {
            return Err(shape("input weight does not match the input dimension"));
        }
        if !is_symmetric(&self.q) || !is_symmetric(&self.r) || !is_symmetric(&self.q_terminal) {
            return Err(shape("weights must be symmetric"));
        }
        Ok(())
    }
}

/// Quadratic tracking cost of a realized trajectory against a reference:
/// running state- and input-error terms over every transition plus the
/// terminal state error.
pub fn trajectory_cost(
    weights: &Weights,
    traj: &Trajectory,
    reference: &Trajectory,
) -> Result<f64, ControlError> {
    if traj.states.len() != reference.states.len() || traj.inputs.len() != reference.inputs.len()
    {
        return Err(shape("trajectory and reference cover different horizons"));
    }
    let steps = traj.steps();
    let mut cost = 0.0;
    for k in 0..steps {
        let e = state_error(&traj.states[k], &reference.states[k]);
        let v = &traj.inputs[k] - &reference.inputs[k];
        cost += (e.transpose() * &weights.q * &e)[(0, 0)];
        cost += (v.transpose() * &weights.r * &v)[(0, 0)];
    }
    let e = state_error(&traj.states[steps], &reference.states[steps]);
    cost += (e.transpose() * &weights.q_terminal * &e)[(0, 0)];
    Ok(cost)
}

fn rollout(
    disc: &Discretization,
    x0: &DiscreteState,
    inputs: &[DVector<f64>],
    opts: &NewtonOpts,
) -> Result<Trajectory, ControlError> {
    Ok(simulate(disc, x0, inputs.len(), |k, _| inputs[k].clone(), opts)?)
}

/// Gradient of [`trajectory_cost`] with respect to the inputs by one
/// backward adjoint sweep over the transition linearizations. Also
/// returns the costates `lambda[k] = dJ/dx(k)`, which the second-order
/// descent contracts against the map Hessians.
fn adjoint_sweep(
    weights: &Weights,
    traj: &Trajectory,
    reference: &Trajectory,
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let steps = traj.steps();
    let mut grad = vec![DVector::zeros(0); steps];
    let mut costates = vec![DVector::zeros(0); steps + 1];
    let e_f = state_error(&traj.states[steps], &reference.states[steps]);
    costates[steps] = 2.0 * &weights.q_terminal * e_f;
    for k in (0..steps).rev() {
        let e = state_error(&traj.states[k], &reference.states[k]);
        let v = &traj.inputs[k] - &reference.inputs[k];
        grad[k] = 2.0 * &weights.r * v + b[k].transpose() * &costates[k + 1];
        costates[k] = 2.0 * &weights.q * e + a[k].transpose() * &costates[k + 1];
    }
    (grad, costates)
}

/// Cost of rolling `inputs` out from the reference's initial state,
/// together with its exact gradient with respect to every input.
pub fn cost_and_gradient(
    disc: &Discretization,
    reference: &Trajectory,
    weights: &Weights,
    inputs: &[DVector<f64>],
    opts: &NewtonOpts,
) -> Result<(f64, Vec<DVector<f64>>), ControlError> {
    weights.validate(disc.nq(), disc.nu())?;
    if inputs.len() != reference.steps() {
        return Err(shape("input sequence does not cover the reference horizon"));
    }
    let traj = rollout(disc, &reference.states[0], inputs, opts)?;
    let (a, b) = linearize_trajectory(disc, &traj)?;
    let cost = trajectory_cost(weights, &traj, reference)?;
    Ok((cost, adjoint_sweep(weights, &traj, reference, &a, &b).0))
}

/// Descent scheme for [`optimize_trajectory`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptMethod {
    /// Gradient descent on the input sequence via the adjoint sweep.
    FirstOrder,
    /// Newton-type descent whose stage Hessians contract the exact
    /// second-order linearization tensors, with Levenberg regularization
    /// when a stage pivot is indefinite.
    SecondOrder,
}

/// One accepted descent iteration.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    /// Cost after the accepted step.
    pub cost: f64,
    /// Norm of the descent direction searched along.
    pub descent_norm: f64,
    /// Accepted line-search step size.
    pub step_size: f64,
}

/// Convergence record of an optimization run.
#[derive(Clone, Debug, Serialize)]
pub struct OptimizationLog {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub tolerance: f64,
}

const ARMIJO_SLOPE: f64 = 1e-4;
const MIN_STEP: f64 = 1e-18;

/// Descent direction over the whole input sequence, with its 2-norm and
/// the directional derivative of the cost along it.
struct Direction {
    du: Vec<DVector<f64>>,
    norm: f64,
    slope: f64,
}

fn direction_stats(du: Vec<DVector<f64>>, grad: &[DVector<f64>]) -> Direction {
    let mut norm2 = 0.0;
    let mut slope = 0.0;
    for (d, g) in du.iter().zip(grad) {
        norm2 += d.dot(d);
        slope += g.dot(d);
    }
    Direction { du, norm: norm2.sqrt(), slope }
}

/// Stagewise Newton direction on the reduced input-space problem: a
/// backward factorization of the cost Hessian whose stage curvature
/// contracts the one-step map's second-order tensors with the costates,
/// regularized by `nu` on the input pivot, followed by a forward pass
/// through the linear model to extract the direction. With `nu = 0` and
/// positive definite pivots this is the exact Newton step.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    disc: &Discretization,
    weights: &Weights,
    traj: &Trajectory,
    reference: &Trajectory,
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
    costates: &[DVector<f64>],
    nu: f64,
) -> Result<Option<Vec<DVector<f64>>>, ControlError> {
    let n = disc.nq();
    let m = disc.nu();
    let d = 2 * n;
    let steps = traj.steps();

    let mut value_grad = costates[steps].clone();
    let mut value_hess = 2.0 * weights.q_terminal.clone();
    let mut feedforward = vec![DVector::zeros(m); steps];
    let mut feedback = vec![DMatrix::zeros(m, d); steps];

    for k in (0..steps).rev() {
        let first = linearize(disc, &traj.states[k], &traj.inputs[k], &transition(traj, k))?;
        let second =
            linearize2(disc, &traj.states[k], &traj.inputs[k], &transition(traj, k), &first)?;

        // Curvature of the transition under the fixed costate weighting:
        // sum_i lambda(k+1)[i] * Hess(f_i) over the stacked directions
        // (x, u). Contracting with the costate rather than the running
        // value gradient keeps the factorization equal to the true
        // Hessian of the reduced cost.
        let mut curv = DMatrix::zeros(d + m, d + m);
        for i in 0..n {
            curv += second.q_next.hessian(i) * costates[k + 1][i];
            curv += second.p_next.hessian(i) * costates[k + 1][n + i];
        }

        let e = state_error(&traj.states[k], &reference.states[k]);
        let v = &traj.inputs[k] - &reference.inputs[k];
        let qx = 2.0 * &weights.q * e + a[k].transpose() * &value_grad;
        let qu = 2.0 * &weights.r * v + b[k].transpose() * &value_grad;
        let qxx =
            2.0 * &weights.q + a[k].transpose() * &value_hess * &a[k] + curv.view((0, 0), (d, d));
        let quu = 2.0 * &weights.r
            + b[k].transpose() * &value_hess * &b[k]
            + curv.view((d, d), (m, m))
            + DMatrix::identity(m, m) * nu;
        let qux = b[k].transpose() * &value_hess * &a[k] + curv.view((d, 0), (m, d));

        let chol = match Cholesky::new(quu) {
            Some(c) => c,
            // Indefinite stage pivot: the caller raises `nu` and retries.
            None => return Ok(None),
        };
        let dk = -chol.solve(&qu);
        let kk = -chol.solve(&qux);

        value_grad = &qx + qux.transpose() * &dk;
        let mut vh = &qxx + qux.transpose() * &kk;
        vh = (&vh + vh.transpose()) * 0.5;
        value_hess = vh;
        feedforward[k] = dk;
        feedback[k] = kk;
    }

    // Forward pass through the linear model turns the stage policies into
    // one direction in input space.
    let mut du = Vec::with_capacity(steps);
    let mut dx = DVector::zeros(d);
    for k in 0..steps {
        let duk = &feedforward[k] + &feedback[k] * &dx;
        dx = &a[k] * dx + &b[k] * &duk;
        du.push(duk);
    }
    Ok(Some(du))
}

/// Optimizes the input sequence so the rollout tracks `reference`,
/// returning the final feasible trajectory and the per-iteration log.
///
/// The reference may be dynamically infeasible; only its initial state,
/// states, and inputs enter the cost. Both methods terminate when the
/// descent-direction norm drops to `tol`; running out of iterations
/// yields a log with `converged = false`, not an error.
pub fn optimize_trajectory(
    disc: &Discretization,
    reference: &Trajectory,
    weights: &Weights,
    method: OptMethod,
    tol: f64,
    max_iters: usize,
    opts: &NewtonOpts,
) -> Result<(Trajectory, OptimizationLog), ControlError> {
    weights.validate(disc.nq(), disc.nu())?;
    if reference.steps() == 0 {
        return Err(shape("reference must cover at least one transition"));
    }
    for (k, u) in reference.inputs.iter().enumerate() {
        if u.len() != disc.nu() {
            return Err(shape(format!("reference input {k} does not match the system")));
        }
    }

    let mut inputs = reference.inputs.clone();
    let mut traj = rollout(disc, &reference.states[0], &inputs, opts)?;
    let mut cost = trajectory_cost(weights, &traj, reference)?;
    let mut log =
        OptimizationLog { iterations: Vec::new(), converged: false, tolerance: tol };
    // Levenberg shift, raised while stage pivots are indefinite.
    let mut nu = 0.0;
    // Warm-started first-order step scale.
    let mut alpha0 = 1.0;

    for _ in 0..max_iters {
        let (a, b) = linearize_trajectory(disc, &traj)?;
        let (grad, costates) = adjoint_sweep(weights, &traj, reference, &a, &b);

        let dir = match method {
            OptMethod::FirstOrder => {
                direction_stats(grad.iter().map(|g| -g).collect(), &grad)
            }
            OptMethod::SecondOrder => loop {
                match newton_direction(disc, weights, &traj, reference, &a, &b, &costates, nu)? {
                    Some(du) => {
                        let dir = direction_stats(du, &grad);
                        // A vanishing direction is the converged case, not
                        // a defective one; otherwise insist on descent.
                        if dir.norm <= tol || dir.slope < 0.0 {
                            break dir;
                        }
                    }
                    None => {}
                }
                nu = if nu == 0.0 { 1e-6 } else { nu * 10.0 };
                if nu > 1e16 {
                    // No usable curvature model; report the stall.
                    return Ok((traj, log));
                }
            },
        };

        if dir.norm <= tol {
            log.converged = true;
            break;
        }

        // Backtracking line search with the Armijo acceptance test.
        let mut alpha = match method {
            OptMethod::FirstOrder => alpha0,
            OptMethod::SecondOrder => 1.0,
        };
        let mut accepted = None;
        while alpha > MIN_STEP {
            let probe: Vec<DVector<f64>> = inputs
                .iter()
                .zip(&dir.du)
                .map(|(u, d)| u + d * alpha)
                .collect();
            match rollout(disc, &reference.states[0], &probe, opts) {
                Ok(t) => {
                    let c = trajectory_cost(weights, &t, reference)?;
                    if c <= cost + ARMIJO_SLOPE * alpha * dir.slope {
                        accepted = Some((probe, t, c));
                        break;
                    }
                }
                // A probe that leaves the solver's basin is treated as a
                // rejected step, not a fault.
                Err(ControlError::Sim(_)) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }

        let Some((new_inputs, new_traj, new_cost)) = accepted else {
            // The direction could not produce any decrease; stop here
            // rather than spin on the same point.
            break;
        };
        inputs = new_inputs;
        traj = new_traj;
        cost = new_cost;
        log.iterations.push(IterationRecord {
            cost,
            descent_norm: dir.norm,
            step_size: alpha,
        });
        match method {
            // Let the accepted scale drift both ways so the search stays
            // near one or two probes per iteration.
            OptMethod::FirstOrder => alpha0 = (alpha * 2.0).min(1e6),
            // Trust the quadratic model only as far as the line search
            // did: full steps relax the shift, heavy backtracking raises
            // it so the next direction bends toward the gradient.
            OptMethod::SecondOrder => {
                if alpha >= 0.5 {
                    nu = if nu < 1e-10 { 0.0 } else { nu * 0.25 };
                } else if alpha < 0.25 {
                    nu = if nu == 0.0 { 1e-6 } else { (nu * 10.0).min(1e16) };
                }
            }
        }
    }

    // A direction below tolerance on the last admissible iteration also
    // counts; re-check cheaply when the budget ran out unconverged.
    if !log.converged && log.iterations.len() == max_iters {
        let (a, b) = linearize_trajectory(disc, &traj)?;
        let grad = adjoint_sweep(weights, &traj, reference, &a, &b).0;
        let norm2: f64 = grad.iter().map(|g| g.dot(g)).sum();
        if method == OptMethod::FirstOrder && norm2.sqrt() <= tol {
            log.converged = true;
        }
    }

    Ok((traj, log))
}
