//! The implicit one-step map of the discretized system and trajectory
//! rollout.
//!
//! One step advances the position–momentum pair `(q_k, p_k)` under an
//! input `u_k` by solving the implicit update for `q_{k+1}`:
//!
//! ```text
//! p_k + D1 ld(q_k, q_{k+1}) + fminus(q_k, q_{k+1}, u_k) - Dh(q_k)^T lam = 0
//! h(q_{k+1}) = 0                                   (constrained systems)
//! p_{k+1} = D2 ld(q_k, q_{k+1}) + fplus(q_k, q_{k+1}, u_k)
//! ```
//!
//! The root is found by Newton iteration from the guess
//! `q_{k+1} = q_k` (`lam = 0`), with the residual checked *before* each
//! Jacobian assembly so a converged point never pays for a factorization.
//! The Jacobian factorization is reused across iterations as long as the
//! residual keeps contracting by at least a factor of ten, which makes a
//! typical step pay for one Hessian pass rather than one per iteration;
//! convergence is always judged on the freshly evaluated residual, so the
//! accepted point does not depend on the refresh schedule. Constrained
//! systems solve the bordered system in `(q_{k+1}, lam)`; the multiplier
//! is reported with the step.
//!
//! [`simulate`] repeats the step over a horizon and records, per
//! transition, an energy sample of the continuous Lagrangian evaluated
//! at the interval midpoint with the finite-difference velocity — the
//! quantity whose long-horizon drift characterizes the integrator.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::model::{Discretization, ModelError, SlotCtx};

/// Position–momentum state of the discrete flow.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl DiscreteState {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Self {
        DiscreteState { q, p }
    }
}

/// Newton settings for the implicit update.
#[derive(Clone, Copy, Debug)]
pub struct NewtonOpts {
    /// Convergence threshold on the residual infinity norm.
    pub tol: f64,
    /// Iteration budget (number of Newton updates).
    pub max_iters: usize,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts { tol: 1e-12, max_iters: 50 }
    }
}

/// One accepted step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: DiscreteState,
    /// Constraint multipliers for this transition; empty when the system
    /// is unconstrained.
    pub lambda: DVector<f64>,
    /// Newton updates performed.
    pub newton_iters: usize,
    /// Final residual infinity norm.
    pub residual: f64,
}

/// Failure of one implicit step.
#[derive(Clone, Debug)]
pub enum StepError {
    /// The Newton iteration ran out of budget. `history` holds the
    /// residual infinity norm at every evaluation, in order.
    NonConvergence { iterations: usize, residual: f64, history: Vec<f64> },
    /// The Newton matrix (or bordered constraint system) lost rank.
    SingularJacobian { iteration: usize },
    Model(ModelError),
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::NonConvergence { iterations, residual, .. } => write!(
                f,
                "implicit update did not converge after {iterations} iterations \
                 (residual {residual:.3e})"
            ),
            StepError::SingularJacobian { iteration } => {
                write!(f, "singular update Jacobian at Newton iteration {iteration}")
            }
            StepError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for StepError {}

impl From<ModelError> for StepError {
    fn from(e: ModelError) -> Self {
        StepError::Model(e)
    }
}

impl From<crate::graph::EvalError> for StepError {
    fn from(e: crate::graph::EvalError) -> Self {
        StepError::Model(ModelError::Eval(e))
    }
}

/// Failure of a rollout, tagged with the transition index.
#[derive(Clone, Debug)]
pub enum SimError {
    Step { step: usize, source: StepError },
    Model(ModelError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Step { step, source } => write!(f, "step {step}: {source}"),
            SimError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<ModelError> for SimError {
    fn from(e: ModelError) -> Self {
        SimError::Model(e)
    }
}

/// A rolled-out trajectory. `states` has one more entry than the
/// per-transition vectors; `energies[k]` belongs to the transition
/// `k -> k+1`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DiscreteState>,
    pub inputs: Vec<DVector<f64>>,
    pub lambdas: Vec<DVector<f64>>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Advances one step, allocating private scratch.
pub fn step(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    opts: &NewtonOpts,
) -> Result<StepResult, StepError> {
    let mut ctx = SlotCtx::new();
    step_with(disc, state, u, opts, &mut ctx)
}

/// Advances one step, reusing caller scratch across calls.
pub fn step_with(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    opts: &NewtonOpts,
    ctx: &mut SlotCtx,
) -> Result<StepResult, StepError> {
    let n = disc.nq();
    let m = disc.nu();
    if state.q.len() != n || state.p.len() != n || u.len() != m {
        return Err(StepError::Model(ModelError::Shape {
            detail: format!(
                "state/input dimensions ({}, {}, {}) do not match the system ({n}, {n}, {m})",
                state.q.len(),
                state.p.len(),
                u.len()
            ),
        }));
    }
    if disc.nc() == 0 {
        newton_free(disc, state, u, opts, ctx)
    } else {
        newton_constrained(disc, state, u, opts, ctx)
    }
}

/// Advances one step of a constrained system, solving the bordered
/// system in `(q_{k+1}, lam)`. [`step`] dispatches here automatically;
/// this entry point exists for callers that want the constraint
/// requirement checked.
pub fn step_constrained(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    opts: &NewtonOpts,
) -> Result<StepResult, StepError> {
    if disc.nc() == 0 {
        return Err(StepError::Model(ModelError::Shape {
            detail: "constrained step on a system with no constraints".into(),
        }));
    }
    step(disc, state, u, opts)
}

/// Unconstrained Newton solve of the implicit update.
fn newton_free(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    opts: &NewtonOpts,
    ctx: &mut SlotCtx,
) -> Result<StepResult, StepError> {
    let n = disc.nq();
    let m = disc.nu();
    let wrt_l: Vec<usize> = (0..2 * n).collect();
    let wrt_f: Vec<usize> = (0..2 * n + m).collect();

    let mut qn = state.q.clone();
    let mut history = Vec::new();

    let mut ld_vals = std::mem::take(&mut ctx.buf);
    let mut f_vals = std::mem::take(&mut ctx.buf2);
    let result = (|| {
        // The factorization is reused across iterations while the residual
        // keeps contracting by at least 10x; a stale factor costs only the
        // cheap residual pass per extra iteration, a fresh one costs a full
        // Hessian pass plus an LU.
        let mut factors: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
        let mut prev_rn = f64::INFINITY;
        let mut prev_under = false;
        for it in 0..=opts.max_iters {
            // Residual first; the Jacobian is only assembled on rejection.
            disc.bind_ld(state.q.as_slice(), qn.as_slice(), &mut ld_vals);
            disc.ld().grad_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
            let grad_l = disc.ld().grad(&ctx.ws, 0);
            let d1l = DVector::from_row_slice(&grad_l[..n]);
            let d2l = DVector::from_row_slice(&grad_l[n..]);

            disc.bind_f(state.q.as_slice(), qn.as_slice(), u.as_slice(), &mut f_vals);
            disc.fminus().eval_pass(&f_vals, &mut ctx.ws)?;
            let fmv = DVector::from_fn(n, |i, _| disc.fminus().value(&ctx.ws, i));

            let r = &state.p + &d1l + &fmv;
            let rn = r.amax();
            history.push(rn);

            // A first crossing of the tolerance earns one more cheap update
            // unless the residual already sits well below it: the polished
            // point carries a residual near rounding level, so per-step
            // defects do not accumulate over long rollouts.
            if rn <= opts.tol && (rn <= opts.tol * 1e-3 || prev_under || it == opts.max_iters) {
                disc.fplus().eval_pass(&f_vals, &mut ctx.ws)?;
                let fpv = DVector::from_fn(n, |i, _| disc.fplus().value(&ctx.ws, i));
                return Ok(StepResult {
                    state: DiscreteState::new(qn.clone(), d2l + fpv),
                    lambda: DVector::zeros(0),
                    newton_iters: it,
                    residual: rn,
                });
            }
            if it == opts.max_iters || !rn.is_finite() {
                return Err(StepError::NonConvergence {
                    iterations: it,
                    residual: rn,
                    history: history.clone(),
                });
            }
            prev_under = rn <= opts.tol;

            if factors.is_none() || rn > 0.1 * prev_rn {
                // M[i][j] = d/d qn_j (residual_i) = D2D1 ld + D2 fminus.
                disc.ld().hess_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
                let mut mat = DMatrix::zeros(n, n);
                {
                    let h = disc.ld().hess_packed(&ctx.ws, 0);
                    for i in 0..n {
                        for j in 0..n {
                            mat[(i, j)] = sym_get(h, 2 * n, i, n + j);
                        }
                    }
                }
                disc.fminus().grad_pass(&f_vals, &wrt_f, &mut ctx.ws)?;
                for i in 0..n {
                    let g = disc.fminus().grad(&ctx.ws, i);
                    for j in 0..n {
                        mat[(i, j)] += g[n + j];
                    }
                }
                factors = Some(mat.lu());
            }
            prev_rn = rn;

            match factors.as_ref().expect("factored above").solve(&(-&r)) {
                Some(dq) => qn += dq,
                None => return Err(StepError::SingularJacobian { iteration: it }),
            }
        }
        unreachable!("loop returns on convergence or budget exhaustion");
    })();
    ctx.buf = ld_vals;
    ctx.buf2 = f_vals;
    result
}

/// Constrained Newton solve in the stacked unknowns `(q_{k+1}, lam)`,
/// with the bordered Jacobian
/// `[[M, -Dh(q_k)^T], [Dh(q_{k+1}), 0]]`.
fn newton_constrained(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    opts: &NewtonOpts,
    ctx: &mut SlotCtx,
) -> Result<StepResult, StepError> {
    let n = disc.nq();
    let m = disc.nu();
    let c = disc.nc();
    let graph_h = disc.constraint_graph().expect("nc > 0 implies constraints");
    let wrt_l: Vec<usize> = (0..2 * n).collect();
    let wrt_f: Vec<usize> = (0..2 * n + m).collect();
    let wrt_h: Vec<usize> = (0..n).collect();

    let mut qn = state.q.clone();
    let mut lam = DVector::zeros(c);
    let mut history = Vec::new();

    let mut ld_vals = std::mem::take(&mut ctx.buf);
    let mut f_vals = std::mem::take(&mut ctx.buf2);
    let result = (|| {
        // Dh at q_k is fixed over the whole solve.
        disc.bind_h(state.q.as_slice(), &mut f_vals);
        graph_h.grad_pass(&f_vals, &wrt_h, &mut ctx.ws)?;
        let mut dh_k_t = DMatrix::zeros(n, c);
        for a in 0..c {
            let g = graph_h.grad(&ctx.ws, a);
            for i in 0..n {
                dh_k_t[(i, a)] = g[i];
            }
        }

        // As in the unconstrained solve, the bordered factorization is
        // reused while the residual contracts by at least 10x per
        // iteration. The `Dh(q_{k+1})` rows go stale together with the
        // rest of the factor; convergence is still judged on the exact
        // residual, so the accepted point is unaffected.
        let mut factors: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
        let mut prev_rn = f64::INFINITY;
        let mut prev_under = false;
        for it in 0..=opts.max_iters {
            disc.bind_ld(state.q.as_slice(), qn.as_slice(), &mut ld_vals);
            disc.ld().grad_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
            let grad_l = disc.ld().grad(&ctx.ws, 0);
            let d1l = DVector::from_row_slice(&grad_l[..n]);
            let d2l = DVector::from_row_slice(&grad_l[n..]);

            disc.bind_f(state.q.as_slice(), qn.as_slice(), u.as_slice(), &mut f_vals);
            disc.fminus().eval_pass(&f_vals, &mut ctx.ws)?;
            let fmv = DVector::from_fn(n, |i, _| disc.fminus().value(&ctx.ws, i));

            // Constraint values at the current iterate.
            disc.bind_h(qn.as_slice(), &mut f_vals);
            graph_h.eval_pass(&f_vals, &mut ctx.ws)?;
            let hv = DVector::from_fn(c, |a, _| graph_h.value(&ctx.ws, a));

            let r1 = &state.p + &d1l + &fmv - &dh_k_t * &lam;
            let rn = r1.amax().max(hv.amax());
            history.push(rn);

            // Same polish rule as the unconstrained solve: linger for one
            // extra cheap update after first crossing the tolerance so the
            // accepted residual (and constraint violation) sits near
            // rounding level rather than just under the tolerance.
            if rn <= opts.tol && (rn <= opts.tol * 1e-3 || prev_under || it == opts.max_iters) {
                disc.bind_f(state.q.as_slice(), qn.as_slice(), u.as_slice(), &mut f_vals);
                disc.fplus().eval_pass(&f_vals, &mut ctx.ws)?;
                let fpv = DVector::from_fn(n, |i, _| disc.fplus().value(&ctx.ws, i));
                return Ok(StepResult {
                    state: DiscreteState::new(qn.clone(), d2l + fpv),
                    lambda: lam.clone(),
                    newton_iters: it,
                    residual: rn,
                });
            }
            if it == opts.max_iters || !rn.is_finite() {
                return Err(StepError::NonConvergence {
                    iterations: it,
                    residual: rn,
                    history: history.clone(),
                });
            }
            prev_under = rn <= opts.tol;

            if factors.is_none() || rn > 0.1 * prev_rn {
                disc.ld().hess_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
                let mut jac = DMatrix::zeros(n + c, n + c);
                {
                    let h = disc.ld().hess_packed(&ctx.ws, 0);
                    for i in 0..n {
                        for j in 0..n {
                            jac[(i, j)] = sym_get(h, 2 * n, i, n + j);
                        }
                    }
                }
                disc.bind_f(state.q.as_slice(), qn.as_slice(), u.as_slice(), &mut f_vals);
                disc.fminus().grad_pass(&f_vals, &wrt_f, &mut ctx.ws)?;
                for i in 0..n {
                    let g = disc.fminus().grad(&ctx.ws, i);
                    for j in 0..n {
                        jac[(i, j)] += g[n + j];
                    }
                }
                for i in 0..n {
                    for a in 0..c {
                        jac[(i, n + a)] = -dh_k_t[(i, a)];
                    }
                }
                // Constraint Jacobian rows at the current iterate.
                disc.bind_h(qn.as_slice(), &mut f_vals);
                graph_h.grad_pass(&f_vals, &wrt_h, &mut ctx.ws)?;
                for a in 0..c {
                    let g = graph_h.grad(&ctx.ws, a);
                    for j in 0..n {
                        jac[(n + a, j)] = g[j];
                    }
                }
                factors = Some(jac.lu());
            }
            prev_rn = rn;

            let mut rhs = DVector::zeros(n + c);
            rhs.rows_mut(0, n).copy_from(&(-&r1));
            rhs.rows_mut(n, c).copy_from(&(-&hv));
            match factors.as_ref().expect("factored above").solve(&rhs) {
                Some(dz) => {
                    qn += dz.rows(0, n);
                    lam += dz.rows(n, c);
                }
                None => return Err(StepError::SingularJacobian { iteration: it }),
            }
        }
        unreachable!("loop returns on convergence or budget exhaustion");
    })();
    ctx.buf = ld_vals;
    ctx.buf2 = f_vals;
    result
}

fn sym_get(packed: &[f64], dim: usize, i: usize, j: usize) -> f64 {
    debug_assert!(i < dim && j < dim);
    let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
    packed[hi * (hi + 1) / 2 + lo]
}

/// Rolls the system out for `steps` transitions. `input(k, t_k)` supplies
/// the input applied over transition `k`.
pub fn simulate(
    disc: &Discretization,
    initial: &DiscreteState,
    steps: usize,
    mut input: impl FnMut(usize, f64) -> DVector<f64>,
    opts: &NewtonOpts,
) -> Result<Trajectory, SimError> {
    let dt = disc.dt();
    let mut ctx = SlotCtx::new();
    let energy = EnergyMap::new(disc);

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut lambdas = Vec::with_capacity(steps);
    let mut energies = Vec::with_capacity(steps);

    times.push(0.0);
    states.push(initial.clone());

    for k in 0..steps {
        let t = k as f64 * dt;
        let u = input(k, t);
        let prev = states.last().expect("nonempty").clone();
        let res = step_with(disc, &prev, &u, opts, &mut ctx)
            .map_err(|source| SimError::Step { step: k, source })?;
        let e = energy
            .at(disc, &prev.q, &res.state.q, &mut ctx)
            .map_err(|e| SimError::Step { step: k, source: StepError::Model(e) })?;

        times.push((k + 1) as f64 * dt);
        inputs.push(u);
        lambdas.push(res.lambda);
        energies.push(e);
        states.push(res.state);
    }

    Ok(Trajectory { times, states, inputs, lambdas, energies })
}

/// Positional binding plan for evaluating the *continuous* Lagrangian at
/// the transition midpoint, built once per rollout.
pub(crate) struct EnergyMap {
    /// For each graph variable: where its value comes from.
    sources: Vec<EnergySource>,
    /// Graph indices of the velocity variables, paired with the
    /// configuration coordinate they differentiate.
    qdot_slots: Vec<(usize, usize)>,
}

enum EnergySource {
    Mid(usize),
    Rate(usize),
    Param(f64),
}

impl EnergyMap {
    pub(crate) fn new(disc: &Discretization) -> Self {
        let n = disc.nq();
        let sys = disc.system();
        let mut sources = Vec::new();
        let mut qdot_slots = Vec::new();
        for (slot, name) in sys.lagrangian().vars().iter().enumerate() {
            let src = if let Some(i) = crate::model::parse_q(name, n) {
                EnergySource::Mid(i)
            } else if let Some(i) = crate::model::parse_qdot(name, n) {
                qdot_slots.push((slot, i));
                EnergySource::Rate(i)
            } else {
                EnergySource::Param(*sys.params().get(name).expect("validated at build"))
            };
            sources.push(src);
        }
        EnergyMap { sources, qdot_slots }
    }

    /// Energy of the continuous system at the midpoint of `(q_k, q_{k+1})`
    /// with the finite-difference velocity:
    /// `E = qdot . dL/dqdot - L`.
    pub(crate) fn at(
        &self,
        disc: &Discretization,
        qk: &DVector<f64>,
        qn: &DVector<f64>,
        ctx: &mut SlotCtx,
    ) -> Result<f64, ModelError> {
        let dt = disc.dt();
        let graph = disc.system().lagrangian();
        ctx.buf.clear();
        for src in &self.sources {
            ctx.buf.push(match *src {
                EnergySource::Mid(i) => (qk[i] + qn[i]) / 2.0,
                EnergySource::Rate(i) => (qn[i] - qk[i]) / dt,
                EnergySource::Param(v) => v,
            });
        }
        if self.qdot_slots.is_empty() {
            // No velocity dependence: E = -L.
            return Ok(-graph.eval_values(&ctx.buf, &mut ctx.ws)?);
        }
        let wrt: Vec<usize> = self.qdot_slots.iter().map(|&(slot, _)| slot).collect();
        graph.grad_pass(&ctx.buf, &wrt, &mut ctx.ws)?;
        let grad = graph.grad(&ctx.ws, 0);
        let mut e = -graph.value(&ctx.ws, 0);
        for (g, &(_, i)) in grad.iter().zip(&self.qdot_slots) {
            e += (qn[i] - qk[i]) / dt * g;
        }
        Ok(e)
    }
}
