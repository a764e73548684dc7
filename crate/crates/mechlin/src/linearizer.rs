//! Exact derivatives of the implicit one-step map.
//!
//! The integrator's update is defined implicitly: the next configuration
//! solves a nonlinear stationarity equation, and the next momentum is an
//! explicit function of the solution. Differentiating through that
//! definition with the implicit function theorem yields closed-form
//! first derivatives ([`linearize`]) and, one level further, exact
//! second-derivative tensors ([`linearize2`]) — no finite differencing,
//! no symbolic algebra, just derivative slots of the discrete Lagrangian,
//! forcing, and constraints contracted against already-solved blocks.
//!
//! Everything hinges on one matrix: `M`, the Jacobian of the stationarity
//! residual with respect to the next configuration. Its LU factorization
//! is computed once per call and reused for every right-hand side (the
//! q-blocks, the p-blocks, and each flattened batch of second-order
//! solves). Constrained systems add a second pivot, the `c × c` Schur
//! complement `S = Dh(q_next) M⁻¹ Dhᵀ(q_k)`, factored once likewise.
//! [`check_singularity`] reports determinants and condition numbers of
//! both pivots without ever failing; [`fd_oracle`] replays the whole
//! construction against central differences of the actual solver.
//!
//! Directions through every derivative are ordered `(q_k, p_k, u_k)`; a
//! direction index below `n` is a configuration direction, below `2n` a
//! momentum direction, and the trailing `m` are input directions.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::graph::{DerivOrder, SymMat};
use crate::integrator::{step, DiscreteState, NewtonOpts, StepError, StepResult};
use crate::model::{
    slots_with, ConstraintSlots, Discretization, ModelError, SecondSlots, SlotCtx,
    SlotDerivatives, ThirdSlots,
};

/// Condition-number threshold above which a pivot is flagged as
/// effectively singular by [`check_singularity`].
pub const CONDITION_FLAG_THRESHOLD: f64 = 1e12;

/// Failures while constructing a linearization.
#[derive(Clone, Debug)]
pub enum LinError {
    /// The update Jacobian `M` is not invertible at this transition.
    SingularM { det: f64, condition: f64 },
    /// The constraint Schur complement `S` is not invertible.
    SingularS { det: f64, condition: f64 },
    /// A finite-difference probe could not complete a solver step.
    Probe { detail: String },
    Model(ModelError),
}

impl fmt::Display for LinError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinError::SingularM { det, condition } => write!(
                f,
                "update Jacobian is singular (det {det:.3e}, condition {condition:.3e})"
            ),
            LinError::SingularS { det, condition } => write!(
                f,
                "constraint Schur complement is singular (det {det:.3e}, condition {condition:.3e})"
            ),
            LinError::Probe { detail } => write!(f, "finite-difference probe failed: {detail}"),
            LinError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LinError {}

impl From<ModelError> for LinError {
    fn from(e: ModelError) -> Self {
        LinError::Model(e)
    }
}

/// First derivatives of the one-step map `(q_k, p_k, u_k) ↦
/// (q_{k+1}, p_{k+1})`, stored as the six structural blocks plus the
/// assembled state-space pair.
#[derive(Clone, Debug)]
pub struct FirstLinearization {
    pub dq_dq: DMatrix<f64>,
    pub dq_dp: DMatrix<f64>,
    pub dq_du: DMatrix<f64>,
    pub dp_dq: DMatrix<f64>,
    pub dp_dp: DMatrix<f64>,
    pub dp_du: DMatrix<f64>,
    /// `2n × 2n` state transition matrix `[[dq_dq, dq_dp], [dp_dq, dp_dp]]`.
    pub a: DMatrix<f64>,
    /// `2n × m` input matrix `[[dq_du], [dp_du]]`.
    pub b: DMatrix<f64>,
    /// The update Jacobian whose inverse shaped every block.
    pub m_matrix: DMatrix<f64>,
    /// 2-norm condition number of `m_matrix`.
    pub m_condition: f64,
}

/// One second-derivative tensor family: for each output coordinate, the
/// six distinct blocks of its Hessian over directions `(q_k, p_k, u_k)`.
///
/// `qq[i]` is `n × n`, `qp[i]` is `n × n` (rows differentiate by `q`,
/// columns by `p`), `pp[i]` is `n × n`, `qu[i]` and `pu[i]` are `n × m`,
/// `uu[i]` is `m × m`. [`SecondBlocks::hessian`] reassembles the full
/// symmetric `(2n+m) × (2n+m)` matrix for output `i`.
#[derive(Clone, Debug)]
pub struct SecondBlocks {
    pub qq: Vec<DMatrix<f64>>,
    pub qp: Vec<DMatrix<f64>>,
    pub pp: Vec<DMatrix<f64>>,
    pub qu: Vec<DMatrix<f64>>,
    pub pu: Vec<DMatrix<f64>>,
    pub uu: Vec<DMatrix<f64>>,
}

impl SecondBlocks {
    /// Number of output coordinates covered.
    pub fn outputs(&self) -> usize {
        self.qq.len()
    }

    /// Full symmetric Hessian of output `i` over stacked `(q, p, u)`
    /// directions.
    pub fn hessian(&self, i: usize) -> DMatrix<f64> {
        let n = self.qq[i].nrows();
        let m = self.uu[i].nrows();
        let d = 2 * n + m;
        let mut h = DMatrix::zeros(d, d);
        h.view_mut((0, 0), (n, n)).copy_from(&self.qq[i]);
        h.view_mut((0, n), (n, n)).copy_from(&self.qp[i]);
        h.view_mut((n, 0), (n, n)).copy_from(&self.qp[i].transpose());
        h.view_mut((n, n), (n, n)).copy_from(&self.pp[i]);
        h.view_mut((0, 2 * n), (n, m)).copy_from(&self.qu[i]);
        h.view_mut((2 * n, 0), (m, n)).copy_from(&self.qu[i].transpose());
        h.view_mut((n, 2 * n), (n, m)).copy_from(&self.pu[i]);
        h.view_mut((2 * n, n), (m, n)).copy_from(&self.pu[i].transpose());
        h.view_mut((2 * n, 2 * n), (m, m)).copy_from(&self.uu[i]);
        h
    }

    /// Splits per-output full Hessians into the block fields. Blocks are
    /// taken verbatim from the upper block triangle — any asymmetry in
    /// the computed Hessians stays visible in the diagonal blocks rather
    /// than being smoothed away.
    fn from_hessians(full: &[DMatrix<f64>], n: usize, m: usize) -> Self {
        for h in full {
            debug_assert!(
                (h - h.transpose()).amax() <= 1e-10 * (1.0 + h.amax()),
                "second-derivative solve produced an asymmetric Hessian"
            );
        }
        let pick = |h: &DMatrix<f64>, r0: usize, c0: usize, nr: usize, nc: usize| {
            DMatrix::from_fn(nr, nc, |i, j| h[(r0 + i, c0 + j)])
        };
        SecondBlocks {
            qq: full.iter().map(|h| pick(h, 0, 0, n, n)).collect(),
            qp: full.iter().map(|h| pick(h, 0, n, n, n)).collect(),
            pp: full.iter().map(|h| pick(h, n, n, n, n)).collect(),
            qu: full.iter().map(|h| pick(h, 0, 2 * n, n, m)).collect(),
            pu: full.iter().map(|h| pick(h, n, 2 * n, n, m)).collect(),
            uu: full.iter().map(|h| pick(h, 2 * n, 2 * n, m, m)).collect(),
        }
    }
}

/// Second derivatives of the one-step map: one [`SecondBlocks`] family
/// for the next configuration and one for the next momentum.
#[derive(Clone, Debug)]
pub struct SecondLinearization {
    pub q_next: SecondBlocks,
    pub p_next: SecondBlocks,
}

/// First derivatives of the constraint multipliers, with the optional
/// second-order family filled in by [`linearize2_constrained`].
#[derive(Clone, Debug)]
pub struct ConstraintSensitivities {
    /// `c × n` derivative of `λ_k` by the current configuration.
    pub dlam_dq: DMatrix<f64>,
    /// `c × n` derivative by the current momentum.
    pub dlam_dp: DMatrix<f64>,
    /// `c × m` derivative by the input.
    pub dlam_du: DMatrix<f64>,
    /// Second-derivative tensors of `λ_k`, one Hessian family with `c`
    /// outputs; `None` until a second-order pass supplies it.
    pub second: Option<SecondBlocks>,
}

/// Diagnostic snapshot of the two pivots that make a transition
/// linearizable. Never an error: exact or near singularity is reported
/// through the flags.
#[derive(Clone, Debug)]
pub struct SingularityReport {
    pub m_det: f64,
    pub m_condition: f64,
    /// Schur-complement determinant; `None` for unconstrained systems or
    /// when a singular `M` makes `S` uncomputable.
    pub s_det: Option<f64>,
    pub s_condition: Option<f64>,
    /// Raised when `M` is singular or its condition exceeds
    /// [`CONDITION_FLAG_THRESHOLD`].
    pub m_flagged: bool,
    /// Raised for a singular/ill-conditioned `S`, or when `S` could not
    /// be formed on a constrained system.
    pub s_flagged: bool,
}

impl SingularityReport {
    /// True when any pivot was flagged.
    pub fn any(&self) -> bool {
        self.m_flagged || self.s_flagged
    }
}

// --------------------------------------------------------------------------
// Shared assembly helpers

/// Factored update Jacobian with its diagnostics.
struct Pivot {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    matrix: DMatrix<f64>,
    det: f64,
    condition: f64,
}

fn factor(matrix: DMatrix<f64>) -> Pivot {
    let lu = matrix.clone().lu();
    let det = lu.determinant();
    let sv = matrix.singular_values();
    let (mut hi, mut lo) = (0.0f64, f64::INFINITY);
    for &s in sv.iter() {
        hi = hi.max(s);
        lo = lo.min(s);
    }
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Pivot { lu, matrix, det, condition }
}

impl Pivot {
    fn usable(&self) -> bool {
        self.lu.is_invertible() && self.det.is_finite()
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(rhs).expect("pivot checked invertible before use")
    }
}

/// The update Jacobian `M`: stationarity residual differentiated by the
/// next configuration.
fn m_matrix(second: &SecondSlots) -> DMatrix<f64> {
    &second.d2d1l + &second.d2f_minus
}

/// Direct derivative of the stationarity residual by the current
/// configuration, including the constraint-curvature term when present.
fn c_q(second: &SecondSlots, cons: Option<(&ConstraintSlots, &DVector<f64>)>) -> DMatrix<f64> {
    let mut c = &second.d1d1l + &second.d1f_minus;
    if let Some((cs, lambda)) = cons {
        let d2h_k = cs.d2h_k.as_ref().expect("second-order constraint slots");
        let n = c.nrows();
        for (a, hess) in d2h_k.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    c[(i, j)] -= lambda[a] * hess.get(i, j);
                }
            }
        }
    }
    c
}

/// Everything the first- and second-order passes share: factored pivots
/// and the first-derivative blocks of the implicit solution.
struct FirstPass {
    m: Pivot,
    /// `S` pivot with `Y = M⁻¹ Dhᵀ(q_k)`; `None` when unconstrained.
    s: Option<(Pivot, DMatrix<f64>)>,
    first: FirstLinearization,
    sens: Option<ConstraintSensitivities>,
}

fn first_pass(
    disc: &Discretization,
    derivs: &SlotDerivatives,
    lambda: &DVector<f64>,
) -> Result<FirstPass, LinError> {
    let n = disc.nq();
    let nu = disc.nu();
    let nc = disc.nc();
    let second = derivs.second.as_ref().expect("second-order slots");

    let m = factor(m_matrix(second));
    if !m.usable() {
        return Err(LinError::SingularM { det: m.det, condition: m.condition });
    }

    let (dq_dq, dq_dp, dq_du, s, sens) = if nc == 0 {
        let cq = c_q(second, None);
        let dq_dq = -m.solve(&cq);
        let dq_dp = -m.solve(&DMatrix::identity(n, n));
        let dq_du = -m.solve(&second.d3f_minus);
        (dq_dq, dq_dp, dq_du, None, None)
    } else {
        let cons = derivs.constraints.as_ref().expect("constraint slots");
        let cq = c_q(second, Some((cons, lambda)));
        let y = m.solve(&cons.dh_k.transpose());
        let s = factor(&cons.dh_next * &y);
        if !s.usable() {
            return Err(LinError::SingularS { det: s.det, condition: s.condition });
        }
        // For each direction family X with direct residual derivative C_X:
        //   λ_X  = S⁻¹ Dh(q_next) M⁻¹ C_X
        //   qn_X = −M⁻¹ (C_X − Dhᵀ(q_k) λ_X)
        let solve_family = |c_x: &DMatrix<f64>| {
            let z = m.solve(c_x);
            let lam_x = s.solve(&(&cons.dh_next * &z));
            (&y * &lam_x - z, lam_x)
        };
        let (dq_dq, dlam_dq) = solve_family(&cq);
        let (dq_dp, dlam_dp) = solve_family(&DMatrix::identity(n, n));
        let (dq_du, dlam_du) = solve_family(&second.d3f_minus);
        let sens = ConstraintSensitivities { dlam_dq, dlam_dp, dlam_du, second: None };
        (dq_dq, dq_dp, dq_du, Some((s, y)), Some(sens))
    };

    // The momentum update is explicit in (q_k, q_next, u); its blocks are
    // direct terms plus the q-blocks above pushed through d(p_next)/d(q_next).
    let k_mat = &second.d2d2l + &second.d2f_plus;
    let dp_dq = (&second.d1d2l + &second.d1f_plus) + &k_mat * &dq_dq;
    let dp_dp = &k_mat * &dq_dp;
    let dp_du = &second.d3f_plus + &k_mat * &dq_du;

    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&dq_dq);
    a.view_mut((0, n), (n, n)).copy_from(&dq_dp);
    a.view_mut((n, 0), (n, n)).copy_from(&dp_dq);
    a.view_mut((n, n), (n, n)).copy_from(&dp_dp);
    let mut b = DMatrix::zeros(2 * n, nu);
    b.view_mut((0, 0), (n, nu)).copy_from(&dq_du);
    b.view_mut((n, 0), (n, nu)).copy_from(&dp_du);

    let first = FirstLinearization {
        dq_dq,
        dq_dp,
        dq_du,
        dp_dq,
        dp_dp,
        dp_du,
        a,
        b,
        m_condition: m.condition,
        m_matrix: m.matrix.clone(),
    };
    Ok(FirstPass { m, s, first, sens })
}

// --------------------------------------------------------------------------
// First order

/// First-order linearization of an accepted unconstrained step.
///
/// `step` must be the solver result from `(state_k, u)`; its
/// configuration is where all derivative slots are evaluated.
pub fn linearize(
    disc: &Discretization,
    state_k: &DiscreteState,
    u: &DVector<f64>,
    step: &StepResult,
) -> Result<FirstLinearization, LinError> {
    let mut ctx = SlotCtx::new();
    let derivs = slots_with(
        disc,
        &state_k.q,
        &step.state.q,
        u,
        DerivOrder::Second,
        disc.nc() > 0,
        &mut ctx,
    )?;
    Ok(first_pass(disc, &derivs, &step.lambda)?.first)
}

/// First-order linearization of a constrained step, with multiplier
/// sensitivities.
pub fn linearize_constrained(
    disc: &Discretization,
    state_k: &DiscreteState,
    u: &DVector<f64>,
    step: &StepResult,
) -> Result<(FirstLinearization, ConstraintSensitivities), LinError> {
    if disc.nc() == 0 {
        return Err(LinError::Model(ModelError::Shape {
            detail: "constrained linearization of a system with no constraints".into(),
        }));
    }
    let mut ctx = SlotCtx::new();
    let derivs = slots_with(
        disc,
        &state_k.q,
        &step.state.q,
        u,
        DerivOrder::Second,
        true,
        &mut ctx,
    )?;
    let pass = first_pass(disc, &derivs, &step.lambda)?;
    Ok((pass.first, pass.sens.expect("constrained pass fills sensitivities")))
}

// --------------------------------------------------------------------------
// Second order

/// Dense per-output Hessian of the stationarity residual (`which = 0`,
/// rows of `l3` indexed by `q_k`) or of the momentum update (`which = 1`,
/// rows indexed by `q_next`) over the stacked variables `(q_k, q_next, u)`.
fn residual_hessian(
    third: &ThirdSlots,
    which: usize,
    i: usize,
    n: usize,
    m: usize,
) -> DMatrix<f64> {
    let d = 2 * n + m;
    let f_hess: &SymMat = if which == 0 { &third.f_minus_hess[i] } else { &third.f_plus_hess[i] };
    let row = which * n + i;
    DMatrix::from_fn(d, d, |a, b| {
        let l = if a < 2 * n && b < 2 * n { third.l3.get(row, a, b) } else { 0.0 };
        l + f_hess.get(a, b)
    })
}

/// Direction lift `W`: columns are the `(q, p, u)` directions expressed
/// in the stacked variables `(q_k, q_next, u)` using the first-order
/// blocks for the implicit middle rows.
fn direction_lift(first: &FirstLinearization, n: usize, m: usize) -> DMatrix<f64> {
    let d = 2 * n + m;
    let mut w = DMatrix::zeros(d, d);
    w.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    w.view_mut((n, 0), (n, n)).copy_from(&first.dq_dq);
    w.view_mut((n, n), (n, n)).copy_from(&first.dq_dp);
    w.view_mut((n, 2 * n), (n, m)).copy_from(&first.dq_du);
    w.view_mut((2 * n, 2 * n), (m, m)).copy_from(&DMatrix::identity(m, m));
    w
}

/// Column-major flattening of per-output direction-pair matrices into one
/// `outputs × d²` batch, so a single factorization solves every pair.
fn flatten_rows(mats: &[DMatrix<f64>], d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(mats.len(), d * d);
    for (i, m) in mats.iter().enumerate() {
        for (ab, v) in m.as_slice().iter().enumerate() {
            out[(i, ab)] = *v;
        }
    }
    out
}

fn unflatten_row(batch: &DMatrix<f64>, i: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |a, b| batch[(i, b * d + a)])
}

struct SecondPass {
    map: SecondLinearization,
    lambda2: Option<SecondBlocks>,
}

fn second_pass(
    disc: &Discretization,
    derivs: &SlotDerivatives,
    lambda: &DVector<f64>,
    pass: &FirstPass,
) -> SecondPass {
    let n = disc.nq();
    let m = disc.nu();
    let nc = disc.nc();
    let d = 2 * n + m;
    let second = derivs.second.as_ref().expect("second-order slots");
    let third = derivs.third.as_ref().expect("third-order slots");
    let w = direction_lift(&pass.first, n, m);

    // Reduced Hessians of the stationarity residual along the lifted
    // directions, with constraint curvature folded in.
    let mut g: Vec<DMatrix<f64>> = (0..n)
        .map(|i| &w.transpose() * residual_hessian(third, 0, i, n, m) * &w)
        .collect();
    if nc > 0 {
        let cons = derivs.constraints.as_ref().expect("constraint slots");
        let d2h_k = cons.d2h_k.as_ref().expect("constraint curvature");
        let d3h_k = cons.d3h_k.as_ref().expect("constraint third derivatives");
        let sens = pass.sens.as_ref().expect("constrained first pass");
        // λ-first blocks in direction order (q, p, u).
        let mut lam1 = DMatrix::zeros(nc, d);
        lam1.view_mut((0, 0), (nc, n)).copy_from(&sens.dlam_dq);
        lam1.view_mut((0, n), (nc, n)).copy_from(&sens.dlam_dp);
        lam1.view_mut((0, 2 * n), (nc, m)).copy_from(&sens.dlam_du);
        for i in 0..n {
            let gi = &mut g[i];
            for c in 0..nc {
                // −λ_c D³h_c(q_k): only configuration-direction pairs touch
                // the current configuration directly.
                for a in 0..n {
                    for b in 0..n {
                        gi[(a, b)] -= lambda[c] * d3h_k[c].get(i, a, b);
                    }
                }
                // −D²h_c(q_k) cross-contracted with λ first derivatives.
                for a in 0..n {
                    let hia = d2h_k[c].get(i, a);
                    for b in 0..d {
                        gi[(a, b)] -= hia * lam1[(c, b)];
                        gi[(b, a)] -= hia * lam1[(c, b)];
                    }
                }
            }
        }
    }

    let g_flat = flatten_rows(&g, d);
    let z_flat = pass.m.solve(&g_flat);

    let (qn2_flat, lambda2) = if nc == 0 {
        (-z_flat, None)
    } else {
        let cons = derivs.constraints.as_ref().expect("constraint slots");
        let d2h_n = cons.d2h_next.as_ref().expect("constraint curvature");
        let (s, y) = pass.s.as_ref().expect("constrained first pass");
        // Differentiating h(q_next(·)) = 0 twice: Dh(q_next) qn_AB =
        // −(qn_A)ᵀ D²h(q_next) (qn_B), with qn_X the lifted middle rows.
        let qn1 = w.view((n, 0), (n, d)).into_owned();
        let t_mats: Vec<DMatrix<f64>> = (0..nc)
            .map(|c| &qn1.transpose() * d2h_n[c].to_dmatrix() * &qn1)
            .collect();
        let t_flat = flatten_rows(&t_mats, d);
        let lam2_flat = s.solve(&(&cons.dh_next * &z_flat - &t_flat));
        let qn2_flat = y * &lam2_flat - z_flat;
        let lam2 = SecondBlocks::from_hessians(
            &(0..nc).map(|c| unflatten_row(&lam2_flat, c, d)).collect::<Vec<_>>(),
            n,
            m,
        );
        (qn2_flat, Some(lam2))
    };

    // Momentum update: explicit, so its Hessian is the lifted residual
    // Hessian of the update formula plus the implicit correction routed
    // through d(p_next)/d(q_next).
    let k_mat = &second.d2d2l + &second.d2f_plus;
    let mut p_full = Vec::with_capacity(n);
    let q_full: Vec<DMatrix<f64>> = (0..n).map(|i| unflatten_row(&qn2_flat, i, d)).collect();
    for i in 0..n {
        let mut h = &w.transpose() * residual_hessian(third, 1, i, n, m) * &w;
        for j in 0..n {
            h += k_mat[(i, j)] * &q_full[j];
        }
        p_full.push(h);
    }

    SecondPass {
        map: SecondLinearization {
            q_next: SecondBlocks::from_hessians(&q_full, n, m),
            p_next: SecondBlocks::from_hessians(&p_full, n, m),
        },
        lambda2,
    }
}

/// Second-order linearization of an unconstrained step. `first` must be
/// the output of [`linearize`] at the same transition; its blocks lift
/// the differentiation directions through the implicit solution.
pub fn linearize2(
    disc: &Discretization,
    state_k: &DiscreteState,
    u: &DVector<f64>,
    step: &StepResult,
    first: &FirstLinearization,
) -> Result<SecondLinearization, LinError> {
    let mut ctx = SlotCtx::new();
    let derivs = slots_with(
        disc,
        &state_k.q,
        &step.state.q,
        u,
        DerivOrder::Third,
        disc.nc() > 0,
        &mut ctx,
    )?;
    let pass = reuse_first(disc, &derivs, &step.lambda, first)?;
    Ok(second_pass(disc, &derivs, &step.lambda, &pass).map)
}

/// Second-order linearization of a constrained step, returning the map
/// tensors together with the multiplier second derivatives.
pub fn linearize2_constrained(
    disc: &Discretization,
    state_k: &DiscreteState,
    u: &DVector<f64>,
    step: &StepResult,
    first: &FirstLinearization,
    sens: &ConstraintSensitivities,
) -> Result<(SecondLinearization, SecondBlocks), LinError> {
    if disc.nc() == 0 {
        return Err(LinError::Model(ModelError::Shape {
            detail: "constrained linearization of a system with no constraints".into(),
        }));
    }
    let mut ctx = SlotCtx::new();
    let derivs = slots_with(
        disc,
        &state_k.q,
        &step.state.q,
        u,
        DerivOrder::Third,
        true,
        &mut ctx,
    )?;
    let mut pass = reuse_first(disc, &derivs, &step.lambda, first)?;
    if let Some(ps) = pass.sens.as_mut() {
        ps.dlam_dq = sens.dlam_dq.clone();
        ps.dlam_dp = sens.dlam_dp.clone();
        ps.dlam_du = sens.dlam_du.clone();
    }
    let out = second_pass(disc, &derivs, &step.lambda, &pass);
    Ok((out.map, out.lambda2.expect("constrained pass fills lambda tensors")))
}

/// Rebuilds the factored pivots for a second-order call, keeping the
/// caller's first-order blocks (the mandated evaluation order: state,
/// then first derivatives, then second derivatives).
fn reuse_first(
    disc: &Discretization,
    derivs: &SlotDerivatives,
    lambda: &DVector<f64>,
    first: &FirstLinearization,
) -> Result<FirstPass, LinError> {
    let mut pass = first_pass(disc, derivs, lambda)?;
    pass.first = first.clone();
    Ok(pass)
}

// --------------------------------------------------------------------------
// Singularity diagnostics

/// Reports determinants, condition numbers, and threshold flags for the
/// pivots at an arbitrary configuration pair — the pair need not come
/// from an accepted step, so hypothetical transitions can be probed.
pub fn check_singularity(
    disc: &Discretization,
    q_k: &DVector<f64>,
    q_next: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<SingularityReport, ModelError> {
    let mut ctx = SlotCtx::new();
    let derivs = slots_with(disc, q_k, q_next, u, DerivOrder::Second, disc.nc() > 0, &mut ctx)?;
    let second = derivs.second.as_ref().expect("second-order slots");
    let m = factor(m_matrix(second));
    let m_flagged = !m.usable() || m.condition > CONDITION_FLAG_THRESHOLD;

    let (s_det, s_condition, s_flagged) = if disc.nc() == 0 {
        (None, None, false)
    } else if !m.usable() {
        // S needs M⁻¹; report it unknown and suspicious.
        (None, None, true)
    } else {
        let cons = derivs.constraints.as_ref().expect("constraint slots");
        let y = m.solve(&cons.dh_k.transpose());
        let s = factor(&cons.dh_next * y);
        let flagged = !s.usable() || s.condition > CONDITION_FLAG_THRESHOLD;
        (Some(s.det), Some(s.condition), flagged)
    };

    Ok(SingularityReport {
        m_det: m.det,
        m_condition: m.condition,
        s_det,
        s_condition,
        m_flagged,
        s_flagged,
    })
}

// --------------------------------------------------------------------------
// Finite-difference oracle

/// Central-difference verification of the analytic linearization at one
/// point: re-solves the full implicit step at perturbed states and
/// compares the difference quotients against every analytic block.
/// Returns the worst guarded relative error
/// `|analytic − fd| / (1 + |analytic|)`.
///
/// Order 1 probes with `1e-5`; order 2 probes pair-wise with `1e-4`.
/// Constrained systems include the multiplier blocks.
pub fn fd_oracle(
    disc: &Discretization,
    state_k: &DiscreteState,
    u: &DVector<f64>,
    order: DerivOrder,
    opts: &NewtonOpts,
) -> Result<f64, LinError> {
    let n = disc.nq();
    let m = disc.nu();
    let nc = disc.nc();
    let d = 2 * n + m;
    let base = probe(disc, state_k, u, opts)?;

    let first = linearize(disc, state_k, u, &base)?;
    let sens = if nc > 0 {
        Some(linearize_constrained(disc, state_k, u, &base)?.1)
    } else {
        None
    };

    let mut worst = 0.0f64;
    let mut record = |analytic: f64, fd: f64| {
        let err = (analytic - fd).abs() / (1.0 + analytic.abs());
        if err > worst {
            worst = err;
        }
    };

    match order {
        DerivOrder::First => {
            let delta = 1e-5;
            for dir in 0..d {
                let plus = probe_shifted(disc, state_k, u, dir, delta, opts)?;
                let minus = probe_shifted(disc, state_k, u, dir, -delta, opts)?;
                for i in 0..n {
                    let fd_q = (plus.state.q[i] - minus.state.q[i]) / (2.0 * delta);
                    let fd_p = (plus.state.p[i] - minus.state.p[i]) / (2.0 * delta);
                    record(first_block(&first, i, dir, n), fd_q);
                    record(first_block_p(&first, i, dir, n), fd_p);
                }
                if let Some(sens) = &sens {
                    for c in 0..nc {
                        let fd_l = (plus.lambda[c] - minus.lambda[c]) / (2.0 * delta);
                        record(lambda_block(sens, c, dir, n), fd_l);
                    }
                }
            }
        }
        DerivOrder::Second | DerivOrder::Third => {
            let delta = 1e-4;
            let second = linearize2(disc, state_k, u, &base, &first)?;
            let lam2 = match &sens {
                Some(sens) => {
                    Some(linearize2_constrained(disc, state_k, u, &base, &first, sens)?.1)
                }
                None => None,
            };
            let q_hess: Vec<_> = (0..n).map(|i| second.q_next.hessian(i)).collect();
            let p_hess: Vec<_> = (0..n).map(|i| second.p_next.hessian(i)).collect();
            let l_hess: Vec<_> = lam2
                .as_ref()
                .map(|l| (0..nc).map(|c| l.hessian(c)).collect::<Vec<_>>())
                .unwrap_or_default();
            for a in 0..d {
                for b in 0..=a {
                    let (fd_q, fd_p, fd_l) = if a == b {
                        let plus = probe_shifted(disc, state_k, u, a, delta, opts)?;
                        let minus = probe_shifted(disc, state_k, u, a, -delta, opts)?;
                        second_quotient_diag(&plus, &base, &minus, delta, n, nc)
                    } else {
                        let pp = probe_shifted2(disc, state_k, u, a, delta, b, delta, opts)?;
                        let pm = probe_shifted2(disc, state_k, u, a, delta, b, -delta, opts)?;
                        let mp = probe_shifted2(disc, state_k, u, a, -delta, b, delta, opts)?;
                        let mm = probe_shifted2(disc, state_k, u, a, -delta, b, -delta, opts)?;
                        second_quotient_cross(&pp, &pm, &mp, &mm, delta, n, nc)
                    };
                    for i in 0..n {
                        record(q_hess[i][(a, b)], fd_q[i]);
                        record(p_hess[i][(a, b)], fd_p[i]);
                    }
                    for (c, h) in l_hess.iter().enumerate() {
                        record(h[(a, b)], fd_l[c]);
                    }
                }
            }
        }
    }
    Ok(worst)
}

fn first_block(first: &FirstLinearization, i: usize, dir: usize, n: usize) -> f64 {
    if dir < n {
        first.dq_dq[(i, dir)]
    } else if dir < 2 * n {
        first.dq_dp[(i, dir - n)]
    } else {
        first.dq_du[(i, dir - 2 * n)]
    }
}

fn first_block_p(first: &FirstLinearization, i: usize, dir: usize, n: usize) -> f64 {
    if dir < n {
        first.dp_dq[(i, dir)]
    } else if dir < 2 * n {
        first.dp_dp[(i, dir - n)]
    } else {
        first.dp_du[(i, dir - 2 * n)]
    }
}

fn lambda_block(sens: &ConstraintSensitivities, c: usize, dir: usize, n: usize) -> f64 {
    if dir < n {
        sens.dlam_dq[(c, dir)]
    } else if dir < 2 * n {
        sens.dlam_dp[(c, dir - n)]
    } else {
        sens.dlam_du[(c, dir - 2 * n)]
    }
}

fn second_quotient_diag(
    plus: &StepResult,
    base: &StepResult,
    minus: &StepResult,
    delta: f64,
    n: usize,
    nc: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dd = delta * delta;
    let q = (0..n)
        .map(|i| (plus.state.q[i] - 2.0 * base.state.q[i] + minus.state.q[i]) / dd)
        .collect();
    let p = (0..n)
        .map(|i| (plus.state.p[i] - 2.0 * base.state.p[i] + minus.state.p[i]) / dd)
        .collect();
    let l = (0..nc)
        .map(|c| (plus.lambda[c] - 2.0 * base.lambda[c] + minus.lambda[c]) / dd)
        .collect();
    (q, p, l)
}

fn second_quotient_cross(
    pp: &StepResult,
    pm: &StepResult,
    mp: &StepResult,
    mm: &StepResult,
    delta: f64,
    n: usize,
    nc: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dd = 4.0 * delta * delta;
    let q = (0..n)
        .map(|i| (pp.state.q[i] - pm.state.q[i] - mp.state.q[i] + mm.state.q[i]) / dd)
        .collect();
    let p = (0..n)
        .map(|i| (pp.state.p[i] - pm.state.p[i] - mp.state.p[i] + mm.state.p[i]) / dd)
        .collect();
    let l = (0..nc)
        .map(|c| (pp.lambda[c] - pm.lambda[c] - mp.lambda[c] + mm.lambda[c]) / dd)
        .collect();
    (q, p, l)
}

fn probe(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    opts: &NewtonOpts,
) -> Result<StepResult, LinError> {
    step(disc, state, u, opts).map_err(|e| probe_error(&e))
}

fn probe_shifted(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    dir: usize,
    delta: f64,
    opts: &NewtonOpts,
) -> Result<StepResult, LinError> {
    let (s, v) = shifted(state, u, dir, delta);
    step(disc, &s, &v, opts).map_err(|e| probe_error(&e))
}

fn probe_shifted2(
    disc: &Discretization,
    state: &DiscreteState,
    u: &DVector<f64>,
    dir_a: usize,
    delta_a: f64,
    dir_b: usize,
    delta_b: f64,
    opts: &NewtonOpts,
) -> Result<StepResult, LinError> {
    let (s, v) = shifted(state, u, dir_a, delta_a);
    let (s, v) = shifted(&s, &v, dir_b, delta_b);
    step(disc, &s, &v, opts).map_err(|e| probe_error(&e))
}

fn shifted(
    state: &DiscreteState,
    u: &DVector<f64>,
    dir: usize,
    delta: f64,
) -> (DiscreteState, DVector<f64>) {
    let n = state.q.len();
    let mut q = state.q.clone();
    let mut p = state.p.clone();
    let mut uu = u.clone();
    if dir < n {
        q[dir] += delta;
    } else if dir < 2 * n {
        p[dir - n] += delta;
    } else {
        uu[dir - 2 * n] += delta;
    }
    (DiscreteState::new(q, p), uu)
}

fn probe_error(e: &StepError) -> LinError {
    LinError::Probe { detail: e.to_string() }
}
