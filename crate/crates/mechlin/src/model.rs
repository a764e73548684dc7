//! Mechanical system descriptions and their fixed-step discretization.
//!
//! A [`MechSystem`] holds a Lagrangian `L(q, qdot)`, a forcing law
//! `F(q, qdot, u)`, and holonomic constraints `h(q)` as expression
//! graphs over conventionally named variables (`q0..`, `qdot0..`,
//! `u0..`, plus free parameter names). [`discretize`] rewrites these
//! into two-point discrete objects over `qk0../qn0..`:
//!
//! * the discrete Lagrangian, the continuous one at the interval
//!   midpoint scaled by the timestep:
//!   `ld(qk, qn) = L((qk + qn)/2, (qn - qk)/dt) * dt`;
//! * the left discrete forcing `fminus(qk, qn, u) = F(mid, rate, u) * dt`
//!   and the right discrete forcing `fplus`, identically zero under this
//!   quadrature but carried through every formula;
//! * the constraints at a single configuration (`qn0..`).
//!
//! [`slots`] then evaluates every derivative block the integrator and
//! linearizers consume, in one shared workspace.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::graph::{
    DerivOrder, EvalError, Expr, ExprGraph, GraphBuilder, SymMat, SymTen3, Workspace,
};

/// Variable-name conventions shared by builders, parsers, and templates.
pub fn q_var(i: usize) -> String {
    format!("q{i}")
}

pub fn qdot_var(i: usize) -> String {
    format!("qdot{i}")
}

pub fn u_var(i: usize) -> String {
    format!("u{i}")
}

pub(crate) fn qk_var(i: usize) -> String {
    format!("qk{i}")
}

pub(crate) fn qn_var(i: usize) -> String {
    format!("qn{i}")
}

/// Exact match against the configuration/velocity naming conventions.
pub(crate) fn parse_q(name: &str, n: usize) -> Option<usize> {
    parse_indexed(name, "q", n)
}

pub(crate) fn parse_qdot(name: &str, n: usize) -> Option<usize> {
    parse_indexed(name, "qdot", n)
}

/// Exact match of `name` against `prefix` + decimal index below `count`.
fn parse_indexed(name: &str, prefix: &str, count: usize) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    let i: usize = rest.parse().ok()?;
    (i < count && name == format!("{prefix}{i}")).then_some(i)
}

/// Names reserved for the positional variable conventions; parameters may
/// not use them.
fn is_reserved(name: &str) -> bool {
    for prefix in ["qdot", "qk", "qn", "q", "u"] {
        if let Some(rest) = name.strip_prefix(prefix) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                return true;
            }
        }
    }
    false
}

/// Errors from assembling or differentiating a model.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// Dimension or count mismatch in a description.
    Shape { detail: String },
    /// A graph references a variable not allowed in its role.
    BadVariable { graph: &'static str, name: String },
    /// Constraint count must stay below the configuration dimension.
    TooManyConstraints { n: usize, c: usize },
    /// Parameter values must be finite.
    BadParameter { name: String },
    /// Timestep must be positive and finite.
    BadTimestep { dt: f64 },
    Eval(EvalError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Shape { detail } => write!(f, "{detail}"),
            ModelError::BadVariable { graph, name } => {
                write!(f, "{graph} references variable `{name}` not allowed in that role")
            }
            ModelError::TooManyConstraints { n, c } => {
                write!(f, "{c} constraints on a {n}-dimensional configuration (need c < n)")
            }
            ModelError::BadParameter { name } => {
                write!(f, "parameter `{name}` has a non-finite value")
            }
            ModelError::BadTimestep { dt } => write!(f, "timestep {dt} must be positive"),
            ModelError::Eval(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<EvalError> for ModelError {
    fn from(e: EvalError) -> Self {
        ModelError::Eval(e)
    }
}

/// A forced mechanical system with optional holonomic constraints.
///
/// * `lagrangian`: one output over `q0.. qdot0..` and parameters.
/// * `forcing`: `nq` outputs (generalized force per configuration
///   coordinate) over `q0.. qdot0.. u0..` and parameters. Forces may not
///   reference anything else; in particular no next-step input exists in
///   the variable set, which enforces the discretization's restriction
///   that discrete forces depend on the current input only.
/// * `constraints`: `nc` outputs over `q0..` and parameters (may be a
///   zero-output graph when unconstrained).
#[derive(Clone, Debug)]
pub struct MechSystem {
    nq: usize,
    nu: usize,
    nc: usize,
    lagrangian: ExprGraph,
    forcing: ExprGraph,
    constraints: Option<ExprGraph>,
    params: BTreeMap<String, f64>,
}

impl MechSystem {
    pub fn new(
        nq: usize,
        nu: usize,
        lagrangian: ExprGraph,
        forcing: ExprGraph,
        constraints: Option<ExprGraph>,
        params: BTreeMap<String, f64>,
    ) -> Result<Self, ModelError> {
        if nq == 0 {
            return Err(ModelError::Shape { detail: "configuration dimension is zero".into() });
        }
        for (name, v) in &params {
            if !v.is_finite() {
                return Err(ModelError::BadParameter { name: name.clone() });
            }
            if is_reserved(name) {
                return Err(ModelError::Shape {
                    detail: format!("parameter name `{name}` shadows a positional variable"),
                });
            }
        }
        if lagrangian.n_outputs() != 1 {
            return Err(ModelError::Shape {
                detail: format!("Lagrangian must have 1 output, has {}", lagrangian.n_outputs()),
            });
        }
        if forcing.n_outputs() != nq {
            return Err(ModelError::Shape {
                detail: format!(
                    "forcing must have {nq} outputs (one per configuration coordinate), has {}",
                    forcing.n_outputs()
                ),
            });
        }
        let nc = constraints.as_ref().map_or(0, |g| g.n_outputs());
        if nc >= nq {
            return Err(ModelError::TooManyConstraints { n: nq, c: nc });
        }

        let param_ok = |name: &str| params.contains_key(name);
        let check_vars = |g: &ExprGraph,
                          role: &'static str,
                          allow: &dyn Fn(&str) -> bool|
         -> Result<(), ModelError> {
            for name in g.vars() {
                if !allow(name) && !param_ok(name) {
                    return Err(ModelError::BadVariable { graph: role, name: name.clone() });
                }
            }
            Ok(())
        };
        check_vars(&lagrangian, "Lagrangian", &|n| {
            parse_indexed(n, "qdot", nq).is_some() || parse_indexed(n, "q", nq).is_some()
        })?;
        check_vars(&forcing, "forcing", &|n| {
            parse_indexed(n, "qdot", nq).is_some()
                || parse_indexed(n, "q", nq).is_some()
                || parse_indexed(n, "u", nu).is_some()
        })?;
        if let Some(h) = &constraints {
            check_vars(h, "constraints", &|n| parse_indexed(n, "q", nq).is_some())?;
        }

        Ok(MechSystem { nq, nu, nc, lagrangian, forcing, constraints, params })
    }

    /// Configuration dimension.
    pub fn nq(&self) -> usize {
        self.nq
    }

    /// Input dimension.
    pub fn nu(&self) -> usize {
        self.nu
    }

    /// Constraint count.
    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn lagrangian(&self) -> &ExprGraph {
        &self.lagrangian
    }

    pub fn forcing(&self) -> &ExprGraph {
        &self.forcing
    }

    pub fn constraints(&self) -> Option<&ExprGraph> {
        self.constraints.as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }
}

/// A [`MechSystem`] rewritten onto the two-point discrete variables, with
/// positional binding layouts precomputed for the hot paths.
///
/// Graph variable orders are fixed at construction:
///
/// * `ld`:        `qk0.. qn0..` then parameters (sorted by name);
/// * `fminus`/`fplus`: `qk0.. qn0.. u0..` then parameters;
/// * `constraints`: `qn0..` then parameters (evaluated at one point by
///   substituting that point for `qn`).
#[derive(Clone, Debug)]
pub struct Discretization {
    system: Arc<MechSystem>,
    dt: f64,
    ld: ExprGraph,
    fminus: ExprGraph,
    fplus: ExprGraph,
    constraints: Option<ExprGraph>,
    /// Parameter values in the graphs' trailing-variable order.
    param_values: Vec<f64>,
}

impl Discretization {
    pub fn system(&self) -> &MechSystem {
        &self.system
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nq(&self) -> usize {
        self.system.nq()
    }

    pub fn nu(&self) -> usize {
        self.system.nu()
    }

    pub fn nc(&self) -> usize {
        self.system.nc()
    }

    /// Discrete Lagrangian graph over `qk0.. qn0..` + parameters.
    pub fn ld(&self) -> &ExprGraph {
        &self.ld
    }

    /// Left discrete forcing over `qk0.. qn0.. u0..` + parameters.
    pub fn fminus(&self) -> &ExprGraph {
        &self.fminus
    }

    /// Right discrete forcing (identically zero under the midpoint
    /// quadrature, carried for structural generality).
    pub fn fplus(&self) -> &ExprGraph {
        &self.fplus
    }

    /// Constraints over `qn0..` + parameters, if any.
    pub fn constraint_graph(&self) -> Option<&ExprGraph> {
        self.constraints.as_ref()
    }

    /// Fills a positional value slice for `ld`: `[qk, qn, params]`.
    pub(crate) fn bind_ld(&self, qk: &[f64], qn: &[f64], buf: &mut Vec<f64>) {
        let n = self.nq();
        debug_assert_eq!(qk.len(), n);
        debug_assert_eq!(qn.len(), n);
        buf.clear();
        buf.extend_from_slice(qk);
        buf.extend_from_slice(qn);
        buf.extend_from_slice(&self.param_values);
    }

    /// Fills a positional value slice for `fminus`/`fplus`:
    /// `[qk, qn, u, params]`.
    pub(crate) fn bind_f(&self, qk: &[f64], qn: &[f64], u: &[f64], buf: &mut Vec<f64>) {
        debug_assert_eq!(u.len(), self.nu());
        buf.clear();
        buf.extend_from_slice(qk);
        buf.extend_from_slice(qn);
        buf.extend_from_slice(u);
        buf.extend_from_slice(&self.param_values);
    }

    /// Fills a positional value slice for the constraint graph: `[q, params]`.
    pub(crate) fn bind_h(&self, q: &[f64], buf: &mut Vec<f64>) {
        debug_assert_eq!(q.len(), self.nq());
        buf.clear();
        buf.extend_from_slice(q);
        buf.extend_from_slice(&self.param_values);
    }
}

/// Rewrites a system onto the discrete two-point variables with timestep
/// `dt`, applying the midpoint quadrature.
pub fn discretize(system: &MechSystem, dt: f64) -> Result<Discretization, ModelError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ModelError::BadTimestep { dt });
    }
    let n = system.nq();
    let m = system.nu();
    let param_names: Vec<&String> = system.params.keys().collect();
    let param_values: Vec<f64> = system.params.values().copied().collect();

    // Shared construction: declare variables in the documented order,
    // build midpoint/rate substitutions, then map the source graph.
    let build = |src: &ExprGraph, with_u: bool| -> ExprGraph {
        let b = GraphBuilder::new();
        let qk: Vec<Expr> = (0..n).map(|i| b.var(&qk_var(i))).collect();
        let qn: Vec<Expr> = (0..n).map(|i| b.var(&qn_var(i))).collect();
        let us: Vec<Expr> = if with_u { (0..m).map(|i| b.var(&u_var(i))).collect() } else { vec![] };
        for p in &param_names {
            b.var(p);
        }
        let mid: Vec<Expr> =
            (0..n).map(|i| (qk[i].clone() + qn[i].clone()) * 0.5).collect();
        let rate: Vec<Expr> =
            (0..n).map(|i| (qn[i].clone() - qk[i].clone()) / dt).collect();
        let outs = src.map_into(&b, &mut |_, name| {
            if let Some(i) = parse_indexed(name, "qdot", n) {
                rate[i].clone()
            } else if let Some(i) = parse_indexed(name, "q", n) {
                mid[i].clone()
            } else if let Some(i) = parse_indexed(name, "u", m).filter(|_| with_u) {
                us[i].clone()
            } else {
                b.var(name)
            }
        });
        let scaled: Vec<Expr> = outs.into_iter().map(|e| e * dt).collect();
        b.finish(&scaled)
    };

    let ld = build(&system.lagrangian, false);
    let fminus = build(&system.forcing, true);

    // fplus: n zero outputs over the same variable layout.
    let fplus = {
        let b = GraphBuilder::new();
        for i in 0..n {
            b.var(&qk_var(i));
        }
        for i in 0..n {
            b.var(&qn_var(i));
        }
        for i in 0..m {
            b.var(&u_var(i));
        }
        for p in &param_names {
            b.var(p);
        }
        let zero = b.constant(0.0);
        let outs: Vec<Expr> = (0..n).map(|_| zero.clone()).collect();
        b.finish(&outs)
    };

    // Constraints keep their content, re-rooted at `qn` naming so slots
    // can evaluate them at either endpoint by swapping the bound values.
    let constraints = match &system.constraints {
        None => None,
        Some(src) => {
            let b = GraphBuilder::new();
            let qn: Vec<Expr> = (0..n).map(|i| b.var(&qn_var(i))).collect();
            for p in &param_names {
                b.var(p);
            }
            let outs = src.map_into(&b, &mut |_, name| {
                if let Some(i) = parse_indexed(name, "q", n) {
                    qn[i].clone()
                } else {
                    b.var(name)
                }
            });
            Some(b.finish(&outs))
        }
    };

    Ok(Discretization {
        system: Arc::new(system.clone()),
        dt,
        ld,
        fminus,
        fplus,
        constraints,
        param_values,
    })
}

/// First-derivative blocks of the discrete Lagrangian and forcing at one
/// evaluation point. Index 1 differentiates by `q_k`, index 2 by
/// `q_{k+1}`, index 3 by `u_k`.
#[derive(Clone, Debug)]
pub struct FirstSlots {
    pub d1l: DVector<f64>,
    pub d2l: DVector<f64>,
    pub f_minus: DVector<f64>,
    pub f_plus: DVector<f64>,
}

/// Second-derivative blocks. `dadbl[i][j] = d²ld / d a_i d b_j`;
/// `dif_minus[i][j] = d(fminus_i) / d (slot i)_j`.
#[derive(Clone, Debug)]
pub struct SecondSlots {
    pub d1d1l: DMatrix<f64>,
    pub d2d1l: DMatrix<f64>,
    pub d1d2l: DMatrix<f64>,
    pub d2d2l: DMatrix<f64>,
    pub d1f_minus: DMatrix<f64>,
    pub d2f_minus: DMatrix<f64>,
    pub d3f_minus: DMatrix<f64>,
    pub d1f_plus: DMatrix<f64>,
    pub d2f_plus: DMatrix<f64>,
    pub d3f_plus: DMatrix<f64>,
}

/// Third derivatives of `ld` over the stacked `(qk, qn)` variables and
/// full Hessians of each discrete-force component over `(qk, qn, u)`.
#[derive(Clone, Debug)]
pub struct ThirdSlots {
    pub l3: SymTen3,
    pub f_minus_hess: Vec<SymMat>,
    pub f_plus_hess: Vec<SymMat>,
}

/// Constraint values and derivatives at both endpoints. The first
/// derivative is always present; curvature appears from order two and
/// third derivatives from order three.
#[derive(Clone, Debug)]
pub struct ConstraintSlots {
    pub h_next: DVector<f64>,
    /// `dh_k[a][i] = d h_a / d q_i` at `q_k` (c × n), same at `q_{k+1}`.
    pub dh_k: DMatrix<f64>,
    pub dh_next: DMatrix<f64>,
    pub d2h_k: Option<Vec<SymMat>>,
    pub d2h_next: Option<Vec<SymMat>>,
    pub d3h_k: Option<Vec<SymTen3>>,
    pub d3h_next: Option<Vec<SymTen3>>,
}

/// Every derivative block of the discrete objects at one point
/// `(q_k, q_{k+1}, u_k)`, grouped by order. An order-`r` call fills the
/// tiers up to `r`; entries shared between orders are computed by the
/// same passes, so lower tiers agree bitwise across orders.
#[derive(Clone, Debug)]
pub struct SlotDerivatives {
    pub first: FirstSlots,
    pub second: Option<SecondSlots>,
    pub third: Option<ThirdSlots>,
    pub constraints: Option<ConstraintSlots>,
}

/// Scratch for [`slots`] and the integrator/linearizer hot paths.
#[derive(Default)]
pub struct SlotCtx {
    pub(crate) ws: Workspace,
    pub(crate) buf: Vec<f64>,
    pub(crate) buf2: Vec<f64>,
}

impl SlotCtx {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Evaluates derivative slots at `(q_k, q_next, u)` up to `order`.
/// Constraint blocks are filled when `with_constraints` is set and the
/// system has constraints.
pub fn slots(
    disc: &Discretization,
    q_k: &DVector<f64>,
    q_next: &DVector<f64>,
    u: &DVector<f64>,
    order: DerivOrder,
    with_constraints: bool,
) -> Result<SlotDerivatives, ModelError> {
    let mut ctx = SlotCtx::new();
    slots_with(disc, q_k, q_next, u, order, with_constraints, &mut ctx)
}

/// As [`slots`], reusing caller scratch buffers.
pub fn slots_with(
    disc: &Discretization,
    q_k: &DVector<f64>,
    q_next: &DVector<f64>,
    u: &DVector<f64>,
    order: DerivOrder,
    with_constraints: bool,
    ctx: &mut SlotCtx,
) -> Result<SlotDerivatives, ModelError> {
    let n = disc.nq();
    let m = disc.nu();
    check_dims(disc, q_k, q_next, u)?;

    let wrt_l: Vec<usize> = (0..2 * n).collect();
    let wrt_f: Vec<usize> = (0..2 * n + m).collect();

    // --- Lagrangian passes -------------------------------------------------
    let mut ld_vals = std::mem::take(&mut ctx.buf);
    disc.bind_ld(q_k.as_slice(), q_next.as_slice(), &mut ld_vals);

    let l3 = if order == DerivOrder::Third {
        disc.ld.third_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
        Some(SymTen3::from_packed(2 * n, disc.ld.third_packed(&ctx.ws, 0).to_vec()))
    } else {
        None
    };

    let (first_l, second_l) = match order {
        DerivOrder::First => {
            disc.ld.grad_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
            (disc.ld.grad(&ctx.ws, 0).to_vec(), None)
        }
        DerivOrder::Second | DerivOrder::Third => {
            disc.ld.hess_pass(&ld_vals, &wrt_l, &mut ctx.ws)?;
            let h = SymMat::from_packed(2 * n, disc.ld.hess_packed(&ctx.ws, 0).to_vec());
            (disc.ld.grad(&ctx.ws, 0).to_vec(), Some(h))
        }
    };
    let d1l = DVector::from_row_slice(&first_l[..n]);
    let d2l = DVector::from_row_slice(&first_l[n..]);

    // --- Forcing passes ----------------------------------------------------
    disc.bind_f(q_k.as_slice(), q_next.as_slice(), u.as_slice(), &mut ld_vals);

    // Force components are first-order objects, so their order-three tier
    // consists of (2n+m)-variable Hessians per component.
    let f_hess = |g: &ExprGraph, ws: &mut Workspace| -> Result<Vec<SymMat>, ModelError> {
        g.hess_pass(&ld_vals, &wrt_f, ws)?;
        Ok((0..g.n_outputs())
            .map(|i| SymMat::from_packed(2 * n + m, g.hess_packed(ws, i).to_vec()))
            .collect())
    };

    let (fm_hess, fp_hess) = if order == DerivOrder::Third {
        let a = f_hess(&disc.fminus, &mut ctx.ws)?;
        let b = f_hess(&disc.fplus, &mut ctx.ws)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };

    let read_f = |g: &ExprGraph,
                      ws: &mut Workspace,
                      want_grad: bool|
     -> Result<(DVector<f64>, Option<[DMatrix<f64>; 3]>), ModelError> {
        if want_grad {
            g.grad_pass(&ld_vals, &wrt_f, ws)?;
        } else {
            g.eval_pass(&ld_vals, ws)?;
        }
        let vals = DVector::from_fn(n, |i, _| g.value(ws, i));
        if !want_grad {
            return Ok((vals, None));
        }
        let mut d1 = DMatrix::zeros(n, n);
        let mut d2 = DMatrix::zeros(n, n);
        let mut d3 = DMatrix::zeros(n, m);
        for i in 0..n {
            let gr = g.grad(ws, i);
            for j in 0..n {
                d1[(i, j)] = gr[j];
                d2[(i, j)] = gr[n + j];
            }
            for j in 0..m {
                d3[(i, j)] = gr[2 * n + j];
            }
        }
        Ok((vals, Some([d1, d2, d3])))
    };

    let want_grad = order != DerivOrder::First;
    let (f_minus, fm_grads) = read_f(&disc.fminus, &mut ctx.ws, want_grad)?;
    let (f_plus, fp_grads) = read_f(&disc.fplus, &mut ctx.ws, want_grad)?;

    let second = second_l.map(|h| {
        let sub = |ro: usize, co: usize| DMatrix::from_fn(n, n, |i, j| h.get(ro + i, co + j));
        let [d1fm, d2fm, d3fm] = fm_grads.unwrap();
        let [d1fp, d2fp, d3fp] = fp_grads.unwrap();
        SecondSlots {
            d1d1l: sub(0, 0),
            // dadbl[i][j] = d/d b_j (d ld / d a_i): row index is the inner
            // derivative (the residual component), column the direction.
            d2d1l: sub(0, n),
            d1d2l: sub(n, 0),
            d2d2l: sub(n, n),
            d1f_minus: d1fm,
            d2f_minus: d2fm,
            d3f_minus: d3fm,
            d1f_plus: d1fp,
            d2f_plus: d2fp,
            d3f_plus: d3fp,
        }
    });

    let third = l3.map(|l3| ThirdSlots {
        l3,
        f_minus_hess: fm_hess.unwrap(),
        f_plus_hess: fp_hess.unwrap(),
    });

    // --- Constraint passes -------------------------------------------------
    let constraints = if with_constraints && disc.nc() > 0 {
        let g = disc.constraints.as_ref().unwrap();
        let c = disc.nc();
        let wrt_h: Vec<usize> = (0..n).collect();

        let at_point = |q: &DVector<f64>,
                            ws: &mut Workspace,
                            buf: &mut Vec<f64>|
         -> Result<(DVector<f64>, DMatrix<f64>, Option<Vec<SymMat>>, Option<Vec<SymTen3>>), ModelError> {
            disc.bind_h(q.as_slice(), buf);
            let d3 = if order == DerivOrder::Third {
                g.third_pass(buf, &wrt_h, ws)?;
                Some(
                    (0..c)
                        .map(|a| SymTen3::from_packed(n, g.third_packed(ws, a).to_vec()))
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let (vals, dh, d2) = match order {
                DerivOrder::First => {
                    g.grad_pass(buf, &wrt_h, ws)?;
                    let vals = DVector::from_fn(c, |a, _| g.value(ws, a));
                    let dh = DMatrix::from_fn(c, n, |a, i| g.grad(ws, a)[i]);
                    (vals, dh, None)
                }
                _ => {
                    g.hess_pass(buf, &wrt_h, ws)?;
                    let vals = DVector::from_fn(c, |a, _| g.value(ws, a));
                    let dh = DMatrix::from_fn(c, n, |a, i| g.grad(ws, a)[i]);
                    let d2 = (0..c)
                        .map(|a| SymMat::from_packed(n, g.hess_packed(ws, a).to_vec()))
                        .collect::<Vec<_>>();
                    (vals, dh, Some(d2))
                }
            };
            Ok((vals, dh, d2, d3))
        };

        let (_, dh_k, d2h_k, d3h_k) = at_point(q_k, &mut ctx.ws, &mut ld_vals)?;
        let (h_next, dh_next, d2h_next, d3h_next) = at_point(q_next, &mut ctx.ws, &mut ld_vals)?;
        Some(ConstraintSlots { h_next, dh_k, dh_next, d2h_k, d2h_next, d3h_k, d3h_next })
    } else {
        None
    };

    ctx.buf = ld_vals;
    Ok(SlotDerivatives {
        first: FirstSlots { d1l, d2l, f_minus, f_plus },
        second,
        third,
        constraints,
    })
}

fn check_dims(
    disc: &Discretization,
    q_k: &DVector<f64>,
    q_next: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(), ModelError> {
    let (n, m) = (disc.nq(), disc.nu());
    if q_k.len() != n || q_next.len() != n || u.len() != m {
        return Err(ModelError::Shape {
            detail: format!(
                "slot point dimensions (q_k: {}, q_next: {}, u: {}) do not match (n = {n}, m = {m})",
                q_k.len(),
                q_next.len(),
                u.len()
            ),
        });
    }
    Ok(())
}
