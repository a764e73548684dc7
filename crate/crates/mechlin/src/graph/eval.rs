//! Forward-mode evaluation and differentiation passes.
//!
//! All passes walk the node list once in topological order. First and
//! second order propagate a full gradient slab (and packed Hessian slab)
//! per node; third order runs one truncated directional pass per index
//! triple `(i, j, l)` with `i >= j >= l`, which yields every distinct
//! third partial exactly once.

use super::sym::{tri2_len, tri3, tri3_len, SymMat, SymTen3};
use super::{EvalError, ExprGraph, Node, NodeId};

/// Highest derivative order to compute.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DerivOrder {
    First,
    Second,
    Third,
}

/// Value plus derivatives of one graph output with respect to an ordered
/// variable subset. `hess` is present from order two, `third` from order
/// three.
#[derive(Clone, Debug)]
pub struct DerivativeBundle {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Option<SymMat>,
    pub third: Option<SymTen3>,
}

/// Reusable scratch buffers for graph passes. Create once and feed to
/// every pass on a hot path; all sizing happens on demand.
#[derive(Default)]
pub struct Workspace {
    vals: Vec<f64>,
    tang: Vec<f64>,
    hslab: Vec<f64>,
    /// Unary derivative factors (f', f'', f''') per node, for the
    /// third-order directional passes.
    uder: Vec<[f64; 3]>,
    /// Seven directional coefficients per node: i, j, l, ij, il, jl, ijl.
    coef: Vec<[f64; 7]>,
    /// Harvested third-order entries, `[output][packed triple]`.
    third: Vec<f64>,
    /// Variable index -> slot in the current `wrt` list, or -1.
    var_slot: Vec<i32>,
    s: usize,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn set_wrt(&mut self, n_vars: usize, wrt: &[usize]) -> Result<(), EvalError> {
        if wrt.is_empty() {
            return Err(EvalError::BadDerivationSet { detail: "empty wrt list".into() });
        }
        self.var_slot.clear();
        self.var_slot.resize(n_vars, -1);
        for (slot, &v) in wrt.iter().enumerate() {
            if v >= n_vars {
                return Err(EvalError::BadDerivationSet {
                    detail: format!("variable index {v} out of range ({n_vars} declared)"),
                });
            }
            if self.var_slot[v] != -1 {
                return Err(EvalError::BadDerivationSet {
                    detail: format!("variable index {v} listed twice"),
                });
            }
            self.var_slot[v] = slot as i32;
        }
        self.s = wrt.len();
        Ok(())
    }
}

#[inline]
fn pow_value(node: NodeId, v: f64, k: i32) -> Result<f64, EvalError> {
    if v == 0.0 && k < 0 {
        return Err(EvalError::ZeroToNegativePower { node, exponent: k });
    }
    Ok(v.powi(k))
}

/// Derivative factors of x^k, guarding the k = 0, 1, 2 coefficients so no
/// spurious 0 * inf appears at x = 0.
#[inline]
fn pow_factors(v: f64, k: i32) -> (f64, f64, f64) {
    let c1 = k as f64;
    let f1 = if c1 == 0.0 { 0.0 } else { c1 * v.powi(k - 1) };
    let c2 = (k as f64) * ((k - 1) as f64);
    let f2 = if c2 == 0.0 { 0.0 } else { c2 * v.powi(k - 2) };
    let c3 = c2 * ((k - 2) as f64);
    let f3 = if c3 == 0.0 { 0.0 } else { c3 * v.powi(k - 3) };
    (f1, f2, f3)
}

/// First and second derivative factors of the unary primitives.
/// Returns (value, f', f''). Third-order factors live in `unary_f123`.
#[inline]
fn unary_f12(node: NodeId, kind: &Node, v: f64) -> Result<(f64, f64, f64), EvalError> {
    match *kind {
        Node::Sin(_) => Ok((v.sin(), v.cos(), -v.sin())),
        Node::Cos(_) => Ok((v.cos(), -v.sin(), -v.cos())),
        Node::Sqrt(_) => {
            if v < 0.0 {
                Err(EvalError::SqrtNegative { node, operand: v })
            } else if v == 0.0 {
                Err(EvalError::SqrtZeroDerivative { node })
            } else {
                let w = v.sqrt();
                Ok((w, 0.5 / w, -0.25 / (w * v)))
            }
        }
        Node::Pow(_, k) => {
            let val = pow_value(node, v, k)?;
            let (f1, f2, _) = pow_factors(v, k);
            Ok((val, f1, f2))
        }
        _ => unreachable!("not a unary primitive"),
    }
}

impl ExprGraph {
    /// Runs a value pass, leaving per-node values in the workspace.
    pub fn eval_pass(&self, values: &[f64], ws: &mut Workspace) -> Result<(), EvalError> {
        if values.len() != self.vars.len() {
            return Err(EvalError::ValueCount { expected: self.vars.len(), got: values.len() });
        }
        let vals = &mut ws.vals;
        vals.clear();
        vals.reserve(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            let v = match *node {
                Node::Const(c) => c,
                Node::Var(v) => values[v as usize],
                Node::Add(a, b) => vals[a.ix()] + vals[b.ix()],
                Node::Mul(a, b) => vals[a.ix()] * vals[b.ix()],
                Node::Neg(a) => -vals[a.ix()],
                Node::Div(a, b) => {
                    let d = vals[b.ix()];
                    if d == 0.0 {
                        return Err(EvalError::DivisionByZero { node: id });
                    }
                    vals[a.ix()] / d
                }
                Node::Pow(a, k) => pow_value(id, vals[a.ix()], k)?,
                Node::Sin(a) => vals[a.ix()].sin(),
                Node::Cos(a) => vals[a.ix()].cos(),
                Node::Sqrt(a) => {
                    let x = vals[a.ix()];
                    if x < 0.0 {
                        return Err(EvalError::SqrtNegative { node: id, operand: x });
                    }
                    x.sqrt()
                }
            };
            vals.push(v);
        }
        Ok(())
    }

    /// Value of output `out` after any pass.
    pub fn value(&self, ws: &Workspace, out: usize) -> f64 {
        ws.vals[self.outputs[out].ix()]
    }

    /// Convenience: evaluate the first output at a positional value slice.
    pub fn eval_values(&self, values: &[f64], ws: &mut Workspace) -> Result<f64, EvalError> {
        self.eval_pass(values, ws)?;
        Ok(self.value(ws, 0))
    }

    /// Evaluate the first output at named assignments.
    pub fn eval(&self, pairs: &[(&str, f64)]) -> Result<f64, EvalError> {
        let values = self.bind(pairs)?;
        let mut ws = Workspace::new();
        self.eval_values(&values, &mut ws)
    }

    /// Value-and-gradient pass over the variable subset `wrt`.
    pub fn grad_pass(
        &self,
        values: &[f64],
        wrt: &[usize],
        ws: &mut Workspace,
    ) -> Result<(), EvalError> {
        if values.len() != self.vars.len() {
            return Err(EvalError::ValueCount { expected: self.vars.len(), got: values.len() });
        }
        ws.set_wrt(self.vars.len(), wrt)?;
        let s = ws.s;
        ws.vals.clear();
        ws.vals.reserve(self.nodes.len());
        ws.tang.resize(self.nodes.len() * s, 0.0);

        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            let (done, rest) = ws.tang.split_at_mut(i * s);
            let tc = &mut rest[..s];
            let val = match *node {
                Node::Const(c) => {
                    tc.fill(0.0);
                    c
                }
                Node::Var(v) => {
                    tc.fill(0.0);
                    let slot = ws.var_slot[v as usize];
                    if slot >= 0 {
                        tc[slot as usize] = 1.0;
                    }
                    values[v as usize]
                }
                Node::Add(a, b) => {
                    let ta = &done[a.ix() * s..a.ix() * s + s];
                    for k in 0..s {
                        tc[k] = ta[k] + done[b.ix() * s + k];
                    }
                    ws.vals[a.ix()] + ws.vals[b.ix()]
                }
                Node::Mul(a, b) => {
                    let (va, vb) = (ws.vals[a.ix()], ws.vals[b.ix()]);
                    for k in 0..s {
                        tc[k] = vb * done[a.ix() * s + k] + va * done[b.ix() * s + k];
                    }
                    va * vb
                }
                Node::Neg(a) => {
                    for k in 0..s {
                        tc[k] = -done[a.ix() * s + k];
                    }
                    -ws.vals[a.ix()]
                }
                Node::Div(a, b) => {
                    let vb = ws.vals[b.ix()];
                    if vb == 0.0 {
                        return Err(EvalError::DivisionByZero { node: id });
                    }
                    let vc = ws.vals[a.ix()] / vb;
                    for k in 0..s {
                        tc[k] = (done[a.ix() * s + k] - vc * done[b.ix() * s + k]) / vb;
                    }
                    vc
                }
                Node::Pow(a, _) | Node::Sin(a) | Node::Cos(a) | Node::Sqrt(a) => {
                    let (val, f1, _) = unary_f12(id, node, ws.vals[a.ix()])?;
                    for k in 0..s {
                        tc[k] = f1 * done[a.ix() * s + k];
                    }
                    val
                }
            };
            ws.vals.push(val);
        }
        Ok(())
    }

    /// Gradient slice of output `out` after `grad_pass` or `hess_pass`.
    pub fn grad<'a>(&self, ws: &'a Workspace, out: usize) -> &'a [f64] {
        let o = self.outputs[out].ix();
        &ws.tang[o * ws.s..(o + 1) * ws.s]
    }

    /// Value, gradient, and packed-Hessian pass over `wrt`.
    pub fn hess_pass(
        &self,
        values: &[f64],
        wrt: &[usize],
        ws: &mut Workspace,
    ) -> Result<(), EvalError> {
        if values.len() != self.vars.len() {
            return Err(EvalError::ValueCount { expected: self.vars.len(), got: values.len() });
        }
        ws.set_wrt(self.vars.len(), wrt)?;
        let s = ws.s;
        let tl = tri2_len(s);
        ws.vals.clear();
        ws.vals.reserve(self.nodes.len());
        ws.tang.resize(self.nodes.len() * s, 0.0);
        ws.hslab.resize(self.nodes.len() * tl, 0.0);

        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            let (tdone, trest) = ws.tang.split_at_mut(i * s);
            let tc: &mut [f64] = &mut trest[..s];
            let (hdone, hrest) = ws.hslab.split_at_mut(i * tl);
            let hc: &mut [f64] = &mut hrest[..tl];
            let val = match *node {
                Node::Const(c) => {
                    tc.fill(0.0);
                    hc.fill(0.0);
                    c
                }
                Node::Var(v) => {
                    tc.fill(0.0);
                    hc.fill(0.0);
                    let slot = ws.var_slot[v as usize];
                    if slot >= 0 {
                        tc[slot as usize] = 1.0;
                    }
                    values[v as usize]
                }
                Node::Add(a, b) => {
                    for k in 0..s {
                        tc[k] = tdone[a.ix() * s + k] + tdone[b.ix() * s + k];
                    }
                    for t in 0..tl {
                        hc[t] = hdone[a.ix() * tl + t] + hdone[b.ix() * tl + t];
                    }
                    ws.vals[a.ix()] + ws.vals[b.ix()]
                }
                Node::Neg(a) => {
                    for k in 0..s {
                        tc[k] = -tdone[a.ix() * s + k];
                    }
                    for t in 0..tl {
                        hc[t] = -hdone[a.ix() * tl + t];
                    }
                    -ws.vals[a.ix()]
                }
                Node::Mul(a, b) => {
                    let (va, vb) = (ws.vals[a.ix()], ws.vals[b.ix()]);
                    let ga = &tdone[a.ix() * s..a.ix() * s + s];
                    let gb = &tdone[b.ix() * s..b.ix() * s + s];
                    for k in 0..s {
                        tc[k] = vb * ga[k] + va * gb[k];
                    }
                    let ha = &hdone[a.ix() * tl..a.ix() * tl + tl];
                    let hb = &hdone[b.ix() * tl..b.ix() * tl + tl];
                    let mut t = 0;
                    for p in 0..s {
                        for q in 0..=p {
                            hc[t] = vb * ha[t] + va * hb[t] + ga[p] * gb[q] + gb[p] * ga[q];
                            t += 1;
                        }
                    }
                    va * vb
                }
                Node::Div(a, b) => {
                    let vb = ws.vals[b.ix()];
                    if vb == 0.0 {
                        return Err(EvalError::DivisionByZero { node: id });
                    }
                    let vc = ws.vals[a.ix()] / vb;
                    let ga = &tdone[a.ix() * s..a.ix() * s + s];
                    let gb = &tdone[b.ix() * s..b.ix() * s + s];
                    for k in 0..s {
                        tc[k] = (ga[k] - vc * gb[k]) / vb;
                    }
                    let ha = &hdone[a.ix() * tl..a.ix() * tl + tl];
                    let hb = &hdone[b.ix() * tl..b.ix() * tl + tl];
                    let mut t = 0;
                    for p in 0..s {
                        for q in 0..=p {
                            hc[t] =
                                (ha[t] - vc * hb[t] - tc[p] * gb[q] - gb[p] * tc[q]) / vb;
                            t += 1;
                        }
                    }
                    vc
                }
                Node::Pow(a, _) | Node::Sin(a) | Node::Cos(a) | Node::Sqrt(a) => {
                    let (val, f1, f2) = unary_f12(id, node, ws.vals[a.ix()])?;
                    let ga = &tdone[a.ix() * s..a.ix() * s + s];
                    for k in 0..s {
                        tc[k] = f1 * ga[k];
                    }
                    let ha = &hdone[a.ix() * tl..a.ix() * tl + tl];
                    let mut t = 0;
                    for p in 0..s {
                        for q in 0..=p {
                            hc[t] = f1 * ha[t] + f2 * ga[p] * ga[q];
                            t += 1;
                        }
                    }
                    val
                }
            };
            ws.vals.push(val);
        }
        Ok(())
    }

    /// Packed Hessian slice of output `out` after `hess_pass`.
    pub fn hess_packed<'a>(&self, ws: &'a Workspace, out: usize) -> &'a [f64] {
        let o = self.outputs[out].ix();
        let tl = tri2_len(ws.s);
        &ws.hslab[o * tl..(o + 1) * tl]
    }

    /// Third-order pass: one truncated directional sweep per index triple.
    /// Values must be evaluable; first/second order data are *not* left in
    /// the workspace (run `hess_pass` for those — it is the same code path
    /// at every order, so lower-order results agree bitwise).
    pub fn third_pass(
        &self,
        values: &[f64],
        wrt: &[usize],
        ws: &mut Workspace,
    ) -> Result<(), EvalError> {
        self.eval_pass(values, ws)?;
        ws.set_wrt(self.vars.len(), wrt)?;
        let s = ws.s;
        let n = self.nodes.len();
        let t3 = tri3_len(s);

        // Per-node unary factors, computed once per point.
        ws.uder.resize(n, [0.0; 3]);
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            ws.uder[i] = match *node {
                Node::Sin(a) => {
                    let v = ws.vals[a.ix()];
                    [v.cos(), -v.sin(), -v.cos()]
                }
                Node::Cos(a) => {
                    let v = ws.vals[a.ix()];
                    [-v.sin(), -v.cos(), v.sin()]
                }
                Node::Sqrt(a) => {
                    let v = ws.vals[a.ix()];
                    if v == 0.0 {
                        return Err(EvalError::SqrtZeroDerivative { node: id });
                    }
                    let w = ws.vals[i];
                    [0.5 / w, -0.25 / (w * v), 0.375 / (w * v * v)]
                }
                Node::Pow(a, k) => {
                    let (f1, f2, f3) = pow_factors(ws.vals[a.ix()], k);
                    [f1, f2, f3]
                }
                _ => [0.0; 3],
            };
        }

        ws.third.resize(self.outputs.len() * t3, 0.0);
        ws.coef.resize(n, [0.0; 7]);

        for di in 0..s {
            for dj in 0..=di {
                for dl in 0..=dj {
                    self.triple_sweep(ws, di, dj, dl)?;
                    let t = tri3(di, dj, dl);
                    for (o, out) in self.outputs.iter().enumerate() {
                        ws.third[o * t3 + t] = ws.coef[out.ix()][6];
                    }
                }
            }
        }
        Ok(())
    }

    /// One directional sweep carrying coefficients along (di, dj, dl).
    fn triple_sweep(
        &self,
        ws: &mut Workspace,
        di: usize,
        dj: usize,
        dl: usize,
    ) -> Result<(), EvalError> {
        let vals = &ws.vals;
        let uder = &ws.uder;
        let coef = &mut ws.coef;
        for (idx, node) in self.nodes.iter().enumerate() {
            let c: [f64; 7] = match *node {
                Node::Const(_) => [0.0; 7],
                Node::Var(v) => {
                    let mut c = [0.0; 7];
                    let slot = ws.var_slot[v as usize];
                    if slot >= 0 {
                        let slot = slot as usize;
                        if slot == di {
                            c[0] = 1.0;
                        }
                        if slot == dj {
                            c[1] = 1.0;
                        }
                        if slot == dl {
                            c[2] = 1.0;
                        }
                    }
                    c
                }
                Node::Add(a, b) => {
                    let (x, y) = (&coef[a.ix()], &coef[b.ix()]);
                    [
                        x[0] + y[0],
                        x[1] + y[1],
                        x[2] + y[2],
                        x[3] + y[3],
                        x[4] + y[4],
                        x[5] + y[5],
                        x[6] + y[6],
                    ]
                }
                Node::Neg(a) => {
                    let x = &coef[a.ix()];
                    [-x[0], -x[1], -x[2], -x[3], -x[4], -x[5], -x[6]]
                }
                Node::Mul(a, b) => {
                    let (va, vb) = (vals[a.ix()], vals[b.ix()]);
                    let (x, y) = (&coef[a.ix()], &coef[b.ix()]);
                    [
                        x[0] * vb + va * y[0],
                        x[1] * vb + va * y[1],
                        x[2] * vb + va * y[2],
                        x[3] * vb + x[0] * y[1] + x[1] * y[0] + va * y[3],
                        x[4] * vb + x[0] * y[2] + x[2] * y[0] + va * y[4],
                        x[5] * vb + x[1] * y[2] + x[2] * y[1] + va * y[5],
                        x[6] * vb
                            + x[3] * y[2]
                            + x[4] * y[1]
                            + x[5] * y[0]
                            + x[0] * y[5]
                            + x[1] * y[4]
                            + x[2] * y[3]
                            + va * y[6],
                    ]
                }
                Node::Div(a, b) => {
                    let vb = vals[b.ix()];
                    if vb == 0.0 {
                        return Err(EvalError::DivisionByZero { node: NodeId(idx as u32) });
                    }
                    let vc = vals[idx];
                    let (x, y) = (&coef[a.ix()], &coef[b.ix()]);
                    let mut c = [0.0; 7];
                    c[0] = (x[0] - vc * y[0]) / vb;
                    c[1] = (x[1] - vc * y[1]) / vb;
                    c[2] = (x[2] - vc * y[2]) / vb;
                    c[3] = (x[3] - vc * y[3] - c[0] * y[1] - c[1] * y[0]) / vb;
                    c[4] = (x[4] - vc * y[4] - c[0] * y[2] - c[2] * y[0]) / vb;
                    c[5] = (x[5] - vc * y[5] - c[1] * y[2] - c[2] * y[1]) / vb;
                    c[6] = (x[6]
                        - vc * y[6]
                        - c[3] * y[2]
                        - c[4] * y[1]
                        - c[5] * y[0]
                        - c[0] * y[5]
                        - c[1] * y[4]
                        - c[2] * y[3])
                        / vb;
                    c
                }
                Node::Pow(a, _) | Node::Sin(a) | Node::Cos(a) | Node::Sqrt(a) => {
                    // sqrt-of-negative surfaces in eval_pass already.
                    let [f1, f2, f3] = uder[idx];
                    let x = &coef[a.ix()];
                    [
                        f1 * x[0],
                        f1 * x[1],
                        f1 * x[2],
                        f1 * x[3] + f2 * x[0] * x[1],
                        f1 * x[4] + f2 * x[0] * x[2],
                        f1 * x[5] + f2 * x[1] * x[2],
                        f1 * x[6]
                            + f2 * (x[0] * x[5] + x[1] * x[4] + x[2] * x[3])
                            + f3 * x[0] * x[1] * x[2],
                    ]
                }
            };
            coef[idx] = c;
        }
        Ok(())
    }

    /// Packed third-derivative slice of output `out` after `third_pass`.
    pub fn third_packed<'a>(&self, ws: &'a Workspace, out: usize) -> &'a [f64] {
        let t3 = tri3_len(ws.s);
        &ws.third[out * t3..(out + 1) * t3]
    }

    /// Derivatives of the first output at a positional value slice.
    pub fn derive_values(
        &self,
        values: &[f64],
        wrt: &[usize],
        order: DerivOrder,
        ws: &mut Workspace,
    ) -> Result<DerivativeBundle, EvalError> {
        let s = wrt.len();
        match order {
            DerivOrder::First => {
                self.grad_pass(values, wrt, ws)?;
                Ok(DerivativeBundle {
                    value: self.value(ws, 0),
                    grad: self.grad(ws, 0).to_vec(),
                    hess: None,
                    third: None,
                })
            }
            DerivOrder::Second => {
                self.hess_pass(values, wrt, ws)?;
                Ok(DerivativeBundle {
                    value: self.value(ws, 0),
                    grad: self.grad(ws, 0).to_vec(),
                    hess: Some(SymMat::from_packed(s, self.hess_packed(ws, 0).to_vec())),
                    third: None,
                })
            }
            DerivOrder::Third => {
                self.third_pass(values, wrt, ws)?;
                let third = SymTen3::from_packed(s, self.third_packed(ws, 0).to_vec());
                self.hess_pass(values, wrt, ws)?;
                Ok(DerivativeBundle {
                    value: self.value(ws, 0),
                    grad: self.grad(ws, 0).to_vec(),
                    hess: Some(SymMat::from_packed(s, self.hess_packed(ws, 0).to_vec())),
                    third: Some(third),
                })
            }
        }
    }

    /// Derivatives of the first output at named assignments, with `wrt`
    /// given as variable names.
    pub fn derive(
        &self,
        pairs: &[(&str, f64)],
        wrt_names: &[&str],
        order: DerivOrder,
    ) -> Result<DerivativeBundle, EvalError> {
        let values = self.bind(pairs)?;
        let mut wrt = Vec::with_capacity(wrt_names.len());
        for name in wrt_names {
            match self.var_index(name) {
                Some(ix) => wrt.push(ix),
                None => {
                    return Err(EvalError::BadDerivationSet {
                        detail: format!("unknown variable `{name}`"),
                    })
                }
            }
        }
        let mut ws = Workspace::new();
        self.derive_values(&values, &wrt, order, &mut ws)
    }
}
