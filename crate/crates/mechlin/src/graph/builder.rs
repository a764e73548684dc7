//! Incremental construction of [`ExprGraph`]s with structural sharing.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::{ExprGraph, Node, NodeId};

/// Hash key for structural sharing. Constants key by bit pattern so that
/// `-0.0` and `0.0` stay distinct and NaN never aliases.
#[derive(PartialEq, Eq, Hash)]
enum Key {
    Const(u64),
    Var(u32),
    Add(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Div(u32, u32),
    Pow(u32, i32),
    Sin(u32),
    Cos(u32),
    Sqrt(u32),
}

struct Inner {
    nodes: Vec<Node>,
    vars: Vec<String>,
    var_ids: HashMap<String, u32>,
    shared: HashMap<Key, u32>,
}

impl Inner {
    fn intern(&mut self, key: Key, node: Node) -> u32 {
        if let Some(&id) = self.shared.get(&key) {
            return id;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.shared.insert(key, id);
        id
    }
}

/// Builds expression DAGs. Subexpressions constructed twice are shared
/// structurally (operand order included, so `a + b` and `b + a` remain
/// distinct nodes — sharing never reorders what the text form shows).
#[derive(Clone)]
pub struct GraphBuilder {
    inner: Rc<RefCell<Inner>>,
}

/// A handle to a node under construction. Cheap to clone; handles from
/// different builders must not be mixed.
#[derive(Clone)]
pub struct Expr {
    pub(crate) id: u32,
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Expr(#{})", self.id)
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                vars: Vec::new(),
                var_ids: HashMap::new(),
                shared: HashMap::new(),
            })),
        }
    }

    fn expr(&self, id: u32) -> Expr {
        Expr { id, inner: Rc::clone(&self.inner) }
    }

    /// Declares (or retrieves) a variable by name. Declaration order
    /// fixes the graph's positional variable order.
    pub fn var(&self, name: &str) -> Expr {
        let mut inner = self.inner.borrow_mut();
        let vid = match inner.var_ids.get(name) {
            Some(&v) => v,
            None => {
                let v = inner.vars.len() as u32;
                inner.vars.push(name.to_string());
                inner.var_ids.insert(name.to_string(), v);
                v
            }
        };
        let id = inner.intern(Key::Var(vid), Node::Var(vid));
        drop(inner);
        self.expr(id)
    }

    /// A finite constant. Non-finite constants are rejected because they
    /// cannot round-trip through the text form.
    pub fn constant(&self, c: f64) -> Expr {
        debug_assert!(c.is_finite(), "graph constants must be finite");
        let id = self.inner.borrow_mut().intern(Key::Const(c.to_bits()), Node::Const(c));
        self.expr(id)
    }

    /// Freezes the graph, keeping exactly the nodes reachable from
    /// `outputs` and the full declared variable list.
    pub fn finish(&self, outputs: &[Expr]) -> ExprGraph {
        let inner = self.inner.borrow();
        for out in outputs {
            assert!(
                Rc::ptr_eq(&out.inner, &self.inner),
                "output expression belongs to a different builder"
            );
        }
        let raw = ExprGraph {
            nodes: inner.nodes.clone(),
            outputs: outputs.iter().map(|e| NodeId(e.id)).collect(),
            vars: inner.vars.clone(),
        };
        // Drop nodes not reachable from the outputs, preserving order.
        let (nodes, outs) = raw.canonical_parts();
        ExprGraph {
            nodes,
            outputs: outs.into_iter().map(NodeId).collect(),
            vars: raw.vars,
        }
    }
}

impl Expr {
    fn same_builder(&self, other: &Expr) {
        assert!(
            Rc::ptr_eq(&self.inner, &other.inner),
            "expressions belong to different builders"
        );
    }

    fn unary(&self, make: impl FnOnce(u32) -> (Key, Node)) -> Expr {
        let (key, node) = make(self.id);
        let id = self.inner.borrow_mut().intern(key, node);
        Expr { id, inner: Rc::clone(&self.inner) }
    }

    fn binary(&self, rhs: &Expr, make: impl FnOnce(u32, u32) -> (Key, Node)) -> Expr {
        self.same_builder(rhs);
        let (key, node) = make(self.id, rhs.id);
        let id = self.inner.borrow_mut().intern(key, node);
        Expr { id, inner: Rc::clone(&self.inner) }
    }

    fn builder(&self) -> GraphBuilder {
        GraphBuilder { inner: Rc::clone(&self.inner) }
    }

    pub fn sin(&self) -> Expr {
        self.unary(|a| (Key::Sin(a), Node::Sin(NodeId(a))))
    }

    pub fn cos(&self) -> Expr {
        self.unary(|a| (Key::Cos(a), Node::Cos(NodeId(a))))
    }

    pub fn sqrt(&self) -> Expr {
        self.unary(|a| (Key::Sqrt(a), Node::Sqrt(NodeId(a))))
    }

    pub fn powi(&self, k: i32) -> Expr {
        self.unary(|a| (Key::Pow(a, k), Node::Pow(NodeId(a), k)))
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        // Fold negation of constants so `-2` parses and prints stably.
        let folded = {
            let inner = self.inner.borrow();
            match inner.nodes[self.id as usize] {
                Node::Const(c) => Some(-c),
                _ => None,
            }
        };
        if let Some(c) = folded {
            return self.builder().constant(c);
        }
        self.unary(|a| (Key::Neg(a), Node::Neg(NodeId(a))))
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        self.binary(&rhs, |x, y| (Key::Add(x, y), Node::Add(NodeId(x), NodeId(y))))
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        self + (-rhs)
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        self.binary(&rhs, |x, y| (Key::Mul(x, y), Node::Mul(NodeId(x), NodeId(y))))
    }
}

impl Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        self.binary(&rhs, |x, y| (Key::Div(x, y), Node::Div(NodeId(x), NodeId(y))))
    }
}

// Scalar convenience forms: `e + 2.0`, `2.0 * e`, ...

impl Add<f64> for Expr {
    type Output = Expr;
    fn add(self, rhs: f64) -> Expr {
        let c = self.builder().constant(rhs);
        self + c
    }
}

impl Add<Expr> for f64 {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        rhs + self
    }
}

impl Sub<f64> for Expr {
    type Output = Expr;
    fn sub(self, rhs: f64) -> Expr {
        self + (-rhs)
    }
}

impl Sub<Expr> for f64 {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        let c = rhs.builder().constant(self);
        c - rhs
    }
}

impl Mul<f64> for Expr {
    type Output = Expr;
    fn mul(self, rhs: f64) -> Expr {
        let c = self.builder().constant(rhs);
        self * c
    }
}

impl Mul<Expr> for f64 {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        rhs * self
    }
}

impl Div<f64> for Expr {
    type Output = Expr;
    fn div(self, rhs: f64) -> Expr {
        let c = self.builder().constant(rhs);
        self / c
    }
}

impl Div<Expr> for f64 {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        let c = rhs.builder().constant(self);
        c / rhs
    }
}
