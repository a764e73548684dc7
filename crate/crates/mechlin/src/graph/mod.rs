//! Expression graphs for scalar-valued functions of named real variables.
//!
//! A [`GraphBuilder`] assembles expressions from a small primitive set
//! (`+`, `*`, unary negation, `/`, integer powers, `sin`, `cos`, `sqrt`)
//! into an immutable [`ExprGraph`]: a DAG stored as a flat node list in
//! topological order, with structurally identical subexpressions shared.
//! Graphs evaluate exactly once per node and differentiate to third order
//! in a forward sweep, so Lagrangians, forcing laws, and constraints can
//! all be written once and queried for values, gradients, Hessians, and
//! third-derivative tensors at machine precision.
//!
//! Derivative results for orders two and three are returned in packed
//! symmetric storage ([`SymMat`], [`SymTen3`]); permutation symmetry of
//! mixed partials holds exactly because each distinct partial is stored
//! once.

mod builder;
mod eval;
mod parse;
mod print;
mod sym;

pub use builder::{Expr, GraphBuilder};
pub use eval::{DerivOrder, DerivativeBundle, Workspace};
pub use parse::{parse_expr, ParseError, VarPolicy};
pub use sym::{SymMat, SymTen3};

use std::fmt;

/// Index of a node within an [`ExprGraph`]'s node list.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    pub(crate) fn ix(self) -> usize {
        self.0 as usize
    }
}

/// A single expression node. Operands always refer to earlier nodes.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Node {
    Const(f64),
    /// Index into the graph's variable list.
    Var(u32),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Div(NodeId, NodeId),
    /// Integer power of the operand.
    Pow(NodeId, i32),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
}

/// An immutable expression DAG with one or more scalar outputs.
///
/// Nodes are stored in topological order: every operand index is strictly
/// smaller than the index of the node using it. The variable list is
/// ordered and names are unique; evaluation binds values positionally to
/// that list.
#[derive(Clone, Debug)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
    vars: Vec<String>,
}

/// Errors raised while evaluating or differentiating a graph.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalError {
    /// A variable required by the graph was not assigned a value.
    UnassignedVariable { name: String },
    /// Wrong number of values supplied to a positional evaluation.
    ValueCount { expected: usize, got: usize },
    /// Division by zero at the given node.
    DivisionByZero { node: NodeId },
    /// Square root of a negative operand at the given node.
    SqrtNegative { node: NodeId, operand: f64 },
    /// Derivative of `sqrt` requested exactly at zero.
    SqrtZeroDerivative { node: NodeId },
    /// Zero raised to a negative power at the given node.
    ZeroToNegativePower { node: NodeId, exponent: i32 },
    /// A `wrt` list referenced a variable index out of range or twice.
    BadDerivationSet { detail: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::UnassignedVariable { name } => {
                write!(f, "variable `{name}` has no assigned value")
            }
            EvalError::ValueCount { expected, got } => {
                write!(f, "expected {expected} variable values, got {got}")
            }
            EvalError::DivisionByZero { node } => {
                write!(f, "division by zero at node {}", node.0)
            }
            EvalError::SqrtNegative { node, operand } => {
                write!(f, "sqrt of negative operand {operand} at node {}", node.0)
            }
            EvalError::SqrtZeroDerivative { node } => {
                write!(f, "derivative of sqrt at zero at node {}", node.0)
            }
            EvalError::ZeroToNegativePower { node, exponent } => {
                write!(f, "zero raised to negative power {exponent} at node {}", node.0)
            }
            EvalError::BadDerivationSet { detail } => {
                write!(f, "invalid derivative variable set: {detail}")
            }
        }
    }
}

impl std::error::Error for EvalError {}

/// Error from assembling a graph out of raw parts.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphError {
    /// An operand referenced a node at or after its user.
    OperandOrder { node: usize },
    /// A `Var` node referenced a variable index outside the list.
    VarOutOfRange { node: usize, var: u32 },
    /// An output id referenced a nonexistent node.
    OutputOutOfRange { output: usize },
    /// Two variables share a name.
    DuplicateVariable { name: String },
    /// The graph has no outputs.
    NoOutputs,
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::OperandOrder { node } => {
                write!(f, "node {node} uses an operand that does not precede it")
            }
            GraphError::VarOutOfRange { node, var } => {
                write!(f, "node {node} references variable index {var} out of range")
            }
            GraphError::OutputOutOfRange { output } => {
                write!(f, "output {output} references a nonexistent node")
            }
            GraphError::DuplicateVariable { name } => {
                write!(f, "variable `{name}` declared twice")
            }
            GraphError::NoOutputs => write!(f, "graph has no outputs"),
        }
    }
}

impl std::error::Error for GraphError {}

impl ExprGraph {
    /// Builds a graph from raw parts, validating the topological-order,
    /// variable-reference, and output invariants.
    pub fn from_parts(
        nodes: Vec<Node>,
        outputs: Vec<NodeId>,
        vars: Vec<String>,
    ) -> Result<Self, GraphError> {
        if outputs.is_empty() {
            return Err(GraphError::NoOutputs);
        }
        for (i, name) in vars.iter().enumerate() {
            if vars[..i].iter().any(|v| v == name) {
                return Err(GraphError::DuplicateVariable { name: name.clone() });
            }
        }
        let check = |op: NodeId, at: usize| -> Result<(), GraphError> {
            if op.ix() >= at {
                Err(GraphError::OperandOrder { node: at })
            } else {
                Ok(())
            }
        };
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Const(_) => {}
                Node::Var(v) => {
                    if v as usize >= vars.len() {
                        return Err(GraphError::VarOutOfRange { node: i, var: v });
                    }
                }
                Node::Add(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    check(a, i)?;
                    check(b, i)?;
                }
                Node::Neg(a) | Node::Sin(a) | Node::Cos(a) | Node::Sqrt(a) => check(a, i)?,
                Node::Pow(a, _) => check(a, i)?,
            }
        }
        for (i, out) in outputs.iter().enumerate() {
            if out.ix() >= nodes.len() {
                return Err(GraphError::OutputOutOfRange { output: i });
            }
        }
        Ok(ExprGraph { nodes, outputs, vars })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Ordered variable names. Positional value slices follow this order.
    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    /// Resolves named assignments into a positional value slice.
    ///
    /// Every variable of the graph must be present in `pairs`; extra
    /// names are ignored.
    pub fn bind(&self, pairs: &[(&str, f64)]) -> Result<Vec<f64>, EvalError> {
        let mut values = Vec::with_capacity(self.vars.len());
        for name in &self.vars {
            match pairs.iter().find(|(n, _)| n == name) {
                Some((_, v)) => values.push(*v),
                None => {
                    return Err(EvalError::UnassignedVariable { name: name.clone() });
                }
            }
        }
        Ok(values)
    }

    /// Rewrites this graph into `builder`, mapping each variable through
    /// `map`. Returns the images of the outputs.
    ///
    /// Used to build composite expressions such as discretizations, where
    /// a variable of the source graph becomes a subexpression of the new
    /// one.
    pub fn map_into(
        &self,
        builder: &GraphBuilder,
        map: &mut dyn FnMut(usize, &str) -> Expr,
    ) -> Vec<Expr> {
        let mut images: Vec<Expr> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let img = match *node {
                Node::Const(c) => builder.constant(c),
                Node::Var(v) => map(v as usize, &self.vars[v as usize]),
                Node::Add(a, b) => images[a.ix()].clone() + images[b.ix()].clone(),
                Node::Mul(a, b) => images[a.ix()].clone() * images[b.ix()].clone(),
                Node::Neg(a) => -images[a.ix()].clone(),
                Node::Div(a, b) => images[a.ix()].clone() / images[b.ix()].clone(),
                Node::Pow(a, k) => images[a.ix()].powi(k),
                Node::Sin(a) => images[a.ix()].sin(),
                Node::Cos(a) => images[a.ix()].cos(),
                Node::Sqrt(a) => images[a.ix()].sqrt(),
            };
            images.push(img);
        }
        self.outputs.iter().map(|o| images[o.ix()].clone()).collect()
    }

    /// Canonical renumbering: nodes re-emitted in first-use order walking
    /// outputs depth-first. Two graphs that differ only in internal node
    /// numbering or dead nodes canonicalize identically.
    fn canonical_parts(&self) -> (Vec<Node>, Vec<u32>) {
        let mut remap: Vec<Option<u32>> = vec![None; self.nodes.len()];
        let mut out_nodes: Vec<Node> = Vec::new();

        // Iterative post-order DFS over the DAG.
        enum Visit {
            Enter(u32),
            Exit(u32),
        }
        let mut stack: Vec<Visit> = self.outputs.iter().rev().map(|o| Visit::Enter(o.0)).collect();
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(id) => {
                    if remap[id as usize].is_some() {
                        continue;
                    }
                    stack.push(Visit::Exit(id));
                    match self.nodes[id as usize] {
                        Node::Const(_) | Node::Var(_) => {}
                        Node::Add(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                            stack.push(Visit::Enter(b.0));
                            stack.push(Visit::Enter(a.0));
                        }
                        Node::Neg(a)
                        | Node::Pow(a, _)
                        | Node::Sin(a)
                        | Node::Cos(a)
                        | Node::Sqrt(a) => stack.push(Visit::Enter(a.0)),
                    }
                }
                Visit::Exit(id) => {
                    if remap[id as usize].is_some() {
                        continue;
                    }
                    let m = |x: NodeId| NodeId(remap[x.ix()].expect("child visited"));
                    let node = match self.nodes[id as usize] {
                        Node::Const(c) => Node::Const(c),
                        Node::Var(v) => Node::Var(v),
                        Node::Add(a, b) => Node::Add(m(a), m(b)),
                        Node::Mul(a, b) => Node::Mul(m(a), m(b)),
                        Node::Div(a, b) => Node::Div(m(a), m(b)),
                        Node::Neg(a) => Node::Neg(m(a)),
                        Node::Pow(a, k) => Node::Pow(m(a), k),
                        Node::Sin(a) => Node::Sin(m(a)),
                        Node::Cos(a) => Node::Cos(m(a)),
                        Node::Sqrt(a) => Node::Sqrt(m(a)),
                    };
                    remap[id as usize] = Some(out_nodes.len() as u32);
                    out_nodes.push(node);
                }
            }
        }
        let outs = self.outputs.iter().map(|o| remap[o.ix()].unwrap()).collect();
        (out_nodes, outs)
    }

    /// Structural equality up to node numbering and dead nodes. Variable
    /// lists (names and order) and constants must match exactly; constants
    /// compare by bit pattern.
    pub fn canonical_eq(&self, other: &ExprGraph) -> bool {
        if self.vars != other.vars {
            return false;
        }
        let (na, oa) = self.canonical_parts();
        let (nb, ob) = other.canonical_parts();
        if oa != ob || na.len() != nb.len() {
            return false;
        }
        na.iter().zip(&nb).all(|(x, y)| match (x, y) {
            (Node::Const(a), Node::Const(b)) => a.to_bits() == b.to_bits(),
            _ => x == y,
        })
    }
}
