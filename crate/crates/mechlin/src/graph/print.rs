//! Rendering graphs back to expression text.
//!
//! The printer and parser are inverses at the structure level: printing
//! an output and reparsing it reconstructs the same shared DAG (up to
//! node numbering — compare with [`ExprGraph::canonical_eq`]). Constants
//! print in shortest round-trip form, subtraction renders `a + (-b)`,
//! and parentheses are emitted exactly where the grammar needs them.

use std::fmt::Write;

use super::{ExprGraph, Node, NodeId};

// Precedence levels used for parenthesization.
const P_ADD: u8 = 1;
const P_MUL: u8 = 2;
const P_NEG: u8 = 3;
const P_POW: u8 = 4;
const P_ATOM: u8 = 5;

impl ExprGraph {
    /// Renders output `out` as expression text.
    pub fn to_text(&self, out: usize) -> String {
        let mut s = String::new();
        self.render(&mut s, self.outputs[out], 0);
        s
    }

    fn prec(&self, id: NodeId) -> u8 {
        match self.nodes[id.ix()] {
            Node::Const(c) => {
                if c.is_sign_negative() {
                    P_NEG
                } else {
                    P_ATOM
                }
            }
            Node::Var(_) | Node::Sin(_) | Node::Cos(_) | Node::Sqrt(_) => P_ATOM,
            Node::Add(..) => P_ADD,
            Node::Mul(..) | Node::Div(..) => P_MUL,
            Node::Neg(_) => P_NEG,
            Node::Pow(..) => P_POW,
        }
    }

    fn render(&self, s: &mut String, id: NodeId, min_prec: u8) {
        let need_parens = self.prec(id) < min_prec;
        if need_parens {
            s.push('(');
        }
        match self.nodes[id.ix()] {
            Node::Const(c) => {
                write!(s, "{c:?}").unwrap();
            }
            Node::Var(v) => s.push_str(&self.vars[v as usize]),
            Node::Add(a, b) => {
                // Render a negated right operand as subtraction.
                if let Node::Neg(u) = self.nodes[b.ix()] {
                    self.render(s, a, P_ADD);
                    s.push_str(" - ");
                    self.render(s, u, P_MUL);
                } else {
                    self.render(s, a, P_ADD);
                    s.push_str(" + ");
                    // Right operand needs parens at equal precedence:
                    // `a + (b + c)` is a different tree from `a + b + c`.
                    self.render(s, b, P_ADD + 1);
                }
            }
            Node::Mul(a, b) => {
                self.render(s, a, P_MUL);
                s.push_str(" * ");
                self.render(s, b, P_MUL + 1);
            }
            Node::Div(a, b) => {
                self.render(s, a, P_MUL);
                s.push_str(" / ");
                self.render(s, b, P_MUL + 1);
            }
            Node::Neg(a) => {
                s.push('-');
                self.render(s, a, P_NEG);
            }
            Node::Pow(a, k) => {
                self.render(s, a, P_ATOM);
                write!(s, "^{k}").unwrap();
            }
            Node::Sin(a) => {
                s.push_str("sin(");
                self.render(s, a, 0);
                s.push(')');
            }
            Node::Cos(a) => {
                s.push_str("cos(");
                self.render(s, a, 0);
                s.push(')');
            }
            Node::Sqrt(a) => {
                s.push_str("sqrt(");
                self.render(s, a, 0);
                s.push(')');
            }
        }
        if need_parens {
            s.push(')');
        }
    }
}
