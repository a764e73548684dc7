//! Expression text parser.
//!
//! Grammar (whitespace insignificant, ASCII only):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' ['-'] integer)?
//! atom   := number | name | name '(' expr ')' | '(' expr ')'
//! ```
//!
//! `sin`, `cos`, and `sqrt` are the only function names. Any other name
//! is a variable reference, checked against the [`VarPolicy`]. Numeric
//! literals must be finite. Input is untrusted: the parser never panics,
//! bounds nesting depth, and reports byte-offset positions in errors.

use std::fmt;

use super::{Expr, GraphBuilder};

/// How the parser resolves variable names.
pub enum VarPolicy<'a> {
    /// Any name becomes a variable, declared on first use.
    Auto,
    /// Only the listed names may appear.
    Declared(&'a [String]),
}

/// Parse failure with the byte offset where it happened.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.pos, self.msg)
    }
}

impl std::error::Error for ParseError {}

const MAX_DEPTH: usize = 200;

struct Parser<'a, 'b> {
    src: &'a [u8],
    pos: usize,
    builder: &'a GraphBuilder,
    policy: &'a VarPolicy<'b>,
}

/// Parses one expression, building nodes into `builder`.
///
/// The entire input must be consumed; trailing characters are an error.
pub fn parse_expr(
    text: &str,
    builder: &GraphBuilder,
    policy: &VarPolicy<'_>,
) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, builder, policy };
    let e = p.expr(0)?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

impl<'a, 'b> Parser<'a, 'b> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { pos: self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while let Some(&c) = self.src.get(self.pos) {
            if c == b' ' || c == b'\t' {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_DEPTH {
            return Err(self.err("expression nested too deeply"));
        }
        let mut acc = self.term(depth + 1)?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = acc + self.term(depth + 1)?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = acc - self.term(depth + 1)?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_DEPTH {
            return Err(self.err("expression nested too deeply"));
        }
        let mut acc = self.factor(depth + 1)?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = acc * self.factor(depth + 1)?;
                }
                Some(b'/') => {
                    self.pos += 1;
                    acc = acc / self.factor(depth + 1)?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_DEPTH {
            return Err(self.err("expression nested too deeply"));
        }
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.factor(depth + 1)?;
            return Ok(-inner);
        }
        self.power(depth + 1)
    }

    fn power(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let base = self.atom(depth + 1)?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let k = self.exponent()?;
            if self.peek() == Some(b'^') {
                return Err(self.err("chained '^' requires parentheses"));
            }
            return Ok(base.powi(k));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.src.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.src.get(self.pos), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(self.err("expected integer exponent after '^'"));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<i32>().map_err(|_| ParseError {
            pos: start,
            msg: format!("exponent `{text}` out of range"),
        })
    }

    fn atom(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_DEPTH {
            return Err(self.err("expression nested too deeply"));
        }
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr(depth + 1)?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.name(depth),
            Some(c) => Err(self.err(format!("unexpected character `{}`", c as char))),
            None => Err(self.err("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while matches!(self.src.get(self.pos), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while matches!(self.src.get(self.pos), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.src.get(self.pos), Some(&b'e') | Some(&b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(&b'+') | Some(&b'-')) {
                self.pos += 1;
            }
            let ds = self.pos;
            while matches!(self.src.get(self.pos), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == ds {
                // Not an exponent after all (e.g. `2e` as `2 * e`... which
                // we do not support — treat as malformed number).
                self.pos = mark;
                return Err(self.err("malformed exponent in numeric literal"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let v: f64 = text
            .parse()
            .map_err(|_| ParseError { pos: start, msg: format!("bad numeric literal `{text}`") })?;
        if !v.is_finite() {
            return Err(ParseError {
                pos: start,
                msg: format!("numeric literal `{text}` is not a finite f64"),
            });
        }
        Ok(self.builder.constant(v))
    }

    fn name(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let start = self.pos;
        while matches!(self.src.get(self.pos),
            Some(c) if c.is_ascii_alphanumeric() || *c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let arg = self.expr(depth + 1)?;
            if self.peek() != Some(b')') {
                return Err(self.err("expected ')'"));
            }
            self.pos += 1;
            return match name.as_str() {
                "sin" => Ok(arg.sin()),
                "cos" => Ok(arg.cos()),
                "sqrt" => Ok(arg.sqrt()),
                _ => Err(ParseError {
                    pos: start,
                    msg: format!("unknown function `{name}` (have sin, cos, sqrt)"),
                }),
            };
        }
        match self.policy {
            VarPolicy::Auto => Ok(self.builder.var(&name)),
            VarPolicy::Declared(allowed) => {
                if allowed.iter().any(|a| a == &name) {
                    Ok(self.builder.var(&name))
                } else {
                    Err(ParseError { pos: start, msg: format!("unknown variable `{name}`") })
                }
            }
        }
    }
}
