//! Closed-form scalar expressions over chart coordinates `x1..xm`.
//!
//! Grammar: decimal literals (`1`, `0.5`, `2e-3`), variables `x1..xm`,
//! unary functions `neg, exp, log, sin, cos, tan, tanh, sqrt, abs` in
//! call syntax, binary operators `+ - * / ^` (with `pow(a,b)` as an
//! alias for `a^b`), and parentheses. Trees are immutable after
//! construction and evaluation is pure, so values can be shared freely
//! across threads.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tan,
    Tanh,
    Sqrt,
    Abs,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<UnaryOp> {
        Some(match name {
            "neg" => UnaryOp::Neg,
            "exp" => UnaryOp::Exp,
            "log" | "ln" => UnaryOp::Log,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "tan" => UnaryOp::Tan,
            "tanh" => UnaryOp::Tanh,
            "sqrt" => UnaryOp::Sqrt,
            "abs" => UnaryOp::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 3,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => " + ",
            BinOp::Sub => " - ",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    /// Zero-based variable index; `x1` parses to `Var(0)`.
    Var(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
}

/// Parsed expression tree over `x1..xm` together with the ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprAst {
    root: Node,
    dim: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("variable x{index} exceeds dimension {dim} (offset {offset})")]
    VariableOutOfRange { index: usize, dim: usize, offset: usize },
    #[error("empty expression")]
    Empty,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("point dimension {got} does not match expression dimension {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("domain error in `{node}`: {message}")]
    Domain { node: String, message: String },
    #[error("non-finite value produced by `{node}`")]
    NonFinite { node: String },
}

impl ExprAst {
    pub fn constant(value: f64, dim: usize) -> ExprAst {
        ExprAst { root: Node::Const(value), dim }
    }

    pub fn var(index: usize, dim: usize) -> ExprAst {
        assert!(index < dim, "variable index out of range");
        ExprAst { root: Node::Var(index), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn is_const(&self, value: f64) -> bool {
        matches!(self.root, Node::Const(c) if c == value)
    }

    /// Substitutes `maps[i]` for variable `i`, producing a composed tree over
    /// the maps' coordinates. Used to pull metric coefficients through chart
    /// transitions.
    pub fn substitute(&self, maps: &[ExprAst]) -> ExprAst {
        assert_eq!(maps.len(), self.dim, "one replacement per variable required");
        let new_dim = maps[0].dim;
        assert!(maps.iter().all(|m| m.dim == new_dim));
        fn subst(node: &Node, maps: &[ExprAst]) -> Node {
            match node {
                Node::Const(c) => Node::Const(*c),
                Node::Var(i) => maps[*i].root.clone(),
                Node::Unary(op, a) => Node::Unary(*op, Box::new(subst(a, maps))),
                Node::Binary(op, a, b) => {
                    Node::Binary(*op, Box::new(subst(a, maps)), Box::new(subst(b, maps)))
                }
            }
        }
        ExprAst { root: subst(&self.root, maps), dim: new_dim }
    }

    /// Linear combination `sum coeffs[k] * self(x', scale[k]*x_axis)` along one
    /// axis: the reflection-extension primitive. `axis_scale[k]` replaces
    /// variable `axis` by `scale * x_axis`.
    pub fn reflect_combination(&self, axis: usize, terms: &[(f64, f64)]) -> ExprAst {
        let mut acc: Option<Node> = None;
        for &(coeff, scale) in terms {
            let mut maps: Vec<ExprAst> = (0..self.dim).map(|i| ExprAst::var(i, self.dim)).collect();
            maps[axis] = ExprAst {
                root: Node::Binary(
                    BinOp::Mul,
                    Box::new(Node::Const(scale)),
                    Box::new(Node::Var(axis)),
                ),
                dim: self.dim,
            };
            let term = Node::Binary(
                BinOp::Mul,
                Box::new(Node::Const(coeff)),
                Box::new(self.substitute(&maps).root),
            );
            acc = Some(match acc {
                None => term,
                Some(prev) => Node::Binary(BinOp::Add, Box::new(prev), Box::new(term)),
            });
        }
        ExprAst { root: acc.expect("at least one term"), dim: self.dim }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parses `text` into an expression over `x1..x{dim}`.
pub fn parse_expr(text: &str, dim: usize) -> Result<ExprAst, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let mut parser = Parser { bytes: text.as_bytes(), pos: 0, dim };
    let root = parser.expression(0)?;
    parser.skip_ws();
    if parser.pos != parser.bytes.len() {
        return Err(ParseError::Syntax {
            offset: parser.pos,
            message: format!("unexpected `{}`", parser.rest_preview()),
        });
    }
    Ok(ExprAst { root, dim })
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    dim: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn rest_preview(&self) -> String {
        let rest = &self.bytes[self.pos..];
        let take = rest.len().min(8);
        String::from_utf8_lossy(&rest[..take]).into_owned()
    }

    /// Precedence-climbing over `+ - * / ^` with `^` right-associative.
    fn expression(&mut self, min_prec: u8) -> Result<Node, ParseError> {
        let mut lhs = self.prefix()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                Some(b'^') => BinOp::Pow,
                _ => break,
            };
            let prec = op.precedence();
            if prec < min_prec {
                break;
            }
            self.pos += 1;
            let next_min = if op == BinOp::Pow { prec } else { prec + 1 };
            let rhs = self.expression(next_min)?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                let inner = self.expression(3)?;
                Ok(Node::Unary(UnaryOp::Neg, Box::new(inner)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.expression(3)
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            None => Err(ParseError::Syntax {
                offset: self.pos,
                message: "expected expression, found end of input".into(),
            }),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expression(0)?;
                if self.peek() == Some(b')') {
                    self.pos += 1;
                    Ok(inner)
                } else {
                    Err(ParseError::Syntax { offset: self.pos, message: "expected `)`".into() })
                }
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(ParseError::Syntax {
                offset: self.pos,
                message: format!("unexpected `{}`", self.rest_preview()),
            }),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let mut end = self.pos;
        let bytes = self.bytes;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        // Optional exponent part, e.g. `1e-3`.
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut e = end + 1;
            if e < bytes.len() && (bytes[e] == b'+' || bytes[e] == b'-') {
                e += 1;
            }
            if e < bytes.len() && bytes[e].is_ascii_digit() {
                while e < bytes.len() && bytes[e].is_ascii_digit() {
                    e += 1;
                }
                end = e;
            }
        }
        let text = std::str::from_utf8(&bytes[start..end]).unwrap();
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = end;
                Ok(Node::Const(v))
            }
            Err(_) => Err(ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            }),
        }
    }

    fn identifier(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let bytes = self.bytes;
        let mut end = self.pos;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        let name = std::str::from_utf8(&bytes[start..end]).unwrap().to_owned();
        self.pos = end;

        if let Some(rest) = name.strip_prefix('x') {
            if let Ok(index) = rest.parse::<usize>() {
                if index == 0 || index > self.dim {
                    return Err(ParseError::VariableOutOfRange {
                        index,
                        dim: self.dim,
                        offset: start,
                    });
                }
                return Ok(Node::Var(index - 1));
            }
        }

        if name == "pow" {
            let (a, b) = self.two_arguments(start)?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(a), Box::new(b)));
        }

        if let Some(op) = UnaryOp::from_name(&name) {
            if self.peek() != Some(b'(') {
                return Err(ParseError::Syntax {
                    offset: self.pos,
                    message: format!("expected `(` after `{name}`"),
                });
            }
            self.pos += 1;
            let arg = self.expression(0)?;
            if self.peek() == Some(b')') {
                self.pos += 1;
                return Ok(Node::Unary(op, Box::new(arg)));
            }
            return Err(ParseError::Syntax { offset: self.pos, message: "expected `)`".into() });
        }

        Err(ParseError::UnknownIdentifier { name, offset: start })
    }

    fn two_arguments(&mut self, at: usize) -> Result<(Node, Node), ParseError> {
        if self.peek() != Some(b'(') {
            return Err(ParseError::Syntax { offset: at, message: "expected `(` after `pow`".into() });
        }
        self.pos += 1;
        let a = self.expression(0)?;
        if self.peek() != Some(b',') {
            return Err(ParseError::Syntax { offset: self.pos, message: "expected `,`".into() });
        }
        self.pos += 1;
        let b = self.expression(0)?;
        if self.peek() != Some(b')') {
            return Err(ParseError::Syntax { offset: self.pos, message: "expected `)`".into() });
        }
        self.pos += 1;
        Ok((a, b))
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluates `ast` at `p`. Domain violations (log of a non-positive value,
/// division by zero, sqrt of a negative) are reported with the offending
/// subexpression printed, not folded into NaN.
pub fn eval_expr(ast: &ExprAst, p: &[f64]) -> Result<f64, EvalError> {
    if p.len() != ast.dim {
        return Err(EvalError::DimensionMismatch { want: ast.dim, got: p.len() });
    }
    eval_node(&ast.root, p)
}

fn eval_node(node: &Node, p: &[f64]) -> Result<f64, EvalError> {
    let value = match node {
        Node::Const(c) => *c,
        Node::Var(i) => p[*i],
        Node::Unary(op, a) => {
            let v = eval_node(a, p)?;
            match op {
                UnaryOp::Neg => -v,
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => {
                    if v <= 0.0 {
                        return Err(domain(node, format!("log of non-positive value {v}")));
                    }
                    v.ln()
                }
                UnaryOp::Sin => v.sin(),
                UnaryOp::Cos => v.cos(),
                UnaryOp::Tan => v.tan(),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Sqrt => {
                    if v < 0.0 {
                        return Err(domain(node, format!("sqrt of negative value {v}")));
                    }
                    v.sqrt()
                }
                UnaryOp::Abs => v.abs(),
            }
        }
        Node::Binary(op, a, b) => {
            let va = eval_node(a, p)?;
            let vb = eval_node(b, p)?;
            match op {
                BinOp::Add => va + vb,
                BinOp::Sub => va - vb,
                BinOp::Mul => va * vb,
                BinOp::Div => {
                    if vb == 0.0 {
                        return Err(domain(node, "division by zero".into()));
                    }
                    va / vb
                }
                BinOp::Pow => {
                    if va < 0.0 && vb.fract() != 0.0 {
                        return Err(domain(
                            node,
                            format!("negative base {va} with non-integer exponent {vb}"),
                        ));
                    }
                    va.powf(vb)
                }
            }
        }
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(EvalError::NonFinite { node: print_node(node) })
    }
}

fn domain(node: &Node, message: String) -> EvalError {
    EvalError::Domain { node: print_node(node), message }
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

/// Symbolic partial derivative with respect to variable `var`.
///
/// The result stays inside the same expression language. `abs` and `sqrt`
/// derivatives contain a division that raises a domain error when evaluated
/// at the singular point, so non-differentiability is surfaced rather than
/// silently dropped.
pub fn diff_expr(ast: &ExprAst, var: usize) -> ExprAst {
    assert!(var < ast.dim, "variable index out of range");
    ExprAst { root: diff_node(&ast.root, var), dim: ast.dim }
}

fn diff_node(node: &Node, var: usize) -> Node {
    use BinOp::*;
    use Node::*;
    match node {
        Const(_) => Const(0.0),
        Var(i) => Const(if *i == var { 1.0 } else { 0.0 }),
        Unary(op, a) => {
            let da = diff_node(a, var);
            if matches!(da, Const(c) if c == 0.0) {
                return Const(0.0);
            }
            let chain = |outer: Node| mul(outer, da.clone());
            match op {
                UnaryOp::Neg => Unary(UnaryOp::Neg, Box::new(da)),
                UnaryOp::Exp => chain(Unary(UnaryOp::Exp, a.clone())),
                UnaryOp::Log => div(da, (**a).clone()),
                UnaryOp::Sin => chain(Unary(UnaryOp::Cos, a.clone())),
                UnaryOp::Cos => Unary(
                    UnaryOp::Neg,
                    Box::new(mul(Unary(UnaryOp::Sin, a.clone()), da)),
                ),
                UnaryOp::Tan => {
                    // d tan u = u' / cos(u)^2
                    let cos2 = Binary(
                        Pow,
                        Box::new(Unary(UnaryOp::Cos, a.clone())),
                        Box::new(Const(2.0)),
                    );
                    div(da, cos2)
                }
                UnaryOp::Tanh => {
                    // d tanh u = (1 - tanh(u)^2) u'
                    let th2 = Binary(
                        Pow,
                        Box::new(Unary(UnaryOp::Tanh, a.clone())),
                        Box::new(Const(2.0)),
                    );
                    chain(Binary(Sub, Box::new(Const(1.0)), Box::new(th2)))
                }
                UnaryOp::Sqrt => {
                    // u' / (2 sqrt(u)); errors at u = 0.
                    let denom = mul(Const(2.0), Unary(UnaryOp::Sqrt, a.clone()));
                    div(da, denom)
                }
                UnaryOp::Abs => {
                    // u' * u / abs(u); errors at u = 0.
                    let sign = div((**a).clone(), Unary(UnaryOp::Abs, a.clone()));
                    mul(sign, da)
                }
            }
        }
        Binary(op, a, b) => {
            let da = || diff_node(a, var);
            let db = || diff_node(b, var);
            match op {
                Add => add(da(), db()),
                Sub => Binary(Sub, Box::new(da()), Box::new(db())),
                Mul => add(mul(da(), (**b).clone()), mul((**a).clone(), db())),
                Div => {
                    // (a'b - ab') / b^2
                    let num = Binary(
                        Sub,
                        Box::new(mul(da(), (**b).clone())),
                        Box::new(mul((**a).clone(), db())),
                    );
                    let den = Binary(Pow, b.clone(), Box::new(Const(2.0)));
                    div(num, den)
                }
                Pow => {
                    if let Const(c) = **b {
                        // c * a^(c-1) * a'
                        let power = Binary(Pow, a.clone(), Box::new(Const(c - 1.0)));
                        mul(mul(Const(c), power), da())
                    } else {
                        // a^b (b' log a + b a'/a)
                        let term1 = mul(db(), Unary(UnaryOp::Log, a.clone()));
                        let term2 = mul((**b).clone(), div(da(), (**a).clone()));
                        mul(node.clone(), add(term1, term2))
                    }
                }
            }
        }
    }
}

fn add(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Const(x), _) if *x == 0.0 => b,
        (_, Node::Const(x)) if *x == 0.0 => a,
        _ => Node::Binary(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Const(x), _) if *x == 0.0 => Node::Const(0.0),
        (_, Node::Const(x)) if *x == 0.0 => Node::Const(0.0),
        (Node::Const(x), _) if *x == 1.0 => b,
        (_, Node::Const(x)) if *x == 1.0 => a,
        _ => Node::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Const(x), _) if *x == 0.0 => Node::Const(0.0),
        (_, Node::Const(x)) if *x == 1.0 => a,
        _ => Node::Binary(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", print_node(&self.root))
    }
}

fn print_node(node: &Node) -> String {
    print_prec(node, 0)
}

fn print_prec(node: &Node, parent: u8) -> String {
    match node {
        Node::Const(c) => {
            if *c < 0.0 {
                // Wrap so `a * -2` round-trips.
                format!("({c})")
            } else {
                format!("{c}")
            }
        }
        Node::Var(i) => format!("x{}", i + 1),
        Node::Unary(UnaryOp::Neg, a) => {
            let s = format!("-{}", print_prec(a, 4));
            if parent > 1 {
                format!("({s})")
            } else {
                s
            }
        }
        Node::Unary(op, a) => format!("{}({})", op.name(), print_prec(a, 0)),
        Node::Binary(op, a, b) => {
            let prec = op.precedence();
            let (lp, rp) = match op {
                BinOp::Pow => (prec + 1, prec),
                _ => (prec, prec + 1),
            };
            let s = format!(
                "{}{}{}",
                print_prec(a, lp),
                op.symbol(),
                print_prec(b, rp)
            );
            if prec < parent {
                format!("({s})")
            } else {
                s
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn parses_constant() {
        let ast = parse_expr("1", 2).unwrap();
        assert_eq!(eval_expr(&ast, &[5.0, 7.0]).unwrap(), 1.0);
    }

    #[test]
    fn parses_exp_and_evaluates_at_origin() {
        let ast = parse_expr("exp(-2*x2)", 2).unwrap();
        assert_eq!(eval_expr(&ast, &[0.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(
            eval_expr(&ast, &[0.0, 1.0]).unwrap(),
            (-2.0f64).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn syntax_error_carries_offset() {
        match parse_expr("x1 +", 2) {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_rejected() {
        assert!(matches!(
            parse_expr("y1 + 1", 2),
            Err(ParseError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn variable_beyond_dimension_rejected() {
        assert!(matches!(
            parse_expr("x3", 2),
            Err(ParseError::VariableOutOfRange { index: 3, dim: 2, .. })
        ));
    }

    #[test]
    fn pythagoras() {
        let ast = parse_expr("x1*x1 + x2*x2", 2).unwrap();
        assert_eq!(eval_expr(&ast, &[3.0, 4.0]).unwrap(), 25.0);
    }

    #[test]
    fn division_by_zero_reports_node() {
        let ast = parse_expr("1/x1", 2).unwrap();
        match eval_expr(&ast, &[0.0, 0.0]) {
            Err(EvalError::Domain { node, .. }) => assert_eq!(node, "1/x1"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let ast = parse_expr("log(x1)", 1).unwrap();
        assert!(matches!(eval_expr(&ast, &[-1.0]), Err(EvalError::Domain { .. })));
    }

    #[test]
    fn precedence_and_power() {
        let ast = parse_expr("2 + 3 * 4 ^ 2", 1).unwrap();
        assert_eq!(eval_expr(&ast, &[0.0]).unwrap(), 50.0);
        let right_assoc = parse_expr("2 ^ 3 ^ 2", 1).unwrap();
        assert_eq!(eval_expr(&right_assoc, &[0.0]).unwrap(), 512.0);
        let pow_call = parse_expr("pow(2, 10)", 1).unwrap();
        assert_eq!(eval_expr(&pow_call, &[0.0]).unwrap(), 1024.0);
    }

    #[test]
    fn derivative_of_exponential() {
        let ast = parse_expr("exp(-2*x2)", 2).unwrap();
        let d = diff_expr(&ast, 1);
        for p in [[0.0f64, 0.0], [0.3, -0.7], [1.0, 2.0]] {
            let expected = -2.0 * (-2.0 * p[1]).exp();
            assert_relative_eq!(eval_expr(&d, &p).unwrap(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let ast = parse_expr("42", 2).unwrap();
        let d = diff_expr(&ast, 0);
        assert!(d.is_const(0.0));
    }

    #[test]
    fn product_rule_matches_central_difference() {
        let ast = parse_expr("x1*x2", 2).unwrap();
        let d = diff_expr(&ast, 0);
        let p = [2.0, 3.0];
        let h = 1e-5;
        let fd = (eval_expr(&ast, &[p[0] + h, p[1]]).unwrap()
            - eval_expr(&ast, &[p[0] - h, p[1]]).unwrap())
            / (2.0 * h);
        let sym = eval_expr(&d, &p).unwrap();
        assert_eq!(sym, 3.0);
        assert!((sym - fd).abs() <= 1e-8);
    }

    #[test]
    fn abs_derivative_flags_singular_point() {
        let ast = parse_expr("abs(x1)", 1).unwrap();
        let d = diff_expr(&ast, 0);
        assert_eq!(eval_expr(&d, &[2.0]).unwrap(), 1.0);
        assert_eq!(eval_expr(&d, &[-2.0]).unwrap(), -1.0);
        assert!(matches!(eval_expr(&d, &[0.0]), Err(EvalError::Domain { .. })));
    }

    #[test]
    fn substitution_composes() {
        let ast = parse_expr("x1^2 + x2", 2).unwrap();
        let maps = vec![parse_expr("x2", 2).unwrap(), parse_expr("2*x1", 2).unwrap()];
        let composed = ast.substitute(&maps);
        // (x2)^2 + 2*x1 at (3, 4) = 16 + 6 = 22
        assert_eq!(eval_expr(&composed, &[3.0, 4.0]).unwrap(), 22.0);
    }

    fn leaf_strategy(dim: usize) -> impl Strategy<Value = Node> {
        prop_oneof![
            (0..dim).prop_map(Node::Var),
            (-4.0..4.0f64).prop_map(|c| Node::Const((c * 64.0).round() / 64.0)),
        ]
    }

    /// Random closed-form trees built from ops that are smooth on all of R^2,
    /// so finite-difference checks stay well-posed everywhere.
    fn smooth_ast(dim: usize) -> impl Strategy<Value = ExprAst> {
        leaf_strategy(dim)
            .prop_recursive(4, 24, 2, move |inner| {
                prop_oneof![
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Node::Binary(
                        BinOp::Add,
                        Box::new(a),
                        Box::new(b)
                    )),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Node::Binary(
                        BinOp::Sub,
                        Box::new(a),
                        Box::new(b)
                    )),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Node::Binary(
                        BinOp::Mul,
                        Box::new(a),
                        Box::new(b)
                    )),
                    inner.clone().prop_map(|a| Node::Unary(UnaryOp::Sin, Box::new(a))),
                    inner.clone().prop_map(|a| Node::Unary(UnaryOp::Cos, Box::new(a))),
                    inner.clone().prop_map(|a| Node::Unary(UnaryOp::Tanh, Box::new(a))),
                    inner.prop_map(|a| Node::Unary(UnaryOp::Neg, Box::new(a))),
                ]
            })
            .prop_map(move |root| ExprAst { root, dim })
    }

    proptest! {
        /// Print -> parse round trip preserves semantics on sampled points.
        #[test]
        fn print_parse_round_trip(ast in smooth_ast(2), pts in proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 8)) {
            let printed = ast.to_string();
            let reparsed = parse_expr(&printed, 2).expect("printed form must parse");
            for (x, y) in pts {
                let a = eval_expr(&ast, &[x, y]).unwrap();
                let b = eval_expr(&reparsed, &[x, y]).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{printed}: {a} vs {b}");
            }
        }

        /// Symbolic derivative agrees with the central finite difference.
        #[test]
        fn derivative_matches_finite_difference(ast in smooth_ast(2), x in -1.5..1.5f64, y in -1.5..1.5f64) {
            let h = 1e-5;
            for var in 0..2 {
                let d = diff_expr(&ast, var);
                let sym = eval_expr(&d, &[x, y]).unwrap();
                let mut lo = [x, y];
                let mut hi = [x, y];
                lo[var] -= h;
                hi[var] += h;
                let fd = (eval_expr(&ast, &hi).unwrap() - eval_expr(&ast, &lo).unwrap()) / (2.0 * h);
                prop_assert!((sym - fd).abs() <= 1e-6 * (1.0 + sym.abs()).max(1.0 + fd.abs()),
                    "var {var} of `{ast}` at ({x},{y}): sym {sym} vs fd {fd}");
            }
        }
    }
}
