//! Closed-form scalar fields of `(x, y)`.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | 'x' | 'y' | 'pi' | func '(' args ')' | '(' expr ')'
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-2^2 = -4`
//! and `2^3^2 = 2^9`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("evaluation error at ({x}, {y}): {message}")]
    Eval { x: f64, y: f64, message: String },
    #[error("cannot differentiate `{0}`")]
    NotDifferentiable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Pi,
    Var(Var),
    Neg(Box<Node>),
    Call(Func, Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
}

/// Parsed field expression. Cheap to clone.
#[derive(Clone, PartialEq)]
pub struct ScalarFieldExpr {
    root: Arc<Node>,
}

impl fmt::Debug for ScalarFieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFieldExpr({})", self)
    }
}

pub fn parse_field(src: &str) -> Result<ScalarFieldExpr, ExprError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let node = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(ScalarFieldExpr { root: Arc::new(node) })
}

impl std::str::FromStr for ScalarFieldExpr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_field(s)
    }
}

impl ScalarFieldExpr {
    pub fn from_node(node: Node) -> Self {
        ScalarFieldExpr { root: Arc::new(node) }
    }

    pub fn constant(c: f64) -> Self {
        Self::from_node(Node::Num(c))
    }

    pub fn node(&self) -> &Node {
        &self.root
    }

    /// Evaluates the expression; any non-finite intermediate is an error.
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, ExprError> {
        eval_node(&self.root, x, y)
    }

    /// `Some(c)` when the expression does not depend on `x` or `y`.
    pub fn as_constant(&self) -> Option<f64> {
        if depends_on_vars(&self.root) {
            None
        } else {
            eval_node(&self.root, 0.0, 0.0).ok()
        }
    }

    /// Symbolic partial derivative.
    pub fn derivative(&self, var: Var) -> Result<ScalarFieldExpr, ExprError> {
        Ok(Self::from_node(diff(&self.root, var)?))
    }

    pub fn gradient(&self) -> Result<[ScalarFieldExpr; 2], ExprError> {
        Ok([self.derivative(Var::X)?, self.derivative(Var::Y)?])
    }
}

impl fmt::Display for ScalarFieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

impl fmt::Display for Node {
    /// Fully parenthesized so the output re-parses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{:?}", v),
            Node::Pi => write!(f, "pi"),
            Node::Var(Var::X) => write!(f, "x"),
            Node::Var(Var::Y) => write!(f, "y"),
            Node::Neg(a) => write!(f, "(-{})", a),
            Node::Call(func, a) => write!(f, "{}({})", func.name(), a),
            Node::Bin(BinOp::Min, a, b) => write!(f, "min({}, {})", a, b),
            Node::Bin(BinOp::Max, a, b) => write!(f, "max({}, {})", a, b),
            Node::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                    BinOp::Min | BinOp::Max => unreachable!(),
                };
                write!(f, "({} {} {})", a, sym, b)
            }
        }
    }
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ExprError {
        ExprError::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.primary()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.err("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            i += 1;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = i;
                Ok(Node::Num(v))
            }
            Err(_) => Err(ExprError::Syntax { offset: start, message: format!("malformed number `{}`", text) }),
        }
    }

    fn identifier(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && (s[i].is_ascii_alphanumeric() || s[i] == b'_') {
            i += 1;
        }
        let name = std::str::from_utf8(&s[start..i]).expect("ascii");
        self.pos = i;
        let func = match name {
            "x" => return Ok(Node::Var(Var::X)),
            "y" => return Ok(Node::Var(Var::Y)),
            "pi" => return Ok(Node::Pi),
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" | "max" => {
                let op = if name == "min" { BinOp::Min } else { BinOp::Max };
                self.expect(b'(')?;
                let a = self.expr()?;
                self.expect(b',')?;
                let b = self.expr()?;
                self.expect(b')')?;
                return Ok(Node::Bin(op, Box::new(a), Box::new(b)));
            }
            _ => return Err(ExprError::UnknownIdentifier { name: name.to_string(), offset: start }),
        };
        self.expect(b'(')?;
        let arg = self.expr()?;
        self.expect(b')')?;
        Ok(Node::Call(func, Box::new(arg)))
    }
}

fn eval_node(node: &Node, x: f64, y: f64) -> Result<f64, ExprError> {
    let fail = |message: String| ExprError::Eval { x, y, message };
    let v = match node {
        Node::Num(v) => *v,
        Node::Pi => std::f64::consts::PI,
        Node::Var(Var::X) => x,
        Node::Var(Var::Y) => y,
        Node::Neg(a) => -eval_node(a, x, y)?,
        Node::Call(func, a) => {
            let a = eval_node(a, x, y)?;
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Abs => a.abs(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(fail(format!("log of non-positive argument {}", a)));
                    }
                    a.ln()
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(fail(format!("sqrt of negative argument {}", a)));
                    }
                    a.sqrt()
                }
            }
        }
        Node::Bin(op, a, b) => {
            let a = eval_node(a, x, y)?;
            let b = eval_node(b, x, y)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(fail("division by zero".into()));
                    }
                    a / b
                }
                BinOp::Pow => {
                    let r = a.powf(b);
                    if r.is_nan() {
                        return Err(fail(format!("{}^{} is undefined", a, b)));
                    }
                    r
                }
                BinOp::Min => a.min(b),
                BinOp::Max => a.max(b),
            }
        }
    };
    if !v.is_finite() {
        return Err(fail(format!("non-finite value {}", v)));
    }
    Ok(v)
}

fn depends_on_vars(node: &Node) -> bool {
    match node {
        Node::Num(_) | Node::Pi => false,
        Node::Var(_) => true,
        Node::Neg(a) | Node::Call(_, a) => depends_on_vars(a),
        Node::Bin(_, a, b) => depends_on_vars(a) || depends_on_vars(b),
    }
}

fn num(v: f64) -> Node {
    Node::Num(v)
}

fn is_num(n: &Node, v: f64) -> bool {
    matches!(n, Node::Num(c) if *c == v)
}

fn add(a: Node, b: Node) -> Node {
    if is_num(&a, 0.0) {
        b
    } else if is_num(&b, 0.0) {
        a
    } else {
        Node::Bin(BinOp::Add, Box::new(a), Box::new(b))
    }
}

fn sub(a: Node, b: Node) -> Node {
    if is_num(&b, 0.0) {
        a
    } else if is_num(&a, 0.0) {
        neg(b)
    } else {
        Node::Bin(BinOp::Sub, Box::new(a), Box::new(b))
    }
}

fn mul(a: Node, b: Node) -> Node {
    if is_num(&a, 0.0) || is_num(&b, 0.0) {
        num(0.0)
    } else if is_num(&a, 1.0) {
        b
    } else if is_num(&b, 1.0) {
        a
    } else {
        Node::Bin(BinOp::Mul, Box::new(a), Box::new(b))
    }
}

fn div(a: Node, b: Node) -> Node {
    if is_num(&a, 0.0) {
        num(0.0)
    } else if is_num(&b, 1.0) {
        a
    } else {
        Node::Bin(BinOp::Div, Box::new(a), Box::new(b))
    }
}

fn neg(a: Node) -> Node {
    match a {
        Node::Num(v) if v == 0.0 => num(0.0),
        other => Node::Neg(Box::new(other)),
    }
}

fn pow(a: Node, b: Node) -> Node {
    if is_num(&b, 1.0) {
        a
    } else if is_num(&b, 0.0) {
        num(1.0)
    } else {
        Node::Bin(BinOp::Pow, Box::new(a), Box::new(b))
    }
}

fn call(f: Func, a: Node) -> Node {
    Node::Call(f, Box::new(a))
}

fn diff(node: &Node, var: Var) -> Result<Node, ExprError> {
    Ok(match node {
        Node::Num(_) | Node::Pi => num(0.0),
        Node::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
        Node::Neg(a) => neg(diff(a, var)?),
        Node::Call(func, a) => {
            let da = diff(a, var)?;
            if is_num(&da, 0.0) {
                return Ok(num(0.0));
            }
            let a = (**a).clone();
            let outer = match func {
                Func::Sin => call(Func::Cos, a),
                Func::Cos => neg(call(Func::Sin, a)),
                Func::Exp => call(Func::Exp, a),
                Func::Log => div(num(1.0), a),
                Func::Sqrt => div(num(0.5), call(Func::Sqrt, a)),
                Func::Abs => div(a.clone(), call(Func::Abs, a)),
            };
            mul(outer, da)
        }
        Node::Bin(op, a, b) => {
            let da = diff(a, var)?;
            let db = diff(b, var)?;
            let (a, b) = ((**a).clone(), (**b).clone());
            match op {
                BinOp::Add => add(da, db),
                BinOp::Sub => sub(da, db),
                BinOp::Mul => add(mul(da, b.clone()), mul(a, db)),
                BinOp::Div => {
                    if is_num(&db, 0.0) {
                        div(da, b)
                    } else {
                        div(sub(mul(da, b.clone()), mul(a, db)), pow(b, num(2.0)))
                    }
                }
                BinOp::Pow => {
                    if !depends_on_vars(&b) {
                        // d(a^c) = c a^(c-1) a'
                        let c_minus_1 = match &b {
                            Node::Num(c) => num(c - 1.0),
                            _ => sub(b.clone(), num(1.0)),
                        };
                        mul(mul(b, pow(a, c_minus_1)), da)
                    } else {
                        // d(a^b) = a^b (b' ln a + b a'/a)
                        let whole = pow(a.clone(), b.clone());
                        let t1 = mul(db, call(Func::Log, a.clone()));
                        let t2 = div(mul(b, da), a);
                        mul(whole, add(t1, t2))
                    }
                }
                BinOp::Min | BinOp::Max => {
                    if is_num(&da, 0.0) && is_num(&db, 0.0) {
                        num(0.0)
                    } else {
                        return Err(ExprError::NotDifferentiable(
                            Node::Bin(*op, Box::new(a), Box::new(b)).to_string(),
                        ));
                    }
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64, y: f64) -> f64 {
        parse_field(s).unwrap().eval(x, y).unwrap()
    }

    #[test]
    fn precedence_examples() {
        assert_eq!(ev("2 - 0.5*x", 1.0, 0.0), 1.5);
        assert_eq!(ev("1+2*3", 0.0, 0.0), 7.0);
        assert_eq!(ev("sin(0) + 2^3^1", 0.0, 0.0), 8.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(ev("8/4/2", 0.0, 0.0), 1.0);
        assert_eq!(ev("5-3-1", 0.0, 0.0), 1.0);
        assert_eq!(ev("min(x, y) + max(x, 2)", 1.0, -1.0), 1.0);
        assert_eq!(ev("1.5e1 + 2E-1", 0.0, 0.0), 15.2);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_field("1 + * 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {:?}", other),
        }
        match parse_field("1 + z") {
            Err(ExprError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "z");
                assert_eq!(offset, 4);
            }
            other => panic!("unexpected {:?}", other),
        }
        assert!(matches!(parse_field("(1 + 2"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse_field("1 2"), Err(ExprError::Syntax { offset: 2, .. })));
        assert!(matches!(parse_field(""), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn domain_errors_are_not_nan() {
        let e = parse_field("log(x)").unwrap();
        assert!(matches!(e.eval(-1.0, 0.0), Err(ExprError::Eval { .. })));
        assert!(matches!(e.eval(0.0, 0.0), Err(ExprError::Eval { .. })));
        let s = parse_field("sqrt(x - 1)").unwrap();
        assert!(s.eval(0.5, 0.0).is_err());
        assert_eq!(s.eval(5.0, 0.0).unwrap(), 2.0);
        assert!(parse_field("1/x").unwrap().eval(0.0, 1.0).is_err());
    }

    #[test]
    fn print_round_trip_is_structural() {
        for s in [
            "2 - 0.5*x",
            "-x^2 + sin(pi*x)*cos(y)",
            "(1 - x^2 - y^2)*sin(x + 2*y)",
            "min(x, y) / max(1, abs(x))",
            "exp(-1e-7*x) - -y",
            "2^3^2",
            "sqrt(log(2 + x))",
        ] {
            let a = parse_field(s).unwrap();
            let b = parse_field(&a.to_string()).unwrap();
            assert_eq!(a, b, "round trip of {}", s);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let cases = [
            "x^3*y - 2*y",
            "sin(x + 2*y)*(1 - x^2 - y^2)",
            "exp(x*y)/(2 + x^2)",
            "sqrt(1 + x^2 + y^2) + log(3 + x)",
            "(1 + x^2)^(0.5*y + 1)",
            "abs(x - 3)*cos(pi*y)",
        ];
        let h = 1e-6;
        for s in cases {
            let e = parse_field(s).unwrap();
            let [dx, dy] = e.gradient().unwrap();
            for &(x, y) in &[(0.3, 0.7), (-0.4, 0.2), (0.9, -0.6)] {
                let fx = (e.eval(x + h, y).unwrap() - e.eval(x - h, y).unwrap()) / (2.0 * h);
                let fy = (e.eval(x, y + h).unwrap() - e.eval(x, y - h).unwrap()) / (2.0 * h);
                assert!((dx.eval(x, y).unwrap() - fx).abs() < 1e-7, "{} d/dx", s);
                assert!((dy.eval(x, y).unwrap() - fy).abs() < 1e-7, "{} d/dy", s);
            }
        }
    }

    #[test]
    fn min_max_are_not_differentiated() {
        let e = parse_field("min(x, 1)").unwrap();
        assert!(matches!(e.derivative(Var::X), Err(ExprError::NotDifferentiable(_))));
        let c = parse_field("min(2, 3) * x").unwrap();
        assert_eq!(c.derivative(Var::X).unwrap().eval(0.0, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn constant_detection() {
        assert_eq!(parse_field("2*pi").unwrap().as_constant(), Some(2.0 * std::f64::consts::PI));
        assert_eq!(parse_field("2 + 0*x").unwrap().as_constant(), None);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn arb_node() -> impl Strategy<Value = Node> {
            let leaf = prop_oneof![
                (0.0f64..100.0).prop_map(Node::Num),
                Just(Node::Var(Var::X)),
                Just(Node::Var(Var::Y)),
                Just(Node::Pi),
            ];
            leaf.prop_recursive(4, 24, 2, |inner| {
                prop_oneof![
                    inner.clone().prop_map(|a| Node::Neg(Box::new(a))),
                    (prop_oneof![Just(Func::Sin), Just(Func::Exp), Just(Func::Abs)], inner.clone())
                        .prop_map(|(f, a)| Node::Call(f, Box::new(a))),
                    (
                        prop_oneof![
                            Just(BinOp::Add),
                            Just(BinOp::Sub),
                            Just(BinOp::Mul),
                            Just(BinOp::Div),
                            Just(BinOp::Pow),
                            Just(BinOp::Max)
                        ],
                        inner.clone(),
                        inner
                    )
                        .prop_map(|(op, a, b)| Node::Bin(op, Box::new(a), Box::new(b))),
                ]
            })
        }

        proptest! {
            #[test]
            fn print_parse_identity(node in arb_node()) {
                let e = ScalarFieldExpr::from_node(node);
                let back = parse_field(&e.to_string()).unwrap();
                prop_assert_eq!(e, back);
            }
        }
    }
}
