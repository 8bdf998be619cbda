//! Scalar expressions for coefficient functions.
//!
//! Coefficients such as `a(t)`, `r1(t)` or `p(t)` and the nonlinearity shapes
//! `G(x)`, `F(x, y)`, `Q(t, x)` are written as text, parsed into an
//! [`Expression`] tree, evaluated pointwise and differentiated symbolically.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := ("-" | "+") unary | power
//! power   := primary ("^" unary)?
//! primary := number | "t" | "x" | "y" | "pi"
//!          | func "(" expr ")" | "sgnpow" "(" expr "," rational ")"
//!          | "(" expr ")"
//! func    := "sin" | "cos" | "exp" | "ln" | "abs"
//! rational:= ["-"] integer ["/" integer]
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-t^2`
//! is `-(t^2)`.

use std::fmt;

use thiserror::Error;

use crate::model::Rational;

/// Free variables an expression may reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X,
    Y,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

/// Values bound to the free variables during evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Env {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl Env {
    pub fn t(t: f64) -> Self {
        Env { t, x: 0.0, y: 0.0 }
    }

    pub fn tx(t: f64, x: f64) -> Self {
        Env { t, x, y: 0.0 }
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Env { t: 0.0, x, y }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::X => self.x,
            Var::Y => self.y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("ln of non-positive argument {0}")]
    LogDomain(f64),
    #[error("{base}^{exponent} is undefined")]
    PowDomain { base: f64, exponent: f64 },
    #[error("non-finite result in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot differentiate {0}")]
pub struct DiffError(pub &'static str);

/// Expression tree.
///
/// Build trees through the smart constructors ([`Expression::add`],
/// [`Expression::neg`], ...) rather than the variants directly: they fold
/// constants and keep printed text re-parseable to the same shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Expression {
    Const(f64),
    Var(Var),
    Neg(Box<Expression>),
    Add(Box<Expression>, Box<Expression>),
    Sub(Box<Expression>, Box<Expression>),
    Mul(Box<Expression>, Box<Expression>),
    Div(Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, Box<Expression>),
    Call(Func, Box<Expression>),
    SgnPow(Box<Expression>, Rational),
}

impl Expression {
    pub fn parse(text: &str) -> Result<Expression, ParseError> {
        let tokens = lex(text)?;
        let mut p = Parser { tokens, pos: 0, len: text.len() };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some(tok) => Err(ParseError::Syntax {
                offset: tok.offset,
                message: format!("unexpected {}", tok.kind.describe()),
            }),
        }
    }

    pub fn constant(c: f64) -> Expression {
        Expression::Const(c)
    }

    pub fn var(v: Var) -> Expression {
        Expression::Var(v)
    }

    pub fn t() -> Expression {
        Expression::Var(Var::T)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expression::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(e: Expression) -> Expression {
        match e {
            Expression::Const(c) => Expression::Const(-c),
            Expression::Neg(inner) => *inner,
            other => Expression::Neg(Box::new(other)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(l: Expression, r: Expression) -> Expression {
        match (l.as_const(), r.as_const()) {
            (Some(a), Some(b)) => Expression::Const(a + b),
            (Some(0.0), _) => r,
            (_, Some(0.0)) => l,
            _ => Expression::Add(Box::new(l), Box::new(r)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(l: Expression, r: Expression) -> Expression {
        match (l.as_const(), r.as_const()) {
            (Some(a), Some(b)) => Expression::Const(a - b),
            (Some(0.0), _) => Expression::neg(r),
            (_, Some(0.0)) => l,
            _ => Expression::Sub(Box::new(l), Box::new(r)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(l: Expression, r: Expression) -> Expression {
        match (l.as_const(), r.as_const()) {
            (Some(a), Some(b)) => Expression::Const(a * b),
            (Some(0.0), _) => Expression::Const(0.0),
            (_, Some(0.0)) => Expression::Const(0.0),
            (Some(1.0), _) => r,
            (_, Some(1.0)) => l,
            (Some(-1.0), _) => Expression::neg(r),
            (_, Some(-1.0)) => Expression::neg(l),
            _ => Expression::Mul(Box::new(l), Box::new(r)),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(l: Expression, r: Expression) -> Expression {
        match (l.as_const(), r.as_const()) {
            (Some(a), Some(b)) if b != 0.0 => Expression::Const(a / b),
            (Some(0.0), _) => Expression::Const(0.0),
            (_, Some(1.0)) => l,
            _ => Expression::Div(Box::new(l), Box::new(r)),
        }
    }

    pub fn pow(base: Expression, exponent: Expression) -> Expression {
        match (base.as_const(), exponent.as_const()) {
            (_, Some(0.0)) => Expression::Const(1.0),
            (_, Some(1.0)) => base,
            _ => Expression::Pow(Box::new(base), Box::new(exponent)),
        }
    }

    pub fn call(f: Func, arg: Expression) -> Expression {
        Expression::Call(f, Box::new(arg))
    }

    pub fn sgnpow(arg: Expression, gamma: Rational) -> Expression {
        Expression::SgnPow(Box::new(arg), gamma)
    }

    /// Whether `v` occurs anywhere in the tree.
    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expression::Const(_) => false,
            Expression::Var(w) => *w == v,
            Expression::Neg(a) | Expression::Call(_, a) | Expression::SgnPow(a, _) => {
                a.depends_on(v)
            }
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b)
            | Expression::Pow(a, b) => a.depends_on(v) || b.depends_on(v),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expression::Const(_) | Expression::Var(_) => 1,
            Expression::Neg(a) | Expression::Call(_, a) | Expression::SgnPow(a, _) => {
                1 + a.node_count()
            }
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b)
            | Expression::Pow(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        let v = match self {
            Expression::Const(c) => return Ok(*c),
            Expression::Var(v) => return Ok(env.get(*v)),
            Expression::Neg(a) => -a.eval(env)?,
            Expression::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expression::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expression::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Expression::Div(a, b) => {
                let num = a.eval(env)?;
                let den = b.eval(env)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                num / den
            }
            Expression::Pow(a, b) => {
                let base = a.eval(env)?;
                let exponent = b.eval(env)?;
                let r = if exponent.fract() == 0.0 && exponent.abs() <= i32::MAX as f64 {
                    if base == 0.0 && exponent < 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    base.powi(exponent as i32)
                } else {
                    base.powf(exponent)
                };
                if r.is_nan() {
                    return Err(EvalError::PowDomain { base, exponent });
                }
                r
            }
            Expression::Call(f, a) => {
                let u = a.eval(env)?;
                match f {
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Exp => u.exp(),
                    Func::Ln => {
                        if u <= 0.0 {
                            return Err(EvalError::LogDomain(u));
                        }
                        u.ln()
                    }
                    Func::Abs => u.abs(),
                }
            }
            Expression::SgnPow(a, g) => g.signed_power(a.eval(env)?),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(self.op_name()))
        }
    }

    /// Shorthand for expressions of `t` alone.
    pub fn at(&self, t: f64) -> Result<f64, EvalError> {
        self.eval(&Env::t(t))
    }

    fn op_name(&self) -> &'static str {
        match self {
            Expression::Const(_) => "constant",
            Expression::Var(_) => "variable",
            Expression::Neg(_) => "negation",
            Expression::Add(..) => "addition",
            Expression::Sub(..) => "subtraction",
            Expression::Mul(..) => "multiplication",
            Expression::Div(..) => "division",
            Expression::Pow(..) => "power",
            Expression::Call(f, _) => f.name(),
            Expression::SgnPow(..) => "sgnpow",
        }
    }

    /// Symbolic partial derivative with respect to `v`.
    ///
    /// `abs` and `sgnpow` nodes are rejected unless their argument does not
    /// depend on `v`.
    pub fn differentiate(&self, v: Var) -> Result<Expression, DiffError> {
        if !self.depends_on(v) {
            return Ok(Expression::Const(0.0));
        }
        Ok(match self {
            Expression::Const(_) => Expression::Const(0.0),
            Expression::Var(w) => Expression::Const(if *w == v { 1.0 } else { 0.0 }),
            Expression::Neg(a) => Expression::neg(a.differentiate(v)?),
            Expression::Add(a, b) => Expression::add(a.differentiate(v)?, b.differentiate(v)?),
            Expression::Sub(a, b) => Expression::sub(a.differentiate(v)?, b.differentiate(v)?),
            Expression::Mul(a, b) => Expression::add(
                Expression::mul(a.differentiate(v)?, (**b).clone()),
                Expression::mul((**a).clone(), b.differentiate(v)?),
            ),
            Expression::Div(a, b) => {
                let da = a.differentiate(v)?;
                let db = b.differentiate(v)?;
                if db.is_zero() {
                    Expression::div(da, (**b).clone())
                } else {
                    Expression::div(
                        Expression::sub(
                            Expression::mul(da, (**b).clone()),
                            Expression::mul((**a).clone(), db),
                        ),
                        Expression::pow((**b).clone(), Expression::Const(2.0)),
                    )
                }
            }
            Expression::Pow(a, b) => {
                if !b.depends_on(v) {
                    // n * u^(n-1) * u'
                    let n = (**b).clone();
                    let reduced = match n.as_const() {
                        Some(c) => Expression::Const(c - 1.0),
                        None => Expression::sub(n.clone(), Expression::Const(1.0)),
                    };
                    Expression::mul(
                        Expression::mul(n, Expression::pow((**a).clone(), reduced)),
                        a.differentiate(v)?,
                    )
                } else {
                    // u^w * (w' ln u + w u'/u)
                    let da = a.differentiate(v)?;
                    let db = b.differentiate(v)?;
                    Expression::mul(
                        self.clone(),
                        Expression::add(
                            Expression::mul(db, Expression::call(Func::Ln, (**a).clone())),
                            Expression::div(Expression::mul((**b).clone(), da), (**a).clone()),
                        ),
                    )
                }
            }
            Expression::Call(f, a) => {
                let da = a.differentiate(v)?;
                let outer = match f {
                    Func::Sin => Expression::call(Func::Cos, (**a).clone()),
                    Func::Cos => Expression::neg(Expression::call(Func::Sin, (**a).clone())),
                    Func::Exp => Expression::call(Func::Exp, (**a).clone()),
                    Func::Ln => return Ok(Expression::div(da, (**a).clone())),
                    Func::Abs => return Err(DiffError("abs(...)")),
                };
                Expression::mul(outer, da)
            }
            Expression::SgnPow(..) => return Err(DiffError("sgnpow(...)")),
        })
    }

    /// Replace every occurrence of `v` with `with`.
    pub fn substitute(&self, v: Var, with: &Expression) -> Expression {
        match self {
            Expression::Const(c) => Expression::Const(*c),
            Expression::Var(w) if *w == v => with.clone(),
            Expression::Var(w) => Expression::Var(*w),
            Expression::Neg(a) => Expression::neg(a.substitute(v, with)),
            Expression::Add(a, b) => Expression::add(a.substitute(v, with), b.substitute(v, with)),
            Expression::Sub(a, b) => Expression::sub(a.substitute(v, with), b.substitute(v, with)),
            Expression::Mul(a, b) => Expression::mul(a.substitute(v, with), b.substitute(v, with)),
            Expression::Div(a, b) => Expression::div(a.substitute(v, with), b.substitute(v, with)),
            Expression::Pow(a, b) => Expression::pow(a.substitute(v, with), b.substitute(v, with)),
            Expression::Call(f, a) => Expression::call(*f, a.substitute(v, with)),
            Expression::SgnPow(a, g) => Expression::sgnpow(a.substitute(v, with), *g),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Add(..) | Expression::Sub(..) => 1,
            Expression::Mul(..) | Expression::Div(..) => 2,
            Expression::Neg(_) => 3,
            Expression::Const(c) if c.is_sign_negative() => 3,
            Expression::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expression, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // Negative literals are always parenthesised so that `(-2)` reparses
            // to the same constant.
            Expression::Const(c) if c.is_sign_negative() => write!(f, "(-{})", -c),
            Expression::Const(c) => write!(f, "{c}"),
            Expression::Var(v) => f.write_str(v.name()),
            Expression::Neg(a) => {
                f.write_str("-")?;
                write_child(f, a, 3)
            }
            Expression::Add(a, b) => {
                write_child(f, a, 1)?;
                f.write_str(" + ")?;
                write_child(f, b, 2)
            }
            Expression::Sub(a, b) => {
                write_child(f, a, 1)?;
                f.write_str(" - ")?;
                write_child(f, b, 2)
            }
            Expression::Mul(a, b) => {
                write_child(f, a, 2)?;
                f.write_str("*")?;
                write_child(f, b, 3)
            }
            Expression::Div(a, b) => {
                write_child(f, a, 2)?;
                f.write_str("/")?;
                write_child(f, b, 4)
            }
            Expression::Pow(a, b) => {
                write_child(f, a, 5)?;
                f.write_str("^")?;
                write_child(f, b, 3)
            }
            Expression::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expression::SgnPow(a, g) => write!(f, "sgnpow({a}, {g})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(n) => format!("number {n}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Plus => "`+`".into(),
            TokenKind::Minus => "`-`".into(),
            TokenKind::Star => "`*`".into(),
            TokenKind::Slash => "`/`".into(),
            TokenKind::Caret => "`^`".into(),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
            TokenKind::Comma => "`,`".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => TokenKind::Plus,
            b'-' => TokenKind::Minus,
            b'*' => TokenKind::Star,
            b'/' => TokenKind::Slash,
            b'^' => TokenKind::Caret,
            b'(' => TokenKind::LParen,
            b')' => TokenKind::RParen,
            b',' => TokenKind::Comma,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let s = &text[start..i];
                let n: f64 = s.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{s}`"),
                })?;
                out.push(Token { kind: TokenKind::Number(n), offset: start });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token { kind: TokenKind::Ident(text[start..i].to_string()), offset: start });
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        i += 1;
        out.push(Token { kind, offset: start });
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_kind(&self) -> Option<&TokenKind> {
        self.peek().map(|t| &t.kind)
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.len, |t| t.offset)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, kind: TokenKind) -> Result<(), ParseError> {
        match self.peek_kind() {
            Some(k) if *k == kind => {
                self.pos += 1;
                Ok(())
            }
            Some(k) => Err(ParseError::Syntax {
                offset: self.offset(),
                message: format!("expected {}, found {}", kind.describe(), k.describe()),
            }),
            None => Err(ParseError::Syntax {
                offset: self.len,
                message: format!("expected {}, found end of input", kind.describe()),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek_kind() {
                Some(TokenKind::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expression::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(TokenKind::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expression::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek_kind() {
                Some(TokenKind::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(TokenKind::Slash) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        match self.peek_kind() {
            Some(TokenKind::Minus) => {
                self.pos += 1;
                let inner = self.unary()?;
                Ok(match inner {
                    Expression::Const(c) => Expression::Const(-c),
                    other => Expression::Neg(Box::new(other)),
                })
            }
            Some(TokenKind::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.primary()?;
        if let Some(TokenKind::Caret) = self.peek_kind() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expression::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expression, ParseError> {
        let offset = self.offset();
        let tok = self.bump().ok_or(ParseError::Syntax {
            offset: self.len,
            message: "unexpected end of input".into(),
        })?;
        match tok.kind {
            TokenKind::Number(n) => Ok(Expression::Const(n)),
            TokenKind::LParen => {
                let e = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::Ident(name) => match name.as_str() {
                "t" => Ok(Expression::Var(Var::T)),
                "x" => Ok(Expression::Var(Var::X)),
                "y" => Ok(Expression::Var(Var::Y)),
                "pi" => Ok(Expression::Const(std::f64::consts::PI)),
                "sgnpow" => {
                    self.expect(TokenKind::LParen)?;
                    let arg = self.expr()?;
                    self.expect(TokenKind::Comma)?;
                    let gamma = self.rational()?;
                    self.expect(TokenKind::RParen)?;
                    Ok(Expression::SgnPow(Box::new(arg), gamma))
                }
                other => match Func::from_name(other) {
                    Some(f) => {
                        self.expect(TokenKind::LParen)?;
                        let arg = self.expr()?;
                        self.expect(TokenKind::RParen)?;
                        Ok(Expression::Call(f, Box::new(arg)))
                    }
                    None => Err(ParseError::UnknownIdentifier { offset, name }),
                },
            },
            other => Err(ParseError::Syntax {
                offset,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn integer(&mut self) -> Result<i64, ParseError> {
        let offset = self.offset();
        match self.bump().map(|t| t.kind) {
            Some(TokenKind::Number(n)) if n.fract() == 0.0 && n.abs() < 1e15 => Ok(n as i64),
            _ => Err(ParseError::Syntax { offset, message: "expected an integer".into() }),
        }
    }

    fn rational(&mut self) -> Result<Rational, ParseError> {
        let offset = self.offset();
        let negative = if let Some(TokenKind::Minus) = self.peek_kind() {
            self.pos += 1;
            true
        } else {
            false
        };
        let num = self.integer()?;
        let den = if let Some(TokenKind::Slash) = self.peek_kind() {
            self.pos += 1;
            self.integer()?
        } else {
            1
        };
        let num = if negative { -num } else { num };
        Rational::new(num, den).map_err(|e| ParseError::Syntax { offset, message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn at(src: &str, t: f64) -> f64 {
        Expression::parse(src).unwrap().at(t).unwrap()
    }

    #[test]
    fn evaluates_section_four_coefficients() {
        assert!((at("sin(t)/7", PI / 2.0) - 1.0 / 7.0).abs() < 1e-15);
        assert!((at("0.2*t", 5.0) - 1.0).abs() < 1e-15);
        assert_eq!(at("1/(t+0.2)", 0.0), 5.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(at("-2^2", 0.0), -4.0);
        assert_eq!(at("2^3^2", 0.0), 512.0);
        assert_eq!(at("8/4/2", 0.0), 1.0);
        assert_eq!(at("1-2-3", 0.0), -4.0);
        assert_eq!(at("2*-3", 0.0), -6.0);
        assert_eq!(at("2^-1", 0.0), 0.5);
        assert_eq!(at("1 + 2*3^2", 0.0), 19.0);
    }

    #[test]
    fn derivatives_of_examples() {
        let d = |src: &str, t: f64| {
            Expression::parse(src).unwrap().differentiate(Var::T).unwrap().at(t).unwrap()
        };
        assert_eq!(d("0.2*t", 3.0), 0.2);
        assert!((d("1/(t+0.2)", 0.0) + 25.0).abs() < 1e-12);
        assert!((d("sin(t)/7", 0.0) - 1.0 / 7.0).abs() < 1e-15);
        assert!((d("t^t", 2.0) - 4.0 * (2f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn partial_derivatives_respect_variable() {
        let q = Expression::parse("sin(t)*x^2 + y").unwrap();
        let qx = q.differentiate(Var::X).unwrap();
        let qt = q.differentiate(Var::T).unwrap();
        let env = Env { t: 0.3, x: 0.5, y: 7.0 };
        assert!((qx.eval(&env).unwrap() - 0.3f64.sin()).abs() < 1e-15);
        assert!((qt.eval(&env).unwrap() - 0.3f64.cos() * 0.25).abs() < 1e-15);
    }

    #[test]
    fn abs_and_sgnpow_refuse_differentiation() {
        assert!(Expression::parse("abs(t)").unwrap().differentiate(Var::T).is_err());
        assert!(Expression::parse("sgnpow(t, 1/3)").unwrap().differentiate(Var::T).is_err());
        // independent of the variable: derivative is zero
        let e = Expression::parse("abs(x) + t").unwrap();
        assert_eq!(e.differentiate(Var::T).unwrap(), Expression::Const(1.0));
    }

    #[test]
    fn domain_errors_are_reported() {
        let e = Expression::parse("1/t").unwrap();
        assert_eq!(e.at(0.0), Err(EvalError::DivisionByZero));
        assert!(matches!(Expression::parse("ln(t)").unwrap().at(-1.0), Err(EvalError::LogDomain(_))));
        assert!(matches!(
            Expression::parse("t^0.5").unwrap().at(-1.0),
            Err(EvalError::PowDomain { .. })
        ));
        assert!(matches!(Expression::parse("exp(t)").unwrap().at(1e4), Err(EvalError::NonFinite(_))));
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match Expression::parse("1 + * t") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match Expression::parse("sin(t) + foo") {
            Err(ParseError::UnknownIdentifier { offset, name }) => {
                assert_eq!(offset, 9);
                assert_eq!(name, "foo");
            }
            other => panic!("{other:?}"),
        }
        assert!(Expression::parse("(t").is_err());
        assert!(Expression::parse("").is_err());
        assert!(Expression::parse("sgnpow(t, 1/2)").is_err());
        assert!(Expression::parse("t $").is_err());
    }

    #[test]
    fn printing_round_trips_shape() {
        for src in [
            "-t^2",
            "(-t)^2",
            "1/(t+0.2)",
            "0.01*(0.8*t + 0.2)^(1/3)/((t + 0.1)*(t + 0.2))",
            "sgnpow(x, 1/3) - (-2)",
            "a",
        ] {
            let Ok(e) = Expression::parse(src) else { continue };
            let printed = e.to_string();
            assert_eq!(Expression::parse(&printed).unwrap(), e, "{src} -> {printed}");
        }
    }

    #[test]
    fn substitution_composes() {
        let p = Expression::parse("1/(t+0.2)").unwrap();
        let tau = Expression::parse("t - 0.2*t").unwrap();
        let composed = p.substitute(Var::T, &tau);
        assert!((composed.at(1.0).unwrap() - 1.0).abs() < 1e-15);
    }
}
