//! A small closed-form expression language over `x`, `y` and the
//! perturbation parameter `eps`.
//!
//! The grammar is deliberately narrow: numbers, `pi`, `x`, `y`, `eps`,
//! `+ - * /`, `^` with an exponent that does not depend on `x` or `y`, and
//! the functions `sin`, `cos`, `exp`. Every expression in this language has
//! closed-form partial derivatives, which is what lets coefficient gradients
//! and manufactured forcing terms be exact rather than finite-differenced.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    X,
    Y,
    Eps,
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    /// Base raised to an exponent free of `x` and `y`.
    Pow(Arc<Expr>, Arc<Expr>),
    Sin(Arc<Expr>),
    Cos(Arc<Expr>),
    Exp(Arc<Expr>),
}

use Expr::*;

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expression(format!(
                "unexpected trailing input in {src:?}"
            )));
        }
        Ok(e)
    }

    pub fn num(v: f64) -> Expr {
        Num(v)
    }

    pub fn eval(&self, x: f64, y: f64, eps: f64) -> f64 {
        match self {
            Num(v) => *v,
            X => x,
            Y => y,
            Eps => eps,
            Neg(a) => -a.eval(x, y, eps),
            Add(a, b) => a.eval(x, y, eps) + b.eval(x, y, eps),
            Sub(a, b) => a.eval(x, y, eps) - b.eval(x, y, eps),
            Mul(a, b) => a.eval(x, y, eps) * b.eval(x, y, eps),
            Div(a, b) => a.eval(x, y, eps) / b.eval(x, y, eps),
            Pow(a, b) => pow(a.eval(x, y, eps), b.eval(x, y, eps)),
            Sin(a) => a.eval(x, y, eps).sin(),
            Cos(a) => a.eval(x, y, eps).cos(),
            Exp(a) => a.eval(x, y, eps).exp(),
        }
    }

    pub fn depends_on_space(&self) -> bool {
        match self {
            Num(_) | Eps => false,
            X | Y => true,
            Neg(a) | Sin(a) | Cos(a) | Exp(a) => a.depends_on_space(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                a.depends_on_space() || b.depends_on_space()
            }
        }
    }

    pub fn depends_on_eps(&self) -> bool {
        match self {
            Num(_) | X | Y => false,
            Eps => true,
            Neg(a) | Sin(a) | Cos(a) | Exp(a) => a.depends_on_eps(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                a.depends_on_eps() || b.depends_on_eps()
            }
        }
    }

    /// Partial derivative with respect to `var`, lightly simplified.
    pub fn diff(&self, var: Var) -> Expr {
        match self {
            Num(_) | Eps => Num(0.0),
            X => Num(if var == Var::X { 1.0 } else { 0.0 }),
            Y => Num(if var == Var::Y { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(var)),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Div(a, b) => div(
                sub(
                    mul(a.diff(var), (**b).clone()),
                    mul((**a).clone(), b.diff(var)),
                ),
                pow_e((**b).clone(), Num(2.0)),
            ),
            Pow(a, b) => {
                let reduced = sub((**b).clone(), Num(1.0));
                mul(
                    mul((**b).clone(), pow_e((**a).clone(), reduced)),
                    a.diff(var),
                )
            }
            Sin(a) => mul(cos_e((**a).clone()), a.diff(var)),
            Cos(a) => neg(mul(sin_e((**a).clone()), a.diff(var))),
            Exp(a) => mul(exp_e((**a).clone()), a.diff(var)),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Num(v) if *v == 0.0)
    }
}

fn pow(base: f64, exponent: f64) -> f64 {
    if exponent == 2.0 {
        base * base
    } else if exponent == 1.0 {
        base
    } else if exponent == 0.0 {
        1.0
    } else {
        base.powf(exponent)
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Num(v) => Num(-v),
        Neg(inner) => (*inner).clone(),
        a => Neg(Arc::new(a)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Num(p), Num(q)) => Num(p + q),
        _ if a.is_zero() => b,
        _ if b.is_zero() => a,
        _ => Add(Arc::new(a), Arc::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Num(p), Num(q)) => Num(p - q),
        _ if b.is_zero() => a,
        _ if a.is_zero() => neg(b),
        _ => Sub(Arc::new(a), Arc::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Num(p), Num(q)) => Num(p * q),
        _ if a.is_zero() || b.is_zero() => Num(0.0),
        (Num(v), _) if *v == 1.0 => b,
        (_, Num(v)) if *v == 1.0 => a,
        _ => Mul(Arc::new(a), Arc::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Num(p), Num(q)) if *q != 0.0 => Num(p / q),
        _ if a.is_zero() => Num(0.0),
        (_, Num(v)) if *v == 1.0 => a,
        _ => Div(Arc::new(a), Arc::new(b)),
    }
}

pub fn pow_e(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Num(v)) if *v == 0.0 => Num(1.0),
        (_, Num(v)) if *v == 1.0 => a,
        (Num(p), Num(q)) => Num(pow(*p, *q)),
        _ => Pow(Arc::new(a), Arc::new(b)),
    }
}

fn sin_e(a: Expr) -> Expr {
    match a {
        Num(v) => Num(v.sin()),
        a => Sin(Arc::new(a)),
    }
}

fn cos_e(a: Expr) -> Expr {
    match a {
        Num(v) => Num(v.cos()),
        a => Cos(Arc::new(a)),
    }
}

fn exp_e(a: Expr) -> Expr {
    match a {
        Num(v) => Num(v.exp()),
        a => Exp(Arc::new(a)),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Num(v) => write!(f, "{v}"),
            X => write!(f, "x"),
            Y => write!(f, "y"),
            Eps => write!(f, "eps"),
            Neg(a) => write!(f, "(-{a})"),
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Mul(a, b) => write!(f, "({a} * {b})"),
            Div(a, b) => write!(f, "({a} / {b})"),
            Pow(a, b) => write!(f, "({a} ^ {b})"),
            Sin(a) => write!(f, "sin({a})"),
            Cos(a) => write!(f, "cos({a})"),
            Exp(a) => write!(f, "exp({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number {text:?}")))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Token::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Token::RParen);
            i += 1;
        } else {
            return Err(Error::Expression(format!("unexpected character {c:?}")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Add(Arc::new(lhs), Arc::new(rhs))
            } else {
                Sub(Arc::new(lhs), Arc::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Mul(Arc::new(lhs), Arc::new(rhs))
            } else {
                Div(Arc::new(lhs), Arc::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(Neg(Arc::new(self.unary()?)))
            }
            Some(Token::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            if exponent.depends_on_space() {
                return Err(Error::Expression(
                    "exponents must not depend on x or y".into(),
                ));
            }
            return Ok(Pow(Arc::new(base), Arc::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Num(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(Error::Expression("missing ')'".into())),
                }
            }
            Some(Token::Ident(name)) => match name.as_str() {
                "x" => Ok(X),
                "y" => Ok(Y),
                "eps" => Ok(Eps),
                "pi" => Ok(Num(std::f64::consts::PI)),
                "sin" | "cos" | "exp" => {
                    if self.next() != Some(Token::LParen) {
                        return Err(Error::Expression(format!("expected '(' after {name}")));
                    }
                    let arg = self.expr()?;
                    if self.next() != Some(Token::RParen) {
                        return Err(Error::Expression("missing ')'".into()));
                    }
                    Ok(match name.as_str() {
                        "sin" => Sin(Arc::new(arg)),
                        "cos" => Cos(Arc::new(arg)),
                        _ => Exp(Arc::new(arg)),
                    })
                }
                other => Err(Error::Expression(format!("unknown identifier {other:?}"))),
            },
            Some(t) => Err(Error::Expression(format!("unexpected token {t:?}"))),
            None => Err(Error::Expression("unexpected end of input".into())),
        }
    }
}
