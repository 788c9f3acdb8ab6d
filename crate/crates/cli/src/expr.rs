//! Scalar field expressions over chart coordinates `x1 .. xd`.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! sum     = product (("+" | "-") product)*
//! product = unary (("*" | "/") unary)*
//! unary   = "-" unary | power
//! power   = atom ("^" unary)?          right associative
//! atom    = number | "x" index | func "(" sum ")" | "(" sum ")"
//! func    = exp | log | sin | cos | sqrt | tanh
//! ```
//!
//! So `-x1^2` is `-(x1^2)` and `2^-1` is `0.5`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    /// `position` is a byte offset into the source.
    #[error("parse error at position {position}: expected {expected}")]
    Parse { position: usize, expected: String },

    #[error("field {field} has shape {found_rows}x{found_cols}, expected {rows}x{cols}")]
    Arity { field: String, rows: usize, cols: usize, found_rows: usize, found_cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Tanh,
}

impl Func {
    const ALL: [(&'static str, Func); 6] = [
        ("exp", Func::Exp),
        ("log", Func::Log),
        ("sin", Func::Sin),
        ("cos", Func::Cos),
        ("sqrt", Func::Sqrt),
        ("tanh", Func::Tanh),
    ];

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Sqrt => v.sqrt(),
            Func::Tanh => v.tanh(),
        }
    }

    fn name(self) -> &'static str {
        Func::ALL.iter().find(|(_, f)| *f == self).map(|(n, _)| *n).expect("listed")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => pow(a.eval(x), b.eval(x)),
            Expr::Call(f, a) => f.apply(a.eval(x)),
        }
    }

    /// True when no coordinate appears.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Call(_, a) => a.is_constant(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.is_constant() && b.is_constant()
            }
        }
    }
}

/// Integer exponents go through `powi` so that negative bases work.
fn pow(base: f64, exponent: f64) -> f64 {
    if exponent.fract() == 0.0 && exponent.abs() <= i32::MAX as f64 {
        base.powi(exponent as i32)
    } else {
        base.powf(exponent)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if v.is_sign_negative() => write!(f, "({v})"),
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Parses `source` as a scalar field on a `dim`-dimensional chart.
pub fn parse(source: &str, dim: usize) -> Result<Expr, ExprError> {
    let mut p = Parser { src: source.as_bytes(), pos: 0, dim };
    let e = p.sum()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error("an operator or end of input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: usize,
}

impl Parser<'_> {
    fn error(&self, expected: &str) -> ExprError {
        ExprError::Parse { position: self.pos, expected: expected.to_string() }
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

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat(b'^') {
            return Ok(Expr::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if !self.eat(b')') {
                    return Err(self.error("')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.name(),
            _ => Err(self.error("a number, coordinate, function or '('")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if !self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                self.pos = mark;
                return Err(self.error("an exponent"));
            }
            digits(self);
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>().map(Expr::Num).map_err(|_| ExprError::Parse { position: start, expected: "a number".into() })
    }

    fn name(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let word = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if let Some(rest) = word.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                return match rest.parse::<usize>() {
                    Ok(i) if (1..=self.dim).contains(&i) => Ok(Expr::Var(i - 1)),
                    _ => Err(ExprError::Parse { position: start + 1, expected: format!("a coordinate index 1..={}", self.dim) }),
                };
            }
        }
        let Some(&(_, func)) = Func::ALL.iter().find(|(n, _)| *n == word) else {
            return Err(ExprError::Parse {
                position: start,
                expected: format!("a coordinate x1..x{} or one of exp, log, sin, cos, sqrt, tanh", self.dim),
            });
        };
        if !self.eat(b'(') {
            return Err(self.error("'('"));
        }
        let arg = self.sum()?;
        if !self.eat(b')') {
            return Err(self.error("')'"));
        }
        Ok(Expr::Call(func, Box::new(arg)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn var(i: usize) -> Box<Expr> {
        Box::new(Expr::Var(i))
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let e = parse("-x1^2", 1).unwrap();
        assert_eq!(e, Expr::Neg(Box::new(Expr::Pow(var(0), Box::new(Expr::Num(2.0))))));
        assert!((e.eval(&[0.7]) + 0.49).abs() < 1e-15);
    }

    #[test]
    fn functions_and_coordinates() {
        let e = parse("exp(x1)*sin(x2)", 2).unwrap();
        assert!((e.eval(&[0.0, std::f64::consts::FRAC_PI_2]) - 1.0).abs() < 1e-15);
        let e = parse("sqrt(x1) + log(x2) - tanh(0) / cos(0)", 2).unwrap();
        assert!((e.eval(&[4.0, 1.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn power_is_right_associative() {
        assert_eq!(parse("2^3^2", 1).unwrap().eval(&[]), 512.0);
        assert_eq!(parse("2^-1", 1).unwrap().eval(&[]), 0.5);
        assert_eq!(parse("(-2)^3", 1).unwrap().eval(&[]), -8.0);
        assert_eq!(parse("1 - 2 - 3", 1).unwrap().eval(&[]), -4.0);
        assert_eq!(parse("8 / 4 / 2", 1).unwrap().eval(&[]), 1.0);
        assert_eq!(parse("1.5e2 + .5", 1).unwrap().eval(&[]), 150.5);
    }

    #[test]
    fn out_of_range_coordinate_reports_the_index() {
        match parse("x1 + x3", 2) {
            Err(ExprError::Parse { position, expected }) => {
                assert_eq!(position, 6);
                assert!(expected.contains("1..=2"), "{expected}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_carry_positions() {
        let pos = |s: &str| match parse(s, 2) {
            Err(ExprError::Parse { position, .. }) => position,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(pos("x1 +"), 4);
        assert_eq!(pos("(x1"), 3);
        assert_eq!(pos("x1 $ 2"), 3);
        assert_eq!(pos("cosh(x1)"), 0);
        assert_eq!(pos("sin x1"), 4);
        assert_eq!(pos("1e+"), 1);
        assert_eq!(pos("x1 x2"), 3);
        assert_eq!(pos(""), 0);
    }

    #[test]
    fn constant_detection() {
        assert!(parse("exp(1) * 2", 1).unwrap().is_constant());
        assert!(!parse("0 * x1", 1).unwrap().is_constant());
    }

    fn leaf() -> impl Strategy<Value = Expr> {
        prop_oneof![(-5.0..5.0_f64).prop_map(|v| Expr::Num((v * 8.0).round() / 8.0)), (0..2_usize).prop_map(Expr::Var)]
    }

    fn tree() -> impl Strategy<Value = Expr> {
        leaf().prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|a| Expr::Call(Func::Sin, Box::new(a))),
                inner.prop_map(|a| Expr::Pow(Box::new(a), Box::new(Expr::Num(2.0)))),
            ]
        })
    }

    proptest! {
        /// Fully parenthesised printing parses back to the same tree.
        #[test]
        fn display_round_trips(e in tree()) {
            let text = e.to_string();
            let back = parse(&text, 2).unwrap();
            let at = [0.3, -1.1];
            let (a, b) = (e.eval(&at), back.eval(&at));
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()), "{text}: {a} vs {b}");
        }

        #[test]
        fn parsing_never_panics(s in "[-+*/^(). 0-9a-z]{0,24}") {
            let _ = parse(&s, 3);
        }
    }
}
