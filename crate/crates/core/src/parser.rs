//! Textual formula language: parsing with source spans, and canonical
//! printing.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | call
//! call  := IDENT '(' args ')' | atom
//! atom  := var | number | '[' number (',' number)* ']' | '(' expr ')'
//! var   := ('Vi' | 'Vj' | 'Pm') '(' INT ',' INT ')'
//! ```
//!
//! `a * b` is `Scal` when `a` has dimension 1 and an elementwise `Mult`
//! otherwise. Every operator is also available in call
//! form (`Mult(a, b)`, `Neg(a)`, ...), which the printer falls back to
//! whenever the infix form would parse to a different node.
//!
//! Reductions are written `KIND(expr, axis[, k])`, e.g.
//! `ArgKMin(SqDist(Vi(0,3),Vj(0,3)), 0, 4)`.

use std::fmt;

use thiserror::Error;

use crate::formula::{Category, Formula, FormulaError, Op, VarSpec};
use crate::reduction::{Axis, ReductionKind, ReductionSpec};

/// Byte range `start..end` of the input text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
}

impl SourceSpan {
    fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    fn to(self, other: SourceSpan) -> SourceSpan {
        SourceSpan::new(self.start, other.end)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected {found}, expected {}", .expected.join(" or "))]
    Unexpected {
        found: String,
        expected: Vec<&'static str>,
    },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("invalid number `{0}`")]
    InvalidNumber(String),
    #[error(transparent)]
    Formula(FormulaError),
    #[error("axis must be 0 or 1, got {0}")]
    InvalidAxis(String),
    #[error("ArgKMin requires a K argument")]
    MissingK,
    #[error("only ArgKMin takes a K argument")]
    UnexpectedK,
    #[error("K must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} at {}..{}", span.start, span.end)]
pub struct ParseError {
    pub span: SourceSpan,
    pub kind: ParseErrorKind,
}

impl ParseError {
    /// Multi-line message with the offending span underlined.
    pub fn render(&self, input: &str) -> String {
        let start = self.span.start.min(input.len());
        let end = self.span.end.clamp(start, input.len());
        let caret_pad = input[..start].chars().count();
        let carets = input[start..end].chars().count().max(1);
        format!(
            "error: {}\n  {}\n  {}{}",
            self.kind,
            input,
            " ".repeat(caret_pad),
            "^".repeat(carets)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(s) => format!("number `{s}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(input: &str) -> Result<Vec<(Tok, SourceSpan)>, ParseError> {
    let bytes = input.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let single = match c {
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b'[' => Some(Tok::LBracket),
            b']' => Some(Tok::RBracket),
            b',' => Some(Tok::Comma),
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            _ => None,
        };
        if let Some(t) = single {
            toks.push((t, SourceSpan::new(i, i + 1)));
            i += 1;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            toks.push((Tok::Ident(input[start..i].to_string()), SourceSpan::new(start, i)));
        } else if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut k = i + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    i = k;
                }
            }
            toks.push((Tok::Number(input[start..i].to_string()), SourceSpan::new(start, i)));
        } else {
            let ch = input[start..].chars().next().unwrap_or('?');
            return Err(ParseError {
                span: SourceSpan::new(start, start + ch.len_utf8()),
                kind: ParseErrorKind::Unexpected {
                    found: format!("character `{ch}`"),
                    expected: vec!["an expression"],
                },
            });
        }
    }
    // Zero-width spans are reported on the last byte so every span covers input.
    let end = input.len();
    toks.push((Tok::Eof, SourceSpan::new(end.saturating_sub(1), end)));
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, SourceSpan)>,
    pos: usize,
}

/// A parsed sub-expression and the source it came from.
struct Spanned {
    f: Formula,
    span: SourceSpan,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn span(&self) -> SourceSpan {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, SourceSpan) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: Vec<&'static str>) -> ParseError {
        ParseError {
            span: self.span(),
            kind: ParseErrorKind::Unexpected {
                found: self.peek().describe(),
                expected,
            },
        }
    }

    fn expect(&mut self, tok: Tok, name: &'static str) -> Result<SourceSpan, ParseError> {
        if *self.peek() == tok {
            Ok(self.bump().1)
        } else {
            Err(self.unexpected(vec![name]))
        }
    }

    fn build(op: Op, args: Vec<Formula>, span: SourceSpan) -> Result<Spanned, ParseError> {
        Formula::compose(op, args)
            .map(|f| Spanned { f, span })
            .map_err(|e| ParseError {
                span,
                kind: ParseErrorKind::Formula(e),
            })
    }

    fn expr(&mut self) -> Result<Spanned, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => Op::Add,
                Tok::Minus => Op::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            let span = lhs.span.to(rhs.span);
            lhs = Self::build(op, vec![lhs.f, rhs.f], span)?;
        }
    }

    fn term(&mut self) -> Result<Spanned, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let star = match self.peek() {
                Tok::Star => true,
                Tok::Slash => false,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            let span = lhs.span.to(rhs.span);
            let op = if !star {
                Op::Divide
            } else if lhs.f.dim() == 1 {
                Op::Scal
            } else {
                Op::Mult
            };
            lhs = Self::build(op, vec![lhs.f, rhs.f], span)?;
        }
    }

    fn unary(&mut self) -> Result<Spanned, ParseError> {
        if *self.peek() == Tok::Minus {
            let (_, start) = self.bump();
            let inner = self.unary()?;
            let span = start.to(inner.span);
            return Self::build(Op::Neg, vec![inner.f], span);
        }
        self.atom()
    }

    fn number(&mut self) -> Result<(f64, SourceSpan), ParseError> {
        let negative = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        let span = self.span();
        let value = match self.peek() {
            Tok::Number(s) => s.parse::<f64>().map_err(|_| ParseError {
                span,
                kind: ParseErrorKind::InvalidNumber(s.clone()),
            })?,
            Tok::Ident(s) if s == "inf" => f64::INFINITY,
            Tok::Ident(s) if s == "nan" => f64::NAN,
            _ => return Err(self.unexpected(vec!["a number"])),
        };
        self.bump();
        Ok((if negative { -value } else { value }, span))
    }

    fn integer(&mut self) -> Result<(i64, SourceSpan), ParseError> {
        let start = self.span();
        let negative = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().clone() {
            Tok::Number(s) => {
                let (_, span) = self.bump();
                let v: i64 = s.parse().map_err(|_| ParseError {
                    span,
                    kind: ParseErrorKind::InvalidNumber(s.clone()),
                })?;
                Ok((if negative { -v } else { v }, start.to(span)))
            }
            _ => Err(self.unexpected(vec!["an integer"])),
        }
    }

    fn unsigned(&mut self) -> Result<(usize, SourceSpan), ParseError> {
        let (v, span) = self.integer()?;
        usize::try_from(v).map(|v| (v, span)).map_err(|_| ParseError {
            span,
            kind: ParseErrorKind::InvalidNumber(v.to_string()),
        })
    }

    fn atom(&mut self) -> Result<Spanned, ParseError> {
        match self.peek().clone() {
            Tok::LParen => {
                let open = self.bump().1;
                let inner = self.expr()?;
                let close = self.expect(Tok::RParen, "`)`")?;
                Ok(Spanned {
                    f: inner.f,
                    span: open.to(close),
                })
            }
            Tok::Number(_) => {
                let (v, span) = self.number()?;
                Ok(Spanned {
                    f: Formula::scalar(v),
                    span,
                })
            }
            Tok::LBracket => {
                let open = self.bump().1;
                let mut values = vec![self.number()?.0];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    values.push(self.number()?.0);
                }
                let close = self.expect(Tok::RBracket, "`]`")?;
                Self::build(Op::Constant(values), Vec::new(), open.to(close))
            }
            Tok::Ident(name) => self.call(name),
            _ => Err(self.unexpected(vec!["an expression"])),
        }
    }

    fn call(&mut self, name: String) -> Result<Spanned, ParseError> {
        let (_, name_span) = self.bump();
        let category = match name.as_str() {
            "Vi" => Some(Category::I),
            "Vj" => Some(Category::J),
            "Pm" => Some(Category::P),
            _ => None,
        };
        let op = match name.as_str() {
            "Vi" | "Vj" | "Pm" => None,
            "Add" => Some(Op::Add),
            "Sub" => Some(Op::Sub),
            "Neg" => Some(Op::Neg),
            "Mult" => Some(Op::Mult),
            "Divide" => Some(Op::Divide),
            "Scal" => Some(Op::Scal),
            "Dot" => Some(Op::Dot),
            "SqNorm2" => Some(Op::SqNorm2),
            "SqDist" => Some(Op::SqDist),
            "Exp" => Some(Op::Exp),
            "Log" => Some(Op::Log),
            "Sqrt" => Some(Op::Sqrt),
            "Abs" => Some(Op::Abs),
            "Sign" => Some(Op::Sign),
            "Sum" => Some(Op::Sum),
            "Concat" => Some(Op::Concat),
            "Powi" => Some(Op::Powi(0)),
            "Extract" => Some(Op::Extract { start: 0, len: 0 }),
            _ => {
                return Err(ParseError {
                    span: name_span,
                    kind: ParseErrorKind::UnknownFunction(name),
                })
            }
        };
        self.expect(Tok::LParen, "`(`")?;
        if let Some(category) = category {
            let (slot, _) = self.unsigned()?;
            self.expect(Tok::Comma, "`,`")?;
            let (dim, _) = self.unsigned()?;
            let close = self.expect(Tok::RParen, "`)`")?;
            let span = name_span.to(close);
            let v = VarSpec::new(category, slot, dim).map_err(|e| ParseError {
                span,
                kind: ParseErrorKind::Formula(e),
            })?;
            return Self::build(Op::Var(v), Vec::new(), span);
        }
        let mut op = op.expect("known function");
        let mut args = vec![self.expr()?.f];
        match op {
            Op::Powi(_) => {
                self.expect(Tok::Comma, "`,`")?;
                let (n, span) = self.integer()?;
                let n = i32::try_from(n).map_err(|_| ParseError {
                    span,
                    kind: ParseErrorKind::InvalidNumber(n.to_string()),
                })?;
                op = Op::Powi(n);
            }
            Op::Extract { .. } => {
                self.expect(Tok::Comma, "`,`")?;
                let (start, _) = self.unsigned()?;
                self.expect(Tok::Comma, "`,`")?;
                let (len, _) = self.unsigned()?;
                op = Op::Extract { start, len };
            }
            _ => {
                while *self.peek() == Tok::Comma {
                    self.bump();
                    args.push(self.expr()?.f);
                }
            }
        }
        let close = self.expect(Tok::RParen, "`)`")?;
        Self::build(op, args, name_span.to(close))
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        if *self.peek() == Tok::Eof {
            Ok(())
        } else {
            Err(self.unexpected(vec!["end of input"]))
        }
    }
}

/// Parses a formula, checking dimensions as it goes.
pub fn parse_formula(text: &str) -> Result<Formula, ParseError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
    };
    let f = p.expr()?;
    p.finish()?;
    Ok(f.f)
}

/// Parses `KIND(expr, axis[, k])` into a reduction spec and its formula.
pub fn parse_reduction(text: &str) -> Result<(ReductionSpec, Formula), ParseError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
    };
    let (name, name_span) = match p.peek().clone() {
        Tok::Ident(name) => (name, p.bump().1),
        _ => return Err(p.unexpected(vec!["a reduction name"])),
    };
    let kind = ReductionKind::from_name(&name).ok_or_else(|| ParseError {
        span: name_span,
        kind: ParseErrorKind::UnknownFunction(name.clone()),
    })?;
    p.expect(Tok::LParen, "`(`")?;
    let f = p.expr()?.f;
    p.expect(Tok::Comma, "`,`")?;
    let (axis_value, axis_span) = p.integer()?;
    let axis = match axis_value {
        0 => Axis::OverJ,
        1 => Axis::OverI,
        other => {
            return Err(ParseError {
                span: axis_span,
                kind: ParseErrorKind::InvalidAxis(other.to_string()),
            })
        }
    };
    let k = if *p.peek() == Tok::Comma {
        p.bump();
        let (k, span) = p.integer()?;
        if kind != ReductionKind::ArgKMin {
            return Err(ParseError {
                span,
                kind: ParseErrorKind::UnexpectedK,
            });
        }
        if k < 1 {
            return Err(ParseError {
                span,
                kind: ParseErrorKind::InvalidK,
            });
        }
        Some(k as usize)
    } else {
        None
    };
    let close = p.expect(Tok::RParen, "`)`")?;
    p.finish()?;
    let spec = match (kind, k) {
        (ReductionKind::ArgKMin, None) => {
            return Err(ParseError {
                span: name_span.to(close),
                kind: ParseErrorKind::MissingK,
            })
        }
        (ReductionKind::ArgKMin, Some(k)) => ReductionSpec::arg_k_min(axis, k),
        (kind, _) => ReductionSpec::new(kind, axis),
    };
    Ok((spec, f))
}

/// Canonical text of a formula; `parse_formula(&format_formula(f)) == f`.
pub fn format_formula(f: &Formula) -> String {
    let mut out = String::new();
    write_formula(f, &mut out, 0);
    out
}

/// Canonical text of a reduction over `f`.
pub fn format_reduction(spec: &ReductionSpec, f: &Formula) -> String {
    let mut s = format!("{}({},{}", spec.kind.name(), format_formula(f), spec.axis.index());
    if spec.kind == ReductionKind::ArgKMin {
        s.push_str(&format!(",{}", spec.k));
    }
    s.push(')');
    s
}

fn format_number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else if v != 0.0 && (v.abs() >= 1e16 || v.abs() < 1e-5) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Binding strength of the printed form: 1 additive, 2 multiplicative,
/// 3 prefix minus, 4 atoms and calls.
fn level(f: &Formula) -> u8 {
    match f.op() {
        Op::Add | Op::Sub => 1,
        Op::Divide => 2,
        Op::Mult | Op::Scal if star_form(f) => 2,
        Op::Neg => 3,
        _ => 4,
    }
}

/// Whether `a * b` reparses to this Mult/Scal node.
fn star_form(f: &Formula) -> bool {
    let c = f.children();
    let scal_shape = c[0].dim() == 1;
    match f.op() {
        Op::Scal => scal_shape,
        Op::Mult => !scal_shape,
        _ => false,
    }
}

fn write_formula(f: &Formula, out: &mut String, min_level: u8) {
    let lvl = level(f);
    let paren = lvl < min_level;
    if paren {
        out.push('(');
    }
    let c = f.children();
    let infix = |out: &mut String, sym: char| {
        write_formula(&c[0], out, lvl);
        out.push(sym);
        write_formula(&c[1], out, lvl + 1);
    };
    match f.op() {
        Op::Var(v) => out.push_str(&format!("{}({},{})", v.category.constructor(), v.slot, v.dim)),
        Op::Constant(vals) => {
            if vals.len() == 1 && vals[0].is_finite() && !vals[0].is_sign_negative() {
                out.push_str(&format_number(vals[0]));
            } else {
                let items: Vec<String> = vals.iter().map(|&v| format_number(v)).collect();
                out.push_str(&format!("[{}]", items.join(",")));
            }
        }
        Op::Add => infix(out, '+'),
        Op::Sub => infix(out, '-'),
        Op::Divide => infix(out, '/'),
        Op::Mult | Op::Scal if lvl == 2 => infix(out, '*'),
        Op::Neg => {
            out.push('-');
            write_formula(&c[0], out, 3);
        }
        Op::Powi(n) => {
            out.push_str("Powi(");
            write_formula(&c[0], out, 0);
            out.push_str(&format!(",{n})"));
        }
        Op::Extract { start, len } => {
            out.push_str("Extract(");
            write_formula(&c[0], out, 0);
            out.push_str(&format!(",{start},{len})"));
        }
        op => {
            out.push_str(op.name());
            out.push('(');
            for (k, child) in c.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_formula(child, out, 0);
            }
            out.push(')');
        }
    }
    if paren {
        out.push(')');
    }
}

impl fmt::Display for ReductionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(axis={}", self.kind.name(), self.axis.index())?;
        if self.kind == ReductionKind::ArgKMin {
            write!(f, ",k={}", self.k)?;
        }
        f.write_str(")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_string_matches_hand_built() {
        let f = parse_formula("Exp(-SqDist(Vi(0,3),Vj(0,3))) * Vj(1,1)").unwrap();
        assert_eq!(f.dim(), 1);
        assert!(matches!(f.op(), Op::Scal));
        let x = Formula::vi(0, 3).unwrap();
        let y = Formula::vj(0, 3).unwrap();
        let b = Formula::vj(1, 1).unwrap();
        let k = x.sqdist(&y).unwrap().neg().exp();
        assert_eq!(f, k.scal(&b).unwrap());
        assert_eq!(format_formula(&f), "Exp(-SqDist(Vi(0,3),Vj(0,3)))*Vj(1,1)");
        let mult = parse_formula("Mult(Exp(-SqDist(Vi(0,3),Vj(0,3))),Vj(1,1))").unwrap();
        assert_eq!(mult, k.mult(&b).unwrap());
        assert_eq!(format_formula(&mult), "Mult(Exp(-SqDist(Vi(0,3),Vj(0,3))),Vj(1,1))");
    }

    #[test]
    fn star_picks_scal_for_scalar_times_vector() {
        let f = parse_formula("Pm(0,1) * Vi(0,3)").unwrap();
        assert!(matches!(f.op(), Op::Scal));
        assert_eq!(f.dim(), 3);
        let g = parse_formula("Vi(0,3) * Pm(0,1)").unwrap();
        assert!(matches!(g.op(), Op::Mult));
    }

    #[test]
    fn add_and_dimension_error_span() {
        let f = parse_formula("Vi(0,2) + Vj(0,2)").unwrap();
        assert!(matches!(f.op(), Op::Add));
        assert_eq!(f.dim(), 2);
        let text = "Dot(Vi(0,3), Vj(0,2))";
        let err = parse_formula(text).unwrap_err();
        assert!(matches!(
            err.kind,
            ParseErrorKind::Formula(FormulaError::DimensionMismatch { op: "Dot", .. })
        ));
        assert_eq!(err.span, SourceSpan::new(0, text.len()));
        let nested = "Exp(Dot(Vi(0,3), Vj(0,2)))";
        assert_eq!(parse_formula(nested).unwrap_err().span, SourceSpan::new(4, 25));
    }

    #[test]
    fn reductions() {
        let (spec, f) = parse_reduction("Sum(Exp(-SqDist(Vi(0,3),Vj(0,3)))*Vj(1,1), 0)").unwrap();
        assert_eq!(spec, ReductionSpec::new(ReductionKind::Sum, Axis::OverJ));
        assert_eq!(f.dim(), 1);
        let (spec, _) = parse_reduction("ArgKMin(SqDist(Vi(0,3),Vj(0,3)), 0, 4)").unwrap();
        assert_eq!(spec, ReductionSpec::arg_k_min(Axis::OverJ, 4));
        let err = parse_reduction("LogSumExp(Vi(0,1)+Vj(0,1), 2)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::InvalidAxis("2".into()));
        assert_eq!(err.span, SourceSpan::new(27, 28));
        let err = parse_reduction("ArgKMin(SqDist(Vi(0,3),Vj(0,3)), 0)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MissingK);
        assert_eq!(
            parse_reduction("Sum(Vi(0,1), 0, 3)").unwrap_err().kind,
            ParseErrorKind::UnexpectedK
        );
        let (spec, _) = parse_reduction("Max(Vi(0,1)*Vj(0,1),1)").unwrap();
        assert_eq!(spec.axis, Axis::OverI);
    }

    #[test]
    fn canonical_format() {
        let f = parse_formula("Exp( - SqDist(Vi(0,3),Vj(0,3)))").unwrap();
        assert_eq!(format_formula(&f), "Exp(-SqDist(Vi(0,3),Vj(0,3)))");
        let c = Formula::constant(vec![1.5, 2.0]).unwrap();
        assert_eq!(format_formula(&c), "[1.5,2]");
        assert_eq!(format_formula(&Formula::scalar(-2.0)), "[-2]");
        assert_eq!(format_formula(&Formula::scalar(1e-7)), "1e-7");
        let g = parse_formula("Vi(0,1) - (Vj(0,1) - Pm(0,1))").unwrap();
        assert_eq!(format_formula(&g), "Vi(0,1)-(Vj(0,1)-Pm(0,1))");
        let h = parse_formula("(Vi(0,1) - Vj(0,1)) - Pm(0,1)").unwrap();
        assert_eq!(format_formula(&h), "Vi(0,1)-Vj(0,1)-Pm(0,1)");
        let m = parse_formula("Mult(Pm(0,1), Vi(0,3))").unwrap();
        assert_eq!(format_formula(&m), "Mult(Pm(0,1),Vi(0,3))");
        let (spec, f) = parse_reduction("ArgKMin( SqDist(Vi(0,3),Vj(0,3)) ,0 , 4)").unwrap();
        assert_eq!(format_reduction(&spec, &f), "ArgKMin(SqDist(Vi(0,3),Vj(0,3)),0,4)");
    }

    #[test]
    fn subtraction_is_left_associative() {
        let f = parse_formula("Vi(0,1)-Vj(0,1)-Pm(0,1)").unwrap();
        let g = parse_formula("(Vi(0,1)-Vj(0,1))-Pm(0,1)").unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn error_spans_are_inside_input() {
        for text in ["Exp(", "Vi(0,3", "Foo(Vi(0,1))", "Vi(0,3) +", "Vi(0,0)", "1 $ 2", ")"] {
            let err = parse_formula(text).unwrap_err();
            assert!(err.span.start < err.span.end, "{text}: {err:?}");
            assert!(err.span.end <= text.len(), "{text}: {err:?}");
        }
        let msg = parse_formula("Foo(Vi(0,1))").unwrap_err().render("Foo(Vi(0,1))");
        assert!(msg.contains("^^^"), "{msg}");
    }
}
