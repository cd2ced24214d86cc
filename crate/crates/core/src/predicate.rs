//! Boolean segment predicates over covariate columns.
//!
//! Grammar:
//!
//! ```text
//! expr    := or
//! or      := and ("or" and)*
//! and     := unary ("and" unary)*
//! unary   := "not" unary | "(" expr ")" | compare
//! compare := operand op operand
//! op      := == | != | < | <= | > | >=
//! operand := identifier | `quoted identifier` | number | 'string' | "string"
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::frame::{CovColumn, CovValue, CovariateTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }

    fn flip(self) -> CmpOp {
        match self {
            CmpOp::Lt => CmpOp::Gt,
            CmpOp::Le => CmpOp::Ge,
            CmpOp::Gt => CmpOp::Lt,
            CmpOp::Ge => CmpOp::Le,
            op => op,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Column(String),
    Num(f64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Cmp(Operand, CmpOp, Operand),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

/// A parsed segment predicate. Displays in a canonical form, so two
/// spellings of the same expression compare equal after parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPredicate {
    source: String,
    expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Op(CmpOp),
    And,
    Or,
    Not,
    LParen,
    RParen,
}

fn lex(s: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |msg: String| Error::Predicate(format!("{msg} in `{s}`"));
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1
            }
            '=' | '!' | '<' | '>' => {
                let next = chars.get(i + 1).copied();
                let (op, len) = match (c, next) {
                    ('=', Some('=')) => (CmpOp::Eq, 2),
                    ('!', Some('=')) => (CmpOp::Ne, 2),
                    ('<', Some('=')) => (CmpOp::Le, 2),
                    ('>', Some('=')) => (CmpOp::Ge, 2),
                    ('<', _) => (CmpOp::Lt, 1),
                    ('>', _) => (CmpOp::Gt, 1),
                    _ => return Err(err(format!("unexpected `{c}` at offset {i}"))),
                };
                out.push(Tok::Op(op));
                i += len;
            }
            '\'' | '"' | '`' => {
                let end = chars[i + 1..]
                    .iter()
                    .position(|x| *x == c)
                    .ok_or_else(|| err(format!("unterminated quote at offset {i}")))?;
                let text: String = chars[i + 1..i + 1 + end].iter().collect();
                out.push(if c == '`' { Tok::Ident(text) } else { Tok::Str(text) });
                i += end + 2;
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' => {
                let start = i;
                i += 1;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric()
                        || chars[i] == '.'
                        || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let x: f64 = text.parse().map_err(|_| err(format!("bad number `{text}`")))?;
                if !x.is_finite() {
                    return Err(err(format!("non-finite number `{text}`")));
                }
                out.push(Tok::Num(x));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push(match word.as_str() {
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    _ => Tok::Ident(word),
                });
            }
            _ => return Err(err(format!("unexpected `{c}` at offset {i}"))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Predicate(format!("{msg} in `{}`", self.src))
    }
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }
    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }
    fn or(&mut self) -> Result<Expr> {
        let mut lhs = self.and()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }
    fn and(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            lhs = Expr::And(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }
    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Not) => {
                self.pos += 1;
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.or()?;
                if self.next() != Some(Tok::RParen) {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            _ => self.compare(),
        }
    }
    fn operand(&mut self) -> Result<Operand> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(Operand::Column(s)),
            Some(Tok::Num(x)) => Ok(Operand::Num(x)),
            Some(Tok::Str(s)) => Ok(Operand::Str(s)),
            _ => Err(self.err("expected a column name or literal")),
        }
    }
    fn compare(&mut self) -> Result<Expr> {
        let lhs = self.operand()?;
        let op = match self.next() {
            Some(Tok::Op(op)) => op,
            _ => return Err(self.err("expected a comparison operator")),
        };
        let rhs = self.operand()?;
        if !matches!(lhs, Operand::Column(_)) && !matches!(rhs, Operand::Column(_)) {
            return Err(self.err("a comparison must reference a column"));
        }
        Ok(Expr::Cmp(lhs, op, rhs))
    }
}

impl SegmentPredicate {
    pub fn parse(s: &str) -> Result<Self> {
        let toks = lex(s)?;
        if toks.is_empty() {
            return Err(Error::Predicate("empty predicate".into()));
        }
        let mut p = Parser { toks, pos: 0, src: s };
        let expr = p.or()?;
        if p.pos != p.toks.len() {
            return Err(p.err("trailing input"));
        }
        Ok(SegmentPredicate {
            source: s.to_string(),
            expr,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// Column names referenced by the predicate.
    pub fn columns(&self) -> BTreeSet<String> {
        fn walk(e: &Expr, out: &mut BTreeSet<String>) {
            match e {
                Expr::Cmp(a, _, b) => {
                    for o in [a, b] {
                        if let Operand::Column(c) = o {
                            out.insert(c.clone());
                        }
                    }
                }
                Expr::Not(e) => walk(e, out),
                Expr::And(a, b) | Expr::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.expr, &mut out);
        out
    }

    /// Row mask over `table`. Columns absent from the table are a contract
    /// error; comparing a numeric column with a string is a predicate error.
    pub fn evaluate(&self, table: &CovariateTable) -> Result<Vec<bool>> {
        for c in self.columns() {
            if table.get(&c).is_none() {
                return Err(Error::Contract(format!(
                    "predicate `{}` references `{c}`, which is not a model covariate",
                    self.source
                )));
            }
        }
        let rows = table.rows();
        let mut out = vec![false; rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.eval_row(&self.expr, table, r)?;
        }
        Ok(out)
    }

    fn eval_row(&self, e: &Expr, table: &CovariateTable, r: usize) -> Result<bool> {
        Ok(match e {
            Expr::Cmp(a, op, b) => {
                let (col, lit, op) = match (a, b) {
                    (Operand::Column(c), lit) => (c, lit, *op),
                    (lit, Operand::Column(c)) => (c, lit, op.flip()),
                    _ => unreachable!("parser requires a column"),
                };
                let column = table.get(col).expect("checked in evaluate");
                let lhs = column.value(r);
                match lit {
                    Operand::Column(other) => {
                        let rhs = table.get(other).expect("checked in evaluate").value(r);
                        compare(&lhs, &rhs, op).ok_or_else(|| self.mismatch(col))?
                    }
                    Operand::Num(x) => compare(&lhs, &CovValue::Num(*x), op).ok_or_else(|| self.mismatch(col))?,
                    Operand::Str(s) => match column {
                        CovColumn::Numeric(_) => return Err(self.mismatch(col)),
                        CovColumn::Categorical { .. } => {
                            compare(&lhs, &CovValue::Str(s), op).ok_or_else(|| self.mismatch(col))?
                        }
                    },
                }
            }
            Expr::Not(e) => !self.eval_row(e, table, r)?,
            Expr::And(a, b) => self.eval_row(a, table, r)? && self.eval_row(b, table, r)?,
            Expr::Or(a, b) => self.eval_row(a, table, r)? || self.eval_row(b, table, r)?,
        })
    }

    fn mismatch(&self, col: &str) -> Error {
        Error::Predicate(format!(
            "type mismatch comparing column `{col}` in `{}`",
            self.source
        ))
    }
}

fn compare(a: &CovValue, b: &CovValue, op: CmpOp) -> Option<bool> {
    match (a, b) {
        (CovValue::Num(x), CovValue::Num(y)) => x.partial_cmp(y).map(|o| op.holds(o)),
        (CovValue::Str(x), CovValue::Str(y)) => Some(op.holds(x.cmp(y))),
        // A categorical column compared with a number compares its label text.
        (CovValue::Str(x), CovValue::Num(y)) => match x.parse::<f64>() {
            Ok(v) => v.partial_cmp(y).map(|o| op.holds(o)),
            Err(_) => match op {
                CmpOp::Eq => Some(false),
                CmpOp::Ne => Some(true),
                _ => None,
            },
        },
        (CovValue::Num(_), CovValue::Str(_)) => None,
    }
}

fn fmt_operand(o: &Operand, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match o {
        Operand::Column(c) if c.chars().all(|ch| ch.is_alphanumeric() || ch == '_' || ch == '.') => {
            write!(f, "{c}")
        }
        Operand::Column(c) => write!(f, "`{c}`"),
        Operand::Num(x) => write!(f, "{x}"),
        Operand::Str(s) if s.contains('\'') => write!(f, "\"{s}\""),
        Operand::Str(s) => write!(f, "'{s}'"),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Cmp(a, op, b) => {
                fmt_operand(a, f)?;
                write!(f, " {} ", op.symbol())?;
                fmt_operand(b, f)
            }
            Expr::Not(e) => write!(f, "not ({e})"),
            Expr::And(a, b) => write!(f, "({a}) and ({b})"),
            Expr::Or(a, b) => write!(f, "({a}) or ({b})"),
        }
    }
}

impl fmt::Display for SegmentPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}
