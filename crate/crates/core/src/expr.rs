//! Solution expressions over a problem's quantities and the shared constants.
//!
//! An [`Expr`] is a binary tree whose leaves are either a quantity slot
//! (`N1..Nk`, indexing the problem's number mapping) or a constant slot
//! (`C1..Cj`, indexing [`Vocabulary::constants`]). Values are bound only at
//! evaluation time, so the same tree can be scored against any problem with
//! enough quantities.
//!
//! Infix grammar (no unary minus):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := power (('*' | '/') power)*
//! power   := atom ('^' power)?
//! atom    := number | 'N'<int> | 'C'<int> | 'pi' | 'π' | '(' sum ')'
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// Default answer-matching tolerance.
pub const ANSWER_EPS: f64 = 1e-4;

/// `|value - answer| <= eps * max(1, |answer|)`.
pub fn answer_matches(value: f64, answer: f64, eps: f64) -> bool {
    value.is_finite() && (value - answer).abs() <= eps * answer.abs().max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl Op {
    /// Fixed enumeration order: `+ - * / ^`.
    pub const ALL: [Op; 5] = [Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Pow];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
            Op::Pow => '^',
        }
    }

    pub fn from_symbol(c: char) -> Option<Op> {
        Some(match c {
            '+' => Op::Add,
            '-' => Op::Sub,
            '*' => Op::Mul,
            '/' => Op::Div,
            '^' => Op::Pow,
            _ => return None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn precedence(self) -> u8 {
        match self {
            Op::Add | Op::Sub => 1,
            Op::Mul | Op::Div => 2,
            Op::Pow => 3,
        }
    }

    fn right_assoc(self) -> bool {
        matches!(self, Op::Pow)
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Op::Add | Op::Mul)
    }

    /// Applies the operator, rejecting singular and non-finite results.
    pub fn apply(self, a: f64, b: f64) -> Result<f64, EvalError> {
        let v = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => {
                if b == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                a / b
            }
            Op::Pow => {
                if a == 0.0 && b < 0.0 {
                    return Err(EvalError::ZeroToNegativePower);
                }
                a.powf(b)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// Solution vocabulary: the five operators, the constant table and the
/// per-problem quantity count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub constants: Vec<f64>,
    pub num_count: usize,
}

impl Vocabulary {
    pub fn default_constants() -> Vec<f64> {
        vec![1.0, PI]
    }

    pub fn new(num_count: usize) -> Self {
        Vocabulary { constants: Self::default_constants(), num_count }
    }

    pub fn with_constants(constants: Vec<f64>, num_count: usize) -> Self {
        Vocabulary { constants, num_count }
    }

    pub fn ops(&self) -> &'static [Op] {
        &Op::ALL
    }

    /// Number of distinct output tokens: operators, constants, quantities.
    pub fn size(&self) -> usize {
        Op::ALL.len() + self.constants.len() + self.num_count
    }

    pub fn pi_index(&self) -> Option<usize> {
        self.constants.iter().position(|&c| c == PI)
    }

    fn constant_index(&self, value: f64) -> Option<usize> {
        self.constants.iter().position(|&c| same_number(c, value))
    }

    fn constant_text(&self, j: usize) -> String {
        match self.constants.get(j) {
            Some(&c) if c == PI => "pi".to_string(),
            Some(&c) => format_number(c),
            None => format!("C{}", j + 1),
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(0)
    }
}

fn same_number(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Shortest decimal rendering that parses back to the same double.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    /// Zero-based index into the problem's quantity list (`N{i+1}`).
    Quantity(usize),
    /// Zero-based index into [`Vocabulary::constants`] (`C{j+1}`).
    Constant(usize),
    Binary { op: Op, left: Box<Expr>, right: Box<Expr> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("zero raised to a negative power")]
    ZeroToNegativePower,
    #[error("non-finite intermediate result")]
    NonFinite,
    #[error("quantity N{0} is unbound")]
    UnboundQuantity(usize),
    #[error("constant C{0} is unbound")]
    UnboundConstant(usize),
}

impl Expr {
    pub fn binary(op: Op, left: Expr, right: Expr) -> Expr {
        Expr::Binary { op, left: Box::new(left), right: Box::new(right) }
    }

    pub fn evaluate(&self, quantities: &[f64], constants: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Quantity(i) => {
                quantities.get(*i).copied().ok_or(EvalError::UnboundQuantity(i + 1))
            }
            Expr::Constant(j) => constants.get(*j).copied().ok_or(EvalError::UnboundConstant(j + 1)),
            Expr::Binary { op, left, right } => {
                let a = left.evaluate(quantities, constants)?;
                let b = right.evaluate(quantities, constants)?;
                op.apply(a, b)
            }
        }
    }

    pub fn op_count(&self) -> usize {
        match self {
            Expr::Binary { left, right, .. } => 1 + left.op_count() + right.op_count(),
            _ => 0,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Binary { left, right, .. } => 1 + left.depth().max(right.depth()),
            _ => 0,
        }
    }

    pub fn max_quantity(&self) -> Option<usize> {
        match self {
            Expr::Quantity(i) => Some(*i),
            Expr::Constant(_) => None,
            Expr::Binary { left, right, .. } => match (left.max_quantity(), right.max_quantity()) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
        }
    }

    pub fn max_constant(&self) -> Option<usize> {
        match self {
            Expr::Constant(j) => Some(*j),
            Expr::Quantity(_) => None,
            Expr::Binary { left, right, .. } => match (left.max_constant(), right.max_constant()) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
        }
    }

    /// Visits every node in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        if let Expr::Binary { left, right, .. } = self {
            left.walk(f);
            right.walk(f);
        }
    }

    pub fn to_prefix(&self) -> Vec<Token> {
        let mut out = Vec::new();
        self.push_prefix(&mut out);
        out
    }

    fn push_prefix(&self, out: &mut Vec<Token>) {
        match self {
            Expr::Quantity(i) => out.push(Token::Quantity(*i)),
            Expr::Constant(j) => out.push(Token::Constant(*j)),
            Expr::Binary { op, left, right } => {
                out.push(Token::Op(*op));
                left.push_prefix(out);
                right.push_prefix(out);
            }
        }
    }

    pub fn from_prefix(tokens: &[Token]) -> Result<Expr, PrefixError> {
        let mut pos = 0;
        let e = Self::read_prefix(tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(PrefixError::Trailing { extra: tokens.len() - pos });
        }
        Ok(e)
    }

    fn read_prefix(tokens: &[Token], pos: &mut usize) -> Result<Expr, PrefixError> {
        let tok = *tokens.get(*pos).ok_or(PrefixError::Truncated { at: *pos })?;
        *pos += 1;
        Ok(match tok {
            Token::Quantity(i) => Expr::Quantity(i),
            Token::Constant(j) => Expr::Constant(j),
            Token::Op(op) => {
                let left = Self::read_prefix(tokens, pos)?;
                let right = Self::read_prefix(tokens, pos)?;
                Expr::binary(op, left, right)
            }
        })
    }

    /// Structural identity key. Commutative variants get distinct keys.
    pub fn canonical_key(&self) -> String {
        prefix_text(&self.to_prefix())
    }

    /// Infix rendering with the minimal parentheses that preserve structure.
    pub fn to_infix(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        self.write_infix(vocab, &mut s);
        s
    }

    fn write_infix(&self, vocab: &Vocabulary, out: &mut String) {
        match self {
            Expr::Quantity(i) => out.push_str(&format!("N{}", i + 1)),
            Expr::Constant(j) => out.push_str(&vocab.constant_text(*j)),
            Expr::Binary { op, left, right } => {
                let wrap_left = match left.as_ref() {
                    Expr::Binary { op: lop, .. } => {
                        lop.precedence() < op.precedence()
                            || (lop.precedence() == op.precedence() && op.right_assoc())
                    }
                    _ => false,
                };
                let wrap_right = match right.as_ref() {
                    Expr::Binary { op: rop, .. } => {
                        rop.precedence() < op.precedence()
                            || (rop.precedence() == op.precedence() && !op.right_assoc())
                    }
                    _ => false,
                };
                write_maybe_wrapped(left, vocab, wrap_left, out);
                out.push(op.symbol());
                write_maybe_wrapped(right, vocab, wrap_right, out);
            }
        }
    }

    /// Rendering with quantities replaced by their bound values, e.g.
    /// `25+20-(40-10)`.
    pub fn to_infix_with_values(&self, vocab: &Vocabulary, quantities: &[f64]) -> String {
        let text = self.to_infix(vocab);
        let re = quantity_token_regex();
        re.replace_all(&text, |caps: &regex::Captures<'_>| {
            let i: usize = caps[1].parse().unwrap_or(0);
            quantities
                .get(i.wrapping_sub(1))
                .map(|&v| format_number(v))
                .unwrap_or_else(|| caps[0].to_string())
        })
        .into_owned()
    }
}

fn quantity_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"N(\d+)").expect("valid regex"))
}

fn write_maybe_wrapped(e: &Expr, vocab: &Vocabulary, wrap: bool, out: &mut String) {
    if wrap {
        out.push('(');
        e.write_infix(vocab, out);
        out.push(')');
    } else {
        e.write_infix(vocab, out);
    }
}

/// A single pre-order token. Textual forms are `+ - * / ^`, `N<i>` and
/// `C<j>`, both one-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Op(Op),
    Quantity(usize),
    Constant(usize),
}

impl Token {
    pub fn is_op(self) -> bool {
        matches!(self, Token::Op(_))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Op(op) => write!(f, "{op}"),
            Token::Quantity(i) => write!(f, "N{}", i + 1),
            Token::Constant(j) => write!(f, "C{}", j + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid prefix token `{0}`")]
pub struct TokenParseError(pub String);

impl FromStr for Token {
    type Err = TokenParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || TokenParseError(s.to_string());
        let mut chars = s.chars();
        match chars.next() {
            Some(c) if s.len() == 1 && Op::from_symbol(c).is_some() => {
                Ok(Token::Op(Op::from_symbol(c).expect("checked")))
            }
            Some(k @ ('N' | 'C')) => {
                let n: usize = chars.as_str().parse().map_err(|_| err())?;
                if n == 0 {
                    return Err(err());
                }
                Ok(if k == 'N' { Token::Quantity(n - 1) } else { Token::Constant(n - 1) })
            }
            _ => Err(err()),
        }
    }
}

pub fn prefix_text(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn parse_prefix_text(text: &str) -> Result<Vec<Token>, TokenParseError> {
    text.split_whitespace().map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PrefixError {
    #[error("prefix sequence truncated at token {at}")]
    Truncated { at: usize },
    #[error("prefix sequence has {extra} trailing token(s)")]
    Trailing { extra: usize },
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown token `{token}` at {pos}")]
    UnknownToken { pos: usize, token: String },
    #[error("quantity N{index} out of range (problem has {num_count})")]
    QuantityOutOfRange { index: usize, num_count: usize },
    #[error("constant C{index} out of range ({count} constants)")]
    ConstantOutOfRange { index: usize, count: usize },
    #[error("literal {value} at {pos} matches no quantity or constant")]
    UnmappedLiteral { pos: usize, value: f64 },
}

/// How numeric literals in an infix equation are resolved.
#[derive(Clone, Copy, Debug)]
pub enum Literals<'a> {
    /// Only literals equal to a vocabulary constant are accepted.
    ConstantsOnly,
    /// Literals resolve to the first quantity with the same value, then to a
    /// constant.
    Bind(&'a [f64]),
    /// Every literal that is not a constant becomes a fresh quantity slot
    /// (equal values share a slot).
    Collect,
}

pub fn parse_infix(text: &str, vocab: &Vocabulary) -> Result<Expr, ParseError> {
    Parser::new(text, vocab, Literals::ConstantsOnly)?.run().map(|(e, _)| e)
}

/// Parses a dataset equation whose operands are written as numerals.
pub fn parse_infix_bound(
    text: &str,
    vocab: &Vocabulary,
    quantities: &[f64],
) -> Result<Expr, ParseError> {
    let vocab = Vocabulary { constants: vocab.constants.clone(), num_count: quantities.len() };
    Parser::new(text, &vocab, Literals::Bind(quantities))?.run().map(|(e, _)| e)
}

/// Parses with literals collected as quantities; returns the bound values.
pub fn parse_infix_literals(text: &str, vocab: &Vocabulary) -> Result<(Expr, Vec<f64>), ParseError> {
    let vocab = Vocabulary { constants: vocab.constants.clone(), num_count: usize::MAX };
    Parser::new(text, &vocab, Literals::Collect)?.run()
}

#[derive(Clone, Debug, PartialEq)]
enum Lexeme {
    Number(f64),
    Quantity(usize),
    Constant(usize),
    Pi,
    Op(Op),
    Open,
    Close,
}

fn lex(text: &str) -> Result<Vec<(usize, Lexeme)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if let Some(op) = Op::from_symbol(c) {
            out.push((start, Lexeme::Op(op)));
            i += 1;
        } else if c == '(' {
            out.push((start, Lexeme::Open));
            i += 1;
        } else if c == ')' {
            out.push((start, Lexeme::Close));
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let lit: String = chars[start..i].iter().collect();
            let mut value: f64 = lit
                .parse()
                .map_err(|_| ParseError::UnknownToken { pos: start, token: lit.clone() })?;
            if i < chars.len() && chars[i] == '%' {
                value /= 100.0;
                i += 1;
            }
            out.push((start, Lexeme::Number(value)));
        } else if c == 'π' {
            out.push((start, Lexeme::Pi));
            i += 1;
        } else if c.is_alphabetic() {
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let lexeme = match word.as_str() {
                "pi" | "PI" | "Pi" => Lexeme::Pi,
                _ => {
                    let (head, digits) = word.split_at(1);
                    let n = digits.parse::<usize>().ok().filter(|&n| n >= 1);
                    match (head, n) {
                        ("N", Some(n)) => Lexeme::Quantity(n - 1),
                        ("C", Some(n)) => Lexeme::Constant(n - 1),
                        _ => return Err(ParseError::UnknownToken { pos: start, token: word }),
                    }
                }
            };
            out.push((start, lexeme));
        } else {
            return Err(ParseError::UnknownToken { pos: start, token: c.to_string() });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    lexemes: Vec<(usize, Lexeme)>,
    pos: usize,
    end: usize,
    vocab: &'a Vocabulary,
    literals: Literals<'a>,
    collected: Vec<f64>,
}

impl<'a> Parser<'a> {
    fn new(text: &str, vocab: &'a Vocabulary, literals: Literals<'a>) -> Result<Parser<'a>, ParseError> {
        Ok(Parser {
            lexemes: lex(text)?,
            pos: 0,
            end: text.chars().count(),
            vocab,
            literals,
            collected: Vec::new(),
        })
    }

    fn run(mut self) -> Result<(Expr, Vec<f64>), ParseError> {
        let e = self.sum()?;
        if let Some((pos, lx)) = self.lexemes.get(self.pos) {
            let message = match lx {
                Lexeme::Close => "unbalanced `)`".to_string(),
                _ => "expected operator or end of input".to_string(),
            };
            return Err(ParseError::Syntax { pos: *pos, message });
        }
        Ok((e, self.collected))
    }

    fn peek(&self) -> Option<&Lexeme> {
        self.lexemes.get(self.pos).map(|(_, l)| l)
    }

    fn here(&self) -> usize {
        self.lexemes.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.product()?;
        while let Some(Lexeme::Op(op @ (Op::Add | Op::Sub))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let right = self.product()?;
            left = Expr::binary(op, left, right);
        }
        Ok(left)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.power()?;
        while let Some(Lexeme::Op(op @ (Op::Mul | Op::Div))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let right = self.power()?;
            left = Expr::binary(op, left, right);
        }
        Ok(left)
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Lexeme::Op(Op::Pow)) = self.peek() {
            self.pos += 1;
            let exponent = self.power()?;
            return Ok(Expr::binary(Op::Pow, base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.here();
        let Some((_, lexeme)) = self.lexemes.get(self.pos).cloned() else {
            return Err(ParseError::Syntax { pos, message: "unexpected end of input".into() });
        };
        self.pos += 1;
        match lexeme {
            Lexeme::Open => {
                let inner = self.sum()?;
                match self.peek() {
                    Some(Lexeme::Close) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(ParseError::Syntax { pos: self.here(), message: "expected `)`".into() }),
                }
            }
            Lexeme::Quantity(i) => {
                if i >= self.vocab.num_count {
                    return Err(ParseError::QuantityOutOfRange {
                        index: i + 1,
                        num_count: self.vocab.num_count,
                    });
                }
                Ok(Expr::Quantity(i))
            }
            Lexeme::Constant(j) => {
                if j >= self.vocab.constants.len() {
                    return Err(ParseError::ConstantOutOfRange {
                        index: j + 1,
                        count: self.vocab.constants.len(),
                    });
                }
                Ok(Expr::Constant(j))
            }
            Lexeme::Pi => self
                .vocab
                .pi_index()
                .map(Expr::Constant)
                .ok_or(ParseError::UnknownToken { pos, token: "pi".into() }),
            Lexeme::Number(value) => self.literal(pos, value),
            Lexeme::Op(op) => Err(ParseError::Syntax {
                pos,
                message: format!("expected operand, found `{op}`"),
            }),
            Lexeme::Close => Err(ParseError::Syntax { pos, message: "expected operand, found `)`".into() }),
        }
    }

    fn literal(&mut self, pos: usize, value: f64) -> Result<Expr, ParseError> {
        match self.literals {
            Literals::ConstantsOnly => self
                .vocab
                .constant_index(value)
                .map(Expr::Constant)
                .ok_or(ParseError::UnmappedLiteral { pos, value }),
            Literals::Bind(quantities) => {
                if let Some(i) = quantities.iter().position(|&q| same_number(q, value)) {
                    return Ok(Expr::Quantity(i));
                }
                self.vocab
                    .constant_index(value)
                    .map(Expr::Constant)
                    .ok_or(ParseError::UnmappedLiteral { pos, value })
            }
            Literals::Collect => {
                if let Some(j) = self.vocab.constant_index(value) {
                    return Ok(Expr::Constant(j));
                }
                if let Some(i) = self.collected.iter().position(|&q| same_number(q, value)) {
                    return Ok(Expr::Quantity(i));
                }
                self.collected.push(value);
                Ok(Expr::Quantity(self.collected.len() - 1))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappedNumber {
    pub text: String,
    pub value: f64,
    /// Character span `[start, end)` in the raw text.
    pub span: (usize, usize),
}

/// Numerals of a problem text in reading order; entry `i` is `N{i+1}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NumberMapping {
    pub entries: Vec<MappedNumber>,
}

impl NumberMapping {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn text_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?P<num>\d+(?:\.\d+)?%?)|(?P<word>[\p{L}\p{M}_']+)|(?P<other>\S)")
            .expect("valid regex")
    })
}

/// Replaces every maximal numeral with `N1..Nk` and splits the rest into
/// lowercase words and single punctuation characters.
pub fn number_map(raw_text: &str) -> (Vec<String>, NumberMapping) {
    let mut tokens = Vec::new();
    let mut mapping = NumberMapping::default();
    for caps in text_token_regex().captures_iter(raw_text) {
        if let Some(m) = caps.name("num") {
            let text = m.as_str();
            let (digits, scale) = match text.strip_suffix('%') {
                Some(d) => (d, 0.01),
                None => (text, 1.0),
            };
            let value = digits.parse::<f64>().map(|v| v * scale).unwrap_or(f64::NAN);
            let start = raw_text[..m.start()].chars().count();
            let span = (start, start + text.chars().count());
            mapping.entries.push(MappedNumber { text: text.to_string(), value, span });
            tokens.push(format!("N{}", mapping.entries.len()));
        } else if let Some(m) = caps.name("word") {
            tokens.push(m.as_str().to_lowercase());
        } else if let Some(m) = caps.name("other") {
            tokens.push(m.as_str().to_string());
        }
    }
    (tokens, mapping)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(i: usize) -> Expr {
        Expr::Quantity(i)
    }

    #[test]
    fn table_one_equation_with_literals() {
        let vocab = Vocabulary::default();
        let (e, values) = parse_infix_literals("25+20-(40-10)", &vocab).unwrap();
        assert_eq!(values, vec![25.0, 20.0, 40.0, 10.0]);
        assert_eq!(e.evaluate(&values, &vocab.constants).unwrap(), 15.0);
        let bound = parse_infix_bound("25+20-(40-10)", &vocab, &[40.0, 25.0, 20.0, 10.0]).unwrap();
        assert_eq!(bound.to_infix(&vocab), "N2+N3-(N1-N4)");
    }

    #[test]
    fn explicit_equation_value() {
        let vocab = Vocabulary::default();
        let (e, values) = parse_infix_literals("840/6/70+630", &vocab).unwrap();
        assert_eq!(e.evaluate(&values, &vocab.constants).unwrap(), 632.0);
    }

    #[test]
    fn single_quantity_and_syntax_errors() {
        let vocab = Vocabulary::new(1);
        assert_eq!(parse_infix("N1", &vocab).unwrap(), q(0));
        let vocab = Vocabulary::new(2);
        assert!(matches!(parse_infix("N1+*N2", &vocab), Err(ParseError::Syntax { pos: 3, .. })));
        assert!(matches!(parse_infix("(N1+N2", &vocab), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_infix("N1+N2)", &vocab), Err(ParseError::Syntax { pos: 5, .. })));
        assert!(matches!(parse_infix("N1+x", &vocab), Err(ParseError::UnknownToken { .. })));
        assert!(matches!(parse_infix("N1%N2", &vocab), Err(ParseError::UnknownToken { .. })));
        assert!(matches!(
            parse_infix("N3", &vocab),
            Err(ParseError::QuantityOutOfRange { index: 3, num_count: 2 })
        ));
        assert!(matches!(parse_infix("N1+7", &vocab), Err(ParseError::UnmappedLiteral { .. })));
        assert!(matches!(parse_infix("", &vocab), Err(ParseError::Syntax { pos: 0, .. })));
    }

    #[test]
    fn precedence_and_associativity() {
        let vocab = Vocabulary::new(3);
        let e = parse_infix("N1-N2-N3", &vocab).unwrap();
        assert_eq!(e, Expr::binary(Op::Sub, Expr::binary(Op::Sub, q(0), q(1)), q(2)));
        let e = parse_infix("N1^N2^N3", &vocab).unwrap();
        assert_eq!(e, Expr::binary(Op::Pow, q(0), Expr::binary(Op::Pow, q(1), q(2))));
        let e = parse_infix("N1+N2*N3^N1", &vocab).unwrap();
        assert_eq!(e.evaluate(&[2.0, 3.0, 2.0], &vocab.constants).unwrap(), 14.0);
        assert_eq!(parse_infix("(N1^N2)^N3", &vocab).unwrap().to_infix(&vocab), "(N1^N2)^N3");
        assert_eq!(parse_infix("N1/(N2*N3)", &vocab).unwrap().to_infix(&vocab), "N1/(N2*N3)");
        assert_eq!(parse_infix("N1+(N2+N3)", &vocab).unwrap().to_infix(&vocab), "N1+(N2+N3)");
        assert_eq!(parse_infix("pi*N1^2", &Vocabulary::with_constants(vec![1.0, PI, 2.0], 1))
            .unwrap()
            .to_infix(&Vocabulary::with_constants(vec![1.0, PI, 2.0], 1)), "pi*N1^2");
    }

    #[test]
    fn evaluation_errors() {
        let vocab = Vocabulary::new(1);
        let e = parse_infix("N1/(N1-N1)", &vocab).unwrap();
        assert_eq!(e.evaluate(&[3.0], &vocab.constants), Err(EvalError::DivisionByZero));
        let e = parse_infix("(N1-N1)^(0-N1)", &Vocabulary::with_constants(vec![0.0], 1)).unwrap();
        assert_eq!(e.evaluate(&[2.0], &[0.0]), Err(EvalError::ZeroToNegativePower));
        let e = parse_infix("N1^N1", &vocab).unwrap();
        assert_eq!(e.evaluate(&[1e10], &vocab.constants), Err(EvalError::NonFinite));
        assert_eq!(q(1).evaluate(&[1.0], &[]), Err(EvalError::UnboundQuantity(2)));
    }

    #[test]
    fn prefix_conversions() {
        let vocab = Vocabulary::new(3);
        let e = parse_infix("N1+N2", &vocab).unwrap();
        assert_eq!(e.to_prefix(), vec![Token::Op(Op::Add), Token::Quantity(0), Token::Quantity(1)]);
        let toks = parse_prefix_text("- + N1 N2 N3").unwrap();
        assert_eq!(Expr::from_prefix(&toks).unwrap(), parse_infix("(N1+N2)-N3", &vocab).unwrap());
        let toks = parse_prefix_text("+ N1").unwrap();
        assert_eq!(Expr::from_prefix(&toks), Err(PrefixError::Truncated { at: 2 }));
        let toks = parse_prefix_text("N1 N2").unwrap();
        assert_eq!(Expr::from_prefix(&toks), Err(PrefixError::Trailing { extra: 1 }));
        assert!(parse_prefix_text("N0").is_err());
        assert_eq!(prefix_text(&parse_prefix_text("* C2 N1").unwrap()), "* C2 N1");
    }

    #[test]
    fn canonical_keys_are_structural() {
        let vocab = Vocabulary::new(3);
        let k = |s: &str| parse_infix(s, &vocab).unwrap().canonical_key();
        assert_ne!(k("N1+N2"), k("N2+N1"));
        let e = parse_infix("N1+N2", &vocab).unwrap();
        assert_eq!(k(&e.to_infix(&vocab)), e.canonical_key());
        assert_ne!(k("(N1+N2)+N3"), k("N1+(N2+N3)"));
        assert_eq!(k("(N1+N2)+N3"), k("N1+N2+N3"));
    }

    #[test]
    fn number_mapping() {
        let text = "There are 40 students taking Chinese and math exams, 25 students passed the \
                    Chinese exam, 20 students passed the math exam, 10 students failed both exams.";
        let (tokens, mapping) = number_map(text);
        assert_eq!(mapping.values(), vec![40.0, 25.0, 20.0, 10.0]);
        assert_eq!(tokens.iter().filter(|t| t.starts_with('N')).count(), 4);
        assert_eq!(tokens[2], "N1");
        let e = &mapping.entries[0];
        assert_eq!(&text.chars().collect::<String>()[e.span.0..e.span.1], "40");

        let (tokens, mapping) = number_map("no numbers here");
        assert_eq!(tokens, vec!["no", "numbers", "here"]);
        assert!(mapping.is_empty());

        let (tokens, mapping) = number_map("3.5 km in 0.5 h, 20% off");
        assert_eq!(mapping.values(), vec![3.5, 0.5, 0.2]);
        assert_eq!(&tokens[..4], &["N1", "km", "in", "N2"]);
        assert!(mapping.entries.windows(2).all(|w| w[0].span.1 <= w[1].span.0));
    }

    #[test]
    fn answer_tolerance_scales() {
        assert!(answer_matches(15.00001, 15.0, ANSWER_EPS));
        assert!(answer_matches(10000.5, 10000.0, ANSWER_EPS));
        assert!(!answer_matches(14.0, 15.0, ANSWER_EPS));
        assert!(!answer_matches(f64::NAN, 15.0, ANSWER_EPS));
    }
}
