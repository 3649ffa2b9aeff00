//! Dataset ingestion, supervision-mode tagging, the synthetic word-problem
//! generator and k-fold splitting.
//!
//! The canonical on-disk format is JSON Lines, one problem per line:
//!
//! ```text
//! {"id": "p1", "text": "...", "answer": 15, "equation": "25+20-(40-10)"}
//! ```
//!
//! `equation` is optional; records without one are answer-only (weak).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{
    self, answer_matches, format_number, number_map, parse_infix_bound, parse_infix_literals, Expr,
    NumberMapping, ParseError, Vocabulary, ANSWER_EPS,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed JSON: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("record {id}: answer `{answer}` is not a number")]
    BadAnswer { id: String, answer: String },
    #[error("record {id}: equation `{equation}` does not parse: {source}")]
    Equation { id: String, equation: String, source: ParseError },
    #[error("record {id}: equation evaluates to {value} but answer is {answer}")]
    AnswerMismatch { id: String, value: f64, answer: f64 },
    #[error("record {id}: equation cannot be evaluated: {source}")]
    Eval { id: String, source: expr::EvalError },
    #[error("record {id}: text is empty")]
    EmptyText { id: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("requested an empty corpus")]
    EmptyRequest,
    #[error("corpus of {size} problems cannot be split into {k} folds")]
    TooSmall { size: usize, k: usize },
    #[error("corpus is {actual} but {expected} was requested")]
    ModeMismatch { expected: SupervisionMode, actual: SupervisionMode },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionMode {
    Full,
    SemiWeak,
    Weak,
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupervisionMode::Full => "full",
            SupervisionMode::SemiWeak => "semi-weak",
            SupervisionMode::Weak => "weak",
        })
    }
}

impl FromStr for SupervisionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(SupervisionMode::Full),
            "semi-weak" | "semiweak" | "semi" => Ok(SupervisionMode::SemiWeak),
            "weak" => Ok(SupervisionMode::Weak),
            other => Err(format!("unknown supervision mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub id: String,
    pub raw_text: String,
    /// Mapped text tokens with numerals replaced by `N1..Nk`.
    pub tokens: Vec<String>,
    pub mapping: NumberMapping,
    pub quantities: Vec<f64>,
    pub answer: f64,
    pub gold: Option<Expr>,
    /// The gold equation appears verbatim in the text (no solution diversity).
    pub trivial: bool,
}

impl Problem {
    pub fn vocab(&self, constants: &[f64]) -> Vocabulary {
        Vocabulary::with_constants(constants.to_vec(), self.quantities.len())
    }

    pub fn evaluate(&self, e: &Expr, constants: &[f64]) -> Option<f64> {
        e.evaluate(&self.quantities, constants).ok()
    }

    /// Whether `e` reaches this problem's answer.
    pub fn is_solution(&self, e: &Expr, constants: &[f64], eps: f64) -> bool {
        self.evaluate(e, constants).is_some_and(|v| answer_matches(v, self.answer, eps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub problems: Vec<Problem>,
    pub mode: SupervisionMode,
    pub constants: Vec<f64>,
}

impl Corpus {
    /// Builds a corpus, inferring the supervision mode from gold coverage.
    pub fn new(problems: Vec<Problem>, constants: Vec<f64>) -> Corpus {
        let with_gold = problems.iter().filter(|p| p.gold.is_some()).count();
        let mode = if with_gold == problems.len() {
            SupervisionMode::Full
        } else if with_gold == 0 {
            SupervisionMode::Weak
        } else {
            SupervisionMode::SemiWeak
        };
        Corpus { problems, mode, constants }
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    /// Drops gold equations so the corpus trains as answer-only.
    pub fn into_weak(mut self) -> Corpus {
        for p in &mut self.problems {
            p.gold = None;
        }
        self.mode = SupervisionMode::Weak;
        self
    }

    /// Keeps gold only on the problems selected by `keep_gold`.
    pub fn into_semi_weak(mut self, keep_gold: impl Fn(usize, &Problem) -> bool) -> Corpus {
        for (i, p) in self.problems.iter_mut().enumerate() {
            if !keep_gold(i, p) {
                p.gold = None;
            }
        }
        let problems = std::mem::take(&mut self.problems);
        Corpus::new(problems, self.constants)
    }

    pub fn without_trivial(self) -> Corpus {
        let problems = self.problems.into_iter().filter(|p| !p.trivial).collect();
        Corpus::new(problems, self.constants)
    }

    /// Checks that the corpus can be trained in `mode`. Full needs gold on
    /// every problem; weak training ignores gold, so any corpus qualifies.
    pub fn check_mode(&self, mode: SupervisionMode) -> Result<(), DataError> {
        let ok = match mode {
            SupervisionMode::Full => self.mode == SupervisionMode::Full,
            SupervisionMode::SemiWeak | SupervisionMode::Weak => true,
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::ModeMismatch { expected: mode, actual: self.mode })
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let problems = indices.iter().map(|&i| self.problems[i].clone()).collect();
        Corpus::new(problems, self.constants.clone())
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            total: self.problems.len(),
            with_equation: self.problems.iter().filter(|p| p.gold.is_some()).count(),
            answer_only: self.problems.iter().filter(|p| p.gold.is_none()).count(),
            trivial: self.problems.iter().filter(|p| p.trivial).count(),
            mode: self.mode,
            rejected: 0,
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.problems
            .iter()
            .map(|p| Record {
                id: p.id.clone(),
                text: p.raw_text.clone(),
                answer: serde_json::Value::from(p.answer),
                equation: p.gold.as_ref().map(|g| g.to_infix(&p.vocab(&self.constants))),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io { path: path.display().to_string(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for r in self.to_records() {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub with_equation: usize,
    pub answer_only: usize,
    pub trivial: usize,
    pub mode: SupervisionMode,
    pub rejected: usize,
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub answer: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

fn parse_answer(id: &str, answer: &serde_json::Value) -> Result<f64, DataError> {
    let bad = || DataError::BadAnswer { id: id.to_string(), answer: answer.to_string() };
    match answer {
        serde_json::Value::Number(n) => n.as_f64().ok_or_else(bad),
        serde_json::Value::String(s) => {
            let (e, values) = parse_infix_literals(s.trim(), &Vocabulary::default()).map_err(|_| bad())?;
            e.evaluate(&values, &Vocabulary::default_constants()).map_err(|_| bad())
        }
        _ => Err(bad()),
    }
}

/// `x=RHS` and `RHS=x` both reduce to `RHS`.
pub fn strip_unknown(equation: &str) -> &str {
    let eq = equation.trim();
    match eq.split_once('=') {
        Some((lhs, rhs)) if lhs.trim() == "x" || lhs.trim() == "X" => rhs.trim(),
        Some((lhs, rhs)) if rhs.trim() == "x" || rhs.trim() == "X" => lhs.trim(),
        _ => eq,
    }
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Turns a record into a problem, verifying any gold equation against the
/// answer.
pub fn parse_record(record: &Record, constants: &[f64]) -> Result<Problem, DataError> {
    let id = record.id.clone();
    let (tokens, mapping) = number_map(&record.text);
    if tokens.is_empty() {
        return Err(DataError::EmptyText { id });
    }
    let answer = parse_answer(&id, &record.answer)?;
    let quantities = mapping.values();
    let vocab = Vocabulary::with_constants(constants.to_vec(), quantities.len());
    let mut trivial = false;
    let gold = match record.equation.as_deref().map(str::trim).filter(|e| !e.is_empty()) {
        None => None,
        Some(equation) => {
            let rhs = strip_unknown(equation);
            let gold = parse_infix_bound(rhs, &vocab, &quantities).map_err(|source| {
                DataError::Equation { id: id.clone(), equation: equation.to_string(), source }
            })?;
            let value = gold
                .evaluate(&quantities, constants)
                .map_err(|source| DataError::Eval { id: id.clone(), source })?;
            if !answer_matches(value, answer, ANSWER_EPS) {
                return Err(DataError::AnswerMismatch { id, value, answer });
            }
            trivial = squash(&record.text).contains(&squash(rhs));
            Some(gold)
        }
    };
    Ok(Problem { id, raw_text: record.text.clone(), tokens, mapping, quantities, answer, gold, trivial })
}

/// Reads a JSONL corpus. Malformed JSON aborts; records that fail
/// verification are listed in the report and skipped.
pub fn load(path: &Path, constants: &[f64]) -> Result<(Corpus, LoadReport), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    load_reader(BufReader::new(file), constants)
}

pub fn load_reader(reader: impl BufRead, constants: &[f64]) -> Result<(Corpus, LoadReport), DataError> {
    let mut problems = Vec::new();
    let mut report = LoadReport::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: "<reader>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|source| DataError::Json { line: n + 1, source })?;
        match parse_record(&record, constants) {
            Ok(p) => problems.push(p),
            Err(e) => report.rejected.push(Rejection { line: n + 1, id: record.id.clone(), reason: e.to_string() }),
        }
    }
    report.accepted = problems.len();
    Ok((Corpus::new(problems, constants.to_vec()), report))
}

/// Converts a Math23k-style record (`original_text`/`segmented_text`,
/// `equation`, `ans`) into the canonical layout.
pub fn convert_legacy(value: &serde_json::Value) -> Option<Record> {
    let id = match value.get("id")? {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let text = value
        .get("original_text")
        .or_else(|| value.get("segmented_text"))
        .or_else(|| value.get("text"))?
        .as_str()?
        .to_string();
    let answer = value.get("ans").or_else(|| value.get("answer"))?.clone();
    let equation = value.get("equation").and_then(|e| e.as_str()).map(|e| strip_unknown(e).to_string());
    Some(Record { id, text, answer, equation })
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// A parametric word-problem schema. `build` returns the problem text and
/// its gold equation over the text's numerals (`N1..Nk` in reading order).
pub struct Template {
    pub id: &'static str,
    build: fn(&mut seed::Rng) -> Option<(String, &'static str)>,
}

const NAMES: &[&str] = &["Lily", "Tom", "Anna", "Ben", "Mia", "Sam", "Lucy", "Jack", "Emma", "Leo"];
const ITEMS: &[&str] = &["apples", "pencils", "stickers", "marbles", "cards", "books", "shells", "stamps"];

fn pick<'a>(rng: &mut seed::Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

fn tpl_sum_two(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let (a, b) = (rng.gen_range(2..60), rng.gen_range(2..60));
    let (x, y, item) = (pick(rng, NAMES), pick(rng, NAMES), pick(rng, ITEMS));
    Some(match rng.gen_range(0..2) {
        0 => (format!("{x} has {a} {item} and {y} has {b} {item}. How many {item} do they have altogether?"), "N1+N2"),
        _ => (format!("There were {a} {item} in a box. {x} put in {b} more {item}. How many {item} are in the box now?"), "N1+N2"),
    })
}

fn tpl_difference(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let a = rng.gen_range(20..100);
    let b = rng.gen_range(1..a);
    let (x, item) = (pick(rng, NAMES), pick(rng, ITEMS));
    Some(match rng.gen_range(0..2) {
        0 => (format!("{x} had {a} {item} and gave away {b} of them. How many {item} are left?"), "N1-N2"),
        _ => (format!("{x} gave away {b} {item} from a pile of {a} {item}. How many {item} remain in the pile?"), "N2-N1"),
    })
}

fn tpl_rate_time(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let (v, t) = (rng.gen_range(3..90), rng.gen_range(2..12));
    let x = pick(rng, NAMES);
    Some(match rng.gen_range(0..2) {
        0 => (format!("{x} drives at {v} km per hour for {t} hours. How far does {x} travel?"), "N1*N2"),
        _ => (format!("A train runs for {t} hours at a speed of {v} km per hour. What distance does it cover?"), "N1*N2"),
    })
}

fn tpl_equal_share(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let (k, each) = (rng.gen_range(2..12), rng.gen_range(2..20));
    let total = k * each;
    let item = pick(rng, ITEMS);
    Some(match rng.gen_range(0..2) {
        0 => (format!("{total} {item} are shared equally among {k} children. How many {item} does each child get?"), "N1/N2"),
        _ => (format!("{k} friends split {total} {item} evenly. How many {item} does each friend receive?"), "N2/N1"),
    })
}

fn tpl_inclusion_exclusion(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let total = rng.gen_range(20..80);
    let neither = rng.gen_range(1..total / 3);
    let both = rng.gen_range(1..(total - neither) / 2);
    let only_a = rng.gen_range(0..=(total - neither - both) / 2);
    let only_b = total - neither - both - only_a;
    let (a, b) = (only_a + both, only_b + both);
    Some((
        format!(
            "There are {total} students taking chinese and math exams, {a} students passed the chinese exam, \
             {b} students passed the math exam, {neither} students failed both exams. How many students pass both exams?"
        ),
        "N2+N3-(N1-N4)",
    ))
}

fn tpl_two_purchases(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let (n1, p1, n2, p2) = (rng.gen_range(2..10), rng.gen_range(2..15), rng.gen_range(2..10), rng.gen_range(2..15));
    let x = pick(rng, NAMES);
    Some((
        format!("{x} buys {n1} notebooks at {p1} dollars each and {n2} pens at {p2} dollars each. How much does {x} spend?"),
        "N1*N2+N3*N4",
    ))
}

fn tpl_change_left(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let (n, price) = (rng.gen_range(2..10), rng.gen_range(2..12));
    let money = n * price + rng.gen_range(1..50);
    let x = pick(rng, NAMES);
    Some((
        format!("{x} has {money} dollars and buys {n} toys that cost {price} dollars each. How much money is left?"),
        "N1-N2*N3",
    ))
}

fn tpl_circle_area(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let r = rng.gen_range(1..20);
    Some(match rng.gen_range(0..2) {
        0 => (format!("A circular garden has a radius of {r} meters. What is its area?"), "pi*N1*N1"),
        _ => (format!("The radius of a round table is {r} dm. Find the area of the table top."), "pi*N1*N1"),
    })
}

fn tpl_fence_posts(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let (gap, k) = (rng.gen_range(2..10), rng.gen_range(3..20));
    let length = gap * k;
    Some((
        format!("Trees are planted along a {length} meter road, one every {gap} meters, with trees at both ends. How many trees are planted?"),
        "N1/N2+1",
    ))
}

fn tpl_discount(rng: &mut seed::Rng) -> Option<(String, &'static str)> {
    let price = rng.gen_range(2..40) * 10;
    let off = [10, 20, 25, 30, 40, 50][rng.gen_range(0..6)];
    let item = ["jacket", "bike", "lamp", "chair", "kite"][rng.gen_range(0..5)];
    Some((
        format!("A {item} costs {price} dollars. It is sold at {off}% off. What is the sale price?"),
        "N1*(1-N2)",
    ))
}

pub const TEMPLATES: &[Template] = &[
    Template { id: "sum_two", build: tpl_sum_two },
    Template { id: "difference", build: tpl_difference },
    Template { id: "rate_time", build: tpl_rate_time },
    Template { id: "equal_share", build: tpl_equal_share },
    Template { id: "inclusion_exclusion", build: tpl_inclusion_exclusion },
    Template { id: "two_purchases", build: tpl_two_purchases },
    Template { id: "change_left", build: tpl_change_left },
    Template { id: "circle_area", build: tpl_circle_area },
    Template { id: "fence_posts", build: tpl_fence_posts },
    Template { id: "discount", build: tpl_discount },
];

pub fn template_ids() -> Vec<&'static str> {
    TEMPLATES.iter().map(|t| t.id).collect()
}

/// Instantiates a template with explicit text, for fixtures.
pub fn problem_from_text(id: &str, text: &str, equation: &str, constants: &[f64]) -> Result<Problem, DataError> {
    let (_, mapping) = number_map(text);
    let vocab = Vocabulary::with_constants(constants.to_vec(), mapping.len());
    let gold = expr::parse_infix(equation, &vocab)
        .map_err(|source| DataError::Equation { id: id.into(), equation: equation.into(), source })?;
    let answer = gold
        .evaluate(&mapping.values(), constants)
        .map_err(|source| DataError::Eval { id: id.into(), source })?;
    let record = Record {
        id: id.to_string(),
        text: text.to_string(),
        answer: serde_json::Value::from(answer),
        equation: Some(gold.to_infix(&vocab)),
    };
    parse_record(&record, constants)
}

/// Deterministic synthetic corpus; problem `i` uses template
/// `templates[i % templates.len()]`. An empty id list selects all templates.
pub fn synth_corpus(template_ids: &[&str], n: usize, seed: u64) -> Result<Corpus, DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    let chosen: Vec<&Template> = if template_ids.is_empty() {
        TEMPLATES.iter().collect()
    } else {
        template_ids
            .iter()
            .map(|id| {
                TEMPLATES.iter().find(|t| t.id == *id).ok_or_else(|| DataError::UnknownTemplate(id.to_string()))
            })
            .collect::<Result<_, _>>()?
    };
    let constants = Vocabulary::default_constants();
    let mut problems = Vec::with_capacity(n);
    for i in 0..n {
        let template = chosen[i % chosen.len()];
        let mut rng = seed::rng(seed::derive_index(seed, "synth", i as u64));
        let (text, equation) = loop {
            if let Some(inst) = (template.build)(&mut rng) {
                break inst;
            }
        };
        let id = format!("syn-{:05}-{}", i, template.id);
        problems.push(problem_from_text(&id, &text, equation, &constants)?);
    }
    Ok(Corpus::new(problems, constants))
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then round-robin fold assignment.
pub fn kfold(size: usize, k: usize, seed: u64) -> Result<Vec<Split>, DataError> {
    if k < 2 || size < k {
        return Err(DataError::TooSmall { size, k });
    }
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "kfold")));
    let mut folds: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &idx) in order.iter().enumerate() {
        folds.entry(pos % k).or_default().push(idx);
    }
    Ok((0..k)
        .map(|f| {
            let mut test = folds[&f].clone();
            test.sort_unstable();
            let train = (0..size).filter(|i| test.binary_search(i).is_err()).collect();
            Split { train, test }
        })
        .collect())
}

pub fn kfold_corpus(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<(Corpus, Corpus)>, DataError> {
    Ok(kfold(corpus.len(), k, seed)?
        .into_iter()
        .map(|s| (corpus.subset(&s.train), corpus.subset(&s.test)))
        .collect())
}

/// Renders a quantity-bound equation with its numerals, e.g. `25+20-(40-10)`.
pub fn equation_with_values(p: &Problem, e: &Expr, constants: &[f64]) -> String {
    e.to_infix_with_values(&p.vocab(constants), &p.quantities)
}

pub fn format_answer(v: f64) -> String {
    format_number(v)
}
