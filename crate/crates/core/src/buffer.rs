//! Per-problem solution buffers and their quality weights.
//!
//! A buffer holds every value-correct equation found for a problem so far,
//! deduplicated by structure. Entries are only ever appended during a run
//! (unless an explicit cap is set). Each entry's training weight `a_i` is
//! its normalized model probability `s_i`, averaged with the discriminator
//! score once training passes the stage switch.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Corpus, DataError, Problem, SupervisionMode};
use crate::expr::{answer_matches, parse_prefix_text, prefix_text, Expr};
use crate::wda::WdaOutcome;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error(transparent)]
    Mode(#[from] DataError),
    #[error("weak supervision needs search results to seed the buffers")]
    MissingSearchResults,
    #[error("problem {id}: `{equation}` does not reach the answer")]
    NotASolution { id: String, equation: String },
    #[error("problem {0}: buffer is empty")]
    Empty(String),
    #[error("problem {id}: expected {expected} values, got {got}")]
    Length { id: String, expected: usize, got: usize },
    #[error("problem {id}: non-finite log-probability")]
    NonFinite { id: String },
    #[error("problem {0}: entries have no discriminator score")]
    MissingScore(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

type Result<T> = std::result::Result<T, BufferError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Origin {
    Gold,
    Wda,
    Model { epoch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub expr: Expr,
    pub key: String,
    pub origin: Origin,
    /// Sequence log-probability under the most recent parameters.
    pub log_prob: Option<f64>,
    /// Most recent discriminator score `t`.
    pub score: Option<f64>,
    /// Normalized model probability `s_i`.
    pub s: f64,
    /// Training weight `a_i`.
    pub weight: f64,
}

impl BufferEntry {
    fn new(expr: Expr, origin: Origin) -> BufferEntry {
        let key = expr.canonical_key();
        BufferEntry { expr, key, origin, log_prob: None, score: None, s: 1.0, weight: 1.0 }
    }
}

/// How weights are derived from `s` and `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `a = s` before the stage switch, `(s + t) / 2` from it on.
    TwoStage,
    /// `a = s` throughout.
    ModelOnly,
    /// `a = 1` for every entry.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionBuffer {
    pub problem_id: String,
    entries: Vec<BufferEntry>,
    keys: HashSet<String>,
}

impl SolutionBuffer {
    pub fn new(problem_id: impl Into<String>) -> SolutionBuffer {
        SolutionBuffer { problem_id: problem_id.into(), entries: Vec::new(), keys: HashSet::new() }
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    /// Appends `expr` if it reaches the answer and is new. Returns whether
    /// it was added; a wrong equation is an error.
    pub fn insert(&mut self, expr: Expr, origin: Origin, problem: &Problem, constants: &[f64], eps: f64) -> Result<bool> {
        if !problem.is_solution(&expr, constants, eps) {
            return Err(BufferError::NotASolution {
                id: problem.id.clone(),
                equation: prefix_text(&expr.to_prefix()),
            });
        }
        let entry = BufferEntry::new(expr, origin);
        if !self.keys.insert(entry.key.clone()) {
            return Ok(false);
        }
        self.entries.push(entry);
        Ok(true)
    }

    /// Adds the value-correct, previously unseen beams with origin
    /// `Model(epoch)`. Beams already present refresh their log-probability.
    /// Returns the number appended.
    pub fn update_from_beams(
        &mut self,
        problem: &Problem,
        beams: &[(Expr, f64)],
        epoch: usize,
        constants: &[f64],
        eps: f64,
    ) -> usize {
        let mut added = 0;
        for (expr, log_prob) in beams {
            let key = expr.canonical_key();
            if let Some(e) = self.entries.iter_mut().find(|e| e.key == key) {
                e.log_prob = Some(*log_prob);
                continue;
            }
            if !problem.evaluate(expr, constants).is_some_and(|v| answer_matches(v, problem.answer, eps)) {
                continue;
            }
            let mut entry = BufferEntry::new(expr.clone(), Origin::Model { epoch });
            entry.log_prob = Some(*log_prob);
            self.keys.insert(key);
            self.entries.push(entry);
            added += 1;
        }
        added
    }

    pub fn set_log_probs(&mut self, log_probs: &[f64]) -> Result<()> {
        self.check_len(log_probs.len())?;
        for (e, &lp) in self.entries.iter_mut().zip(log_probs) {
            e.log_prob = Some(lp);
        }
        Ok(())
    }

    pub fn set_scores(&mut self, scores: &[f64]) -> Result<()> {
        self.check_len(scores.len())?;
        for (e, &t) in self.entries.iter_mut().zip(scores) {
            e.score = Some(t);
        }
        Ok(())
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.entries.len() {
            return Err(BufferError::Length { id: self.problem_id.clone(), expected: self.entries.len(), got });
        }
        Ok(())
    }

    /// Recomputes `s` and `a` for every entry from `log_probs` (one per
    /// entry, current parameters) and the stored discriminator scores.
    /// Returns the weights; `fallback` reports whether `s` had to be uniform.
    pub fn compute_weights(
        &mut self,
        log_probs: &[f64],
        epoch: usize,
        stage_switch: usize,
        scheme: WeightScheme,
    ) -> Result<WeightUpdate> {
        if self.entries.is_empty() {
            return Err(BufferError::Empty(self.problem_id.clone()));
        }
        self.set_log_probs(log_probs)?;
        if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(BufferError::NonFinite { id: self.problem_id.clone() });
        }
        let (s, fallback) = normalize_log_probs(log_probs);
        if fallback {
            log::warn!("problem {}: every buffered solution has zero probability; using uniform weights", self.problem_id);
        }
        let uses_t = scheme == WeightScheme::TwoStage && epoch >= stage_switch;
        let scores: Vec<f64> = if uses_t {
            self.entries
                .iter()
                .map(|e| e.score.ok_or_else(|| BufferError::MissingScore(self.problem_id.clone())))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.s = s[i];
            e.weight = match scheme {
                WeightScheme::Uniform => 1.0,
                _ if uses_t => (s[i] + scores[i]) / 2.0,
                _ => s[i],
            };
        }
        Ok(WeightUpdate { weights: self.entries.iter().map(|e| e.weight).collect(), fallback, uses_scores: uses_t })
    }

    /// Drops the lowest-weight model-found entries until at most `cap`
    /// remain. Gold and search entries are never dropped.
    pub fn enforce_cap(&mut self, cap: usize) -> usize {
        let mut removed = 0;
        while self.entries.len() > cap {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| matches!(e.origin, Origin::Model { .. }))
                .min_by(|a, b| a.1.weight.total_cmp(&b.1.weight))
                .map(|(i, _)| i);
            let Some(i) = victim else { break };
            let e = self.entries.remove(i);
            self.keys.remove(&e.key);
            removed += 1;
        }
        removed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate {
    pub weights: Vec<f64>,
    pub fallback: bool,
    pub uses_scores: bool,
}

/// `exp(lp_i) / Σ exp(lp_j)` via a max shift. If every probability is
/// zero the result is uniform and the flag is set.
pub fn normalize_log_probs(log_probs: &[f64]) -> (Vec<f64>, bool) {
    let n = log_probs.len();
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return (vec![1.0 / n as f64; n], true);
    }
    let exps: Vec<f64> = log_probs.iter().map(|&lp| (lp - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / z).collect(), false)
}

/// Seeds one buffer per problem, in corpus order.
pub fn init_buffers(
    corpus: &Corpus,
    mode: SupervisionMode,
    search: Option<&BTreeMap<String, WdaOutcome>>,
) -> Result<Vec<SolutionBuffer>> {
    corpus.check_mode(mode)?;
    if mode == SupervisionMode::Weak && search.is_none() {
        return Err(BufferError::MissingSearchResults);
    }
    let eps = crate::expr::ANSWER_EPS;
    corpus
        .problems
        .iter()
        .map(|p| {
            let mut b = SolutionBuffer::new(p.id.clone());
            let gold = if mode == SupervisionMode::Weak { None } else { p.gold.clone() };
            if let Some(g) = gold {
                b.insert(g, Origin::Gold, p, &corpus.constants, eps)?;
            } else if let Some(found) = search.and_then(|m| m.get(&p.id)).and_then(|o| o.solution.clone()) {
                b.insert(found, Origin::Wda, p, &corpus.constants, eps)?;
            }
            Ok(b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    /// Prefix tokens, space separated.
    pub prefix: String,
    pub origin: Origin,
    pub log_prob: Option<f64>,
    pub score: Option<f64>,
    pub s: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferRecord {
    pub id: String,
    pub entries: Vec<EntryRecord>,
}

impl SolutionBuffer {
    pub fn to_record(&self) -> BufferRecord {
        BufferRecord {
            id: self.problem_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| EntryRecord {
                    prefix: prefix_text(&e.expr.to_prefix()),
                    origin: e.origin,
                    log_prob: e.log_prob,
                    score: e.score,
                    s: e.s,
                    weight: e.weight,
                })
                .collect(),
        }
    }

    pub fn from_record(record: &BufferRecord) -> std::result::Result<SolutionBuffer, String> {
        let mut b = SolutionBuffer::new(record.id.clone());
        for r in &record.entries {
            let tokens = parse_prefix_text(&r.prefix).map_err(|e| e.to_string())?;
            let expr = Expr::from_prefix(&tokens).map_err(|e| e.to_string())?;
            let mut entry = BufferEntry::new(expr, r.origin);
            entry.log_prob = r.log_prob;
            entry.score = r.score;
            entry.s = r.s;
            entry.weight = r.weight;
            if !b.keys.insert(entry.key.clone()) {
                return Err(format!("duplicate entry `{}`", r.prefix));
            }
            b.entries.push(entry);
        }
        Ok(b)
    }
}

pub fn write_jsonl(path: &Path, buffers: &[SolutionBuffer]) -> Result<()> {
    let io = |source| BufferError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for b in buffers {
        let line = serde_json::to_string(&b.to_record()).expect("buffer record serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SolutionBuffer>> {
    let io = |source| BufferError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let format = |message: String| BufferError::Format { line: i + 1, message };
        let record: BufferRecord = serde_json::from_str(&line).map_err(|e| format(e.to_string()))?;
        out.push(SolutionBuffer::from_record(&record).map_err(format)?);
    }
    Ok(out)
}
