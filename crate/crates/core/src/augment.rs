//! Positive and negative solution samples for discriminator training.
//!
//! Positives come from swap rules applied to a known-good solution. Rules
//! act on *chains*: the left spine of `+`/`-` nodes (or of `*`/`/` nodes)
//! read as a flat sequence of signed terms, which is how the equation reads
//! in infix. Each term is a complete sub-equation, so a swap never splits an
//! operand away from a `*` or `/` it is attached to.
//!
//! - `A+B -> B+A`: the first two terms swap when the second is added.
//! - `A±B-C <-> A-C±B`: any two adjacent non-first terms swap, each keeping
//!   its own sign.
//! - `A*B -> B*A` and `A*B/C <-> A/C*B`, `A/B/C -> A/C/B`: the same two
//!   moves on multiplicative chains.
//!
//! Rules apply at every nesting level. Negatives flip prefix tokens to
//! same-arity alternatives with probability `lambda` and are resampled
//! whenever they still reach the answer.

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Problem;
use crate::expr::{answer_matches, Expr, Op, Token};
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Per-token disturbance probability.
    pub lambda: f64,
    pub max_positive_variants: usize,
    pub negatives_per_positive: usize,
    /// Sampling attempts allowed per requested negative.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { lambda: 0.3, max_positive_variants: 32, negatives_per_positive: 2, max_retries: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum AugmentError {
    #[error("disturbance probability {0} is outside [0, 1]")]
    BadLambda(f64),
    #[error("`{0}` must be at least 1")]
    ZeroCount(&'static str),
    #[error("no negative found for problem {id} after {attempts} attempts")]
    ExhaustedRetries { id: String, attempts: usize },
    #[error("problem {0} has no positive solution")]
    NoPositives(String),
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(AugmentError::BadLambda(self.lambda));
        }
        if self.max_positive_variants == 0 {
            return Err(AugmentError::ZeroCount("max_positive_variants"));
        }
        if self.negatives_per_positive == 0 {
            return Err(AugmentError::ZeroCount("negatives_per_positive"));
        }
        if self.max_retries == 0 {
            return Err(AugmentError::ZeroCount("max_retries"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastBatch {
    pub problem_id: String,
    pub positives: Vec<Expr>,
    pub negatives: Vec<Expr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastRecord {
    pub id: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

impl ContrastBatch {
    pub fn to_record(&self, problem: &Problem, constants: &[f64]) -> ContrastRecord {
        let vocab = problem.vocab(constants);
        ContrastRecord {
            id: self.problem_id.clone(),
            positives: self.positives.iter().map(|e| e.to_infix(&vocab)).collect(),
            negatives: self.negatives.iter().map(|e| e.to_infix(&vocab)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ChainKind {
    Additive,
    Multiplicative,
}

impl ChainKind {
    fn of(op: Op) -> Option<ChainKind> {
        match op {
            Op::Add | Op::Sub => Some(ChainKind::Additive),
            Op::Mul | Op::Div => Some(ChainKind::Multiplicative),
            Op::Pow => None,
        }
    }

    /// The operator that joins a term with a positive sign.
    fn positive(self) -> Op {
        match self {
            ChainKind::Additive => Op::Add,
            ChainKind::Multiplicative => Op::Mul,
        }
    }
}

/// Flattens the left spine of a chain into `(joining op, term)` pairs; the
/// first term's op is the chain's positive op.
fn flatten(e: &Expr, kind: ChainKind, out: &mut Vec<(Op, Expr)>) {
    match e {
        Expr::Binary { op, left, right } if ChainKind::of(*op) == Some(kind) => {
            flatten(left, kind, out);
            out.push((*op, (**right).clone()));
        }
        _ => out.push((kind.positive(), e.clone())),
    }
}

fn rebuild(terms: &[(Op, Expr)]) -> Expr {
    let mut acc = terms[0].1.clone();
    for (op, t) in &terms[1..] {
        acc = Expr::binary(*op, acc, t.clone());
    }
    acc
}

/// All expressions one swap away from `e`.
fn neighbors(e: &Expr) -> Vec<Expr> {
    let Expr::Binary { op, left, right } = e else {
        return Vec::new();
    };
    let Some(kind) = ChainKind::of(*op) else {
        let mut out: Vec<Expr> = neighbors(left).into_iter().map(|l| Expr::binary(*op, l, (**right).clone())).collect();
        out.extend(neighbors(right).into_iter().map(|r| Expr::binary(*op, (**left).clone(), r)));
        return out;
    };
    let mut terms = Vec::new();
    flatten(e, kind, &mut terms);
    let mut out = Vec::new();
    for k in 0..terms.len() - 1 {
        // The first term has no operator of its own, so it may only trade
        // places with a positively joined neighbour.
        if k == 0 && terms[1].0 != kind.positive() {
            continue;
        }
        let mut swapped = terms.clone();
        swapped.swap(k, k + 1);
        out.push(rebuild(&swapped));
    }
    for k in 0..terms.len() {
        for t in neighbors(&terms[k].1) {
            let mut replaced = terms.clone();
            replaced[k].1 = t;
            out.push(rebuild(&replaced));
        }
    }
    out
}

/// Breadth-first closure of the swap rules from `gold`, gold first, capped
/// at `cfg.max_positive_variants`.
pub fn gen_positives(gold: &Expr, cfg: &AugmentConfig) -> Vec<Expr> {
    let cap = cfg.max_positive_variants.max(1);
    let mut seen: HashSet<Expr> = HashSet::new();
    let mut out = vec![gold.clone()];
    let mut queue = VecDeque::from([gold.clone()]);
    seen.insert(gold.clone());
    while let Some(e) = queue.pop_front() {
        for n in neighbors(&e) {
            if out.len() >= cap {
                return out;
            }
            if seen.insert(n.clone()) {
                out.push(n.clone());
                queue.push_back(n);
            }
        }
    }
    out
}

fn leaf_tokens(problem: &Problem, constants: &[f64]) -> Vec<Token> {
    (0..problem.quantities.len())
        .map(Token::Quantity)
        .chain((0..constants.len()).map(Token::Constant))
        .collect()
}

fn disturb(tokens: &[Token], leaves: &[Token], lambda: f64, rng: &mut Rng) -> Vec<Token> {
    tokens
        .iter()
        .map(|&t| {
            if !rng.gen_bool(lambda) {
                return t;
            }
            let pool: Vec<Token> = match t {
                Token::Op(op) => Op::ALL.iter().filter(|&&o| o != op).map(|&o| Token::Op(o)).collect(),
                _ => leaves.iter().copied().filter(|&l| l != t).collect(),
            };
            pool.choose(rng).copied().unwrap_or(t)
        })
        .collect()
}

/// Disturbed copies of `positive` that do not reach the problem's answer.
pub fn gen_negatives(
    positive: &Expr,
    problem: &Problem,
    constants: &[f64],
    eps: f64,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Vec<Expr>, AugmentError> {
    let tokens = positive.to_prefix();
    let leaves = leaf_tokens(problem, constants);
    let budget = cfg.max_retries * cfg.negatives_per_positive;
    let mut out = Vec::with_capacity(cfg.negatives_per_positive);
    let mut attempts = 0;
    while out.len() < cfg.negatives_per_positive {
        if attempts == budget {
            return Err(AugmentError::ExhaustedRetries { id: problem.id.clone(), attempts });
        }
        attempts += 1;
        let mutated = disturb(&tokens, &leaves, cfg.lambda, rng);
        let Ok(candidate) = Expr::from_prefix(&mutated) else { continue };
        match problem.evaluate(&candidate, constants) {
            Some(v) if !answer_matches(v, problem.answer, eps) => out.push(candidate),
            _ => {}
        }
    }
    Ok(out)
}

/// Builds a batch from the given positives: those that reach the answer are
/// kept (deduplicated), and each gets `negatives_per_positive` negatives.
pub fn contrast_batch(
    problem: &Problem,
    positives: &[Expr],
    constants: &[f64],
    eps: f64,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<ContrastBatch, AugmentError> {
    let mut seen = HashSet::new();
    let kept: Vec<Expr> = positives
        .iter()
        .filter(|e| problem.is_solution(e, constants, eps))
        .filter(|e| seen.insert(e.canonical_key()))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(AugmentError::NoPositives(problem.id.clone()));
    }
    let mut negatives = Vec::new();
    for p in &kept {
        negatives.extend(gen_negatives(p, problem, constants, eps, cfg, rng)?);
    }
    Ok(ContrastBatch { problem_id: problem.id.clone(), positives: kept, negatives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::problem_from_text;
    use crate::expr::{parse_infix, Vocabulary, ANSWER_EPS};
    use crate::seed;

    fn infixes(exprs: &[Expr], v: &Vocabulary) -> Vec<String> {
        exprs.iter().map(|e| e.to_infix(v)).collect()
    }

    fn cfg(cap: usize) -> AugmentConfig {
        AugmentConfig { max_positive_variants: cap, ..Default::default() }
    }

    #[test]
    fn commutative_sum() {
        let v = Vocabulary::new(2);
        let out = infixes(&gen_positives(&parse_infix("N1+N2", &v).unwrap(), &cfg(32)), &v);
        assert_eq!(out, vec!["N1+N2", "N2+N1"]);
    }

    #[test]
    fn mul_div_swap() {
        let v = Vocabulary::new(3);
        let out = infixes(&gen_positives(&parse_infix("N1*N2/N3", &v).unwrap(), &cfg(32)), &v);
        assert!(out.contains(&"N1/N3*N2".to_string()));
        assert!(out.contains(&"N2*N1/N3".to_string()));
        assert!(!out.contains(&"N3*N1/N2".to_string()));
        let out = infixes(&gen_positives(&parse_infix("N1/N2/N3", &v).unwrap(), &cfg(32)), &v);
        assert_eq!(out, vec!["N1/N2/N3", "N1/N3/N2"]);
    }

    #[test]
    fn nothing_to_swap() {
        let v = Vocabulary::new(2);
        let out = infixes(&gen_positives(&parse_infix("N1-N2", &v).unwrap(), &cfg(32)), &v);
        assert_eq!(out, vec!["N1-N2"]);
        let out = infixes(&gen_positives(&parse_infix("N1^N2", &v).unwrap(), &cfg(32)), &v);
        assert_eq!(out, vec!["N1^N2"]);
    }

    #[test]
    fn signs_travel_with_terms() {
        let v = Vocabulary::new(3);
        let out = infixes(&gen_positives(&parse_infix("N1+N2-N3", &v).unwrap(), &cfg(32)), &v);
        for want in ["N2+N1-N3", "N1-N3+N2", "N2-N3+N1"] {
            assert!(out.contains(&want.to_string()), "{want} missing from {out:?}");
        }
        assert!(out.iter().all(|s| !s.starts_with("N3")));
    }

    #[test]
    fn rules_reach_inside_groups_and_powers() {
        let v = Vocabulary::new(4);
        let out = infixes(&gen_positives(&parse_infix("N1-(N2+N3)", &v).unwrap(), &cfg(32)), &v);
        assert_eq!(out, vec!["N1-(N2+N3)", "N1-(N3+N2)"]);
        let out = infixes(&gen_positives(&parse_infix("(N1*N2)^N3", &v).unwrap(), &cfg(32)), &v);
        assert_eq!(out, vec!["(N1*N2)^N3", "(N2*N1)^N3"]);
    }

    #[test]
    fn cap_is_respected() {
        let v = Vocabulary::new(4);
        let out = gen_positives(&parse_infix("N1+N2+N3+N4", &v).unwrap(), &cfg(5));
        assert_eq!(out.len(), 5);
        assert_eq!(out[0], parse_infix("N1+N2+N3+N4", &v).unwrap());
    }

    fn table_problem() -> Problem {
        problem_from_text("p", "25 red and 20 blue", "N1+N2", &Vocabulary::default_constants()).unwrap()
    }

    #[test]
    fn negatives_avoid_answer() {
        let p = table_problem();
        let c = Vocabulary::default_constants();
        let gold = p.gold.clone().unwrap();
        let mut rng = seed::rng(1);
        let negs = gen_negatives(&gold, &p, &c, ANSWER_EPS, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(negs.len(), 2);
        for n in &negs {
            assert!(!p.is_solution(n, &c, ANSWER_EPS));
            assert_eq!(n.to_prefix().len(), gold.to_prefix().len());
        }
    }

    #[test]
    fn commuted_mutation_is_rejected() {
        let p = table_problem();
        let c = Vocabulary::default_constants();
        let swapped = parse_infix("N2+N1", &p.vocab(&c)).unwrap();
        assert!(p.is_solution(&swapped, &c, ANSWER_EPS));
        let mut rng = seed::rng(4);
        let all = AugmentConfig { lambda: 0.6, negatives_per_positive: 50, ..Default::default() };
        for n in gen_negatives(&p.gold.clone().unwrap(), &p, &c, ANSWER_EPS, &all, &mut rng).unwrap() {
            assert_ne!(n, swapped);
        }
    }

    #[test]
    fn zero_lambda_exhausts() {
        let p = table_problem();
        let c = Vocabulary::default_constants();
        let cfg = AugmentConfig { lambda: 0.0, ..Default::default() };
        let err = gen_negatives(&p.gold.clone().unwrap(), &p, &c, ANSWER_EPS, &cfg, &mut seed::rng(0)).unwrap_err();
        assert!(matches!(err, AugmentError::ExhaustedRetries { attempts: 200, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { negatives_per_positive: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batch_is_deterministic_and_separated() {
        let c = Vocabulary::default_constants();
        let p = problem_from_text("q", "40 25 20 10", "N2+N3-(N1-N4)", &c).unwrap();
        let positives = gen_positives(p.gold.as_ref().unwrap(), &AugmentConfig::default());
        let cfg = AugmentConfig::default();
        let a = contrast_batch(&p, &positives, &c, ANSWER_EPS, &cfg, &mut seed::rng(9)).unwrap();
        let b = contrast_batch(&p, &positives, &c, ANSWER_EPS, &cfg, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.negatives.len(), a.positives.len() * 2);
        assert!(a.positives.iter().all(|e| p.is_solution(e, &c, ANSWER_EPS)));
        assert!(a.negatives.iter().all(|e| !p.is_solution(e, &c, ANSWER_EPS)));
        let rec = a.to_record(&p, &c);
        assert_eq!(rec.positives[0], "N2+N3-(N1-N4)");
    }
}
