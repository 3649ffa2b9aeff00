//! Weak data augmentation: a layered combinatorial search for an equation
//! that reaches a problem's answer from its quantities and the constants.
//!
//! Layer 0 holds the seeds (quantities, then constants). Layer `L` combines
//! every expression discovered in layer `L-1` with every expression found so
//! far, under each operator. The first candidate that hits the answer is
//! returned. Every attempted combination counts against the iteration budget,
//! including ones that are pruned or fail to evaluate.
//!
//! Pruning, applied to every candidate before it can be returned or reused:
//! - no `X-X` or `X/X` with structurally identical operands,
//! - at least one quantity,
//! - a `pi` constant only together with a multiplication.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{Corpus, Problem};
use crate::expr::{answer_matches, Expr, Op, ANSWER_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdaConfig {
    pub max_iterations: usize,
    pub constants: Vec<f64>,
    pub ops: Vec<Op>,
    pub tolerance: f64,
}

impl Default for WdaConfig {
    fn default() -> Self {
        WdaConfig {
            max_iterations: 50_000,
            constants: vec![1.0, PI],
            ops: Op::ALL.to_vec(),
            tolerance: ANSWER_EPS,
        }
    }
}

impl WdaConfig {
    pub fn with_constants(constants: &[f64]) -> Self {
        WdaConfig { constants: constants.to_vec(), ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WdaStatus {
    Found,
    /// The iteration budget ran out.
    BudgetExhausted,
    /// A layer produced nothing new.
    SpaceExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WdaOutcome {
    pub status: WdaStatus,
    pub solution: Option<Expr>,
    pub iterations: usize,
    /// Layer of the returned expression (0 for a bare quantity).
    pub layer: usize,
}

impl WdaOutcome {
    pub fn found(&self) -> bool {
        self.status == WdaStatus::Found
    }
}

#[derive(Clone, Copy, Debug)]
enum NodeKind {
    Quantity(usize),
    Constant(usize),
    Binary(Op, u32, u32),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    kind: NodeKind,
    value: f64,
    has_quantity: bool,
    has_pi: bool,
    has_mul: bool,
    layer: u32,
}

/// The three working sets of the search, as node ids into an arena where
/// every id is a distinct structure.
#[derive(Debug, Default)]
pub struct WdaFrontier {
    /// Newest layer.
    pub r1: Vec<u32>,
    /// Layer under construction.
    pub r2: Vec<u32>,
    /// Everything found so far.
    pub r3: Vec<u32>,
}

struct Search<'a> {
    nodes: Vec<Node>,
    interned: HashMap<(Op, u32, u32), u32>,
    cfg: &'a WdaConfig,
}

impl Search<'_> {
    fn materialize(&self, id: u32) -> Expr {
        match self.nodes[id as usize].kind {
            NodeKind::Quantity(i) => Expr::Quantity(i),
            NodeKind::Constant(j) => Expr::Constant(j),
            NodeKind::Binary(op, l, r) => Expr::binary(op, self.materialize(l), self.materialize(r)),
        }
    }

    /// Builds `a op b`; `None` if pruned, not evaluable, or already known.
    fn combine(&mut self, op: Op, a: u32, b: u32, layer: u32) -> Option<u32> {
        if a == b && matches!(op, Op::Sub | Op::Div) {
            return None;
        }
        let (na, nb) = (self.nodes[a as usize], self.nodes[b as usize]);
        let has_quantity = na.has_quantity || nb.has_quantity;
        let has_pi = na.has_pi || nb.has_pi;
        let has_mul = op == Op::Mul || na.has_mul || nb.has_mul;
        if !has_quantity || (has_pi && !has_mul) {
            return None;
        }
        let value = op.apply(na.value, nb.value).ok()?;
        if self.interned.contains_key(&(op, a, b)) {
            return None;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { kind: NodeKind::Binary(op, a, b), value, has_quantity, has_pi, has_mul, layer });
        self.interned.insert((op, a, b), id);
        Some(id)
    }
}

/// Searches for an equation over `problem.quantities` reaching `problem.answer`.
pub fn wda_search(problem: &Problem, cfg: &WdaConfig) -> WdaOutcome {
    search_values(&problem.quantities, problem.answer, cfg)
}

pub fn search_values(quantities: &[f64], answer: f64, cfg: &WdaConfig) -> WdaOutcome {
    let (outcome, _) = run_search(quantities, answer, cfg);
    outcome
}

fn run_search<'a>(quantities: &[f64], answer: f64, cfg: &'a WdaConfig) -> (WdaOutcome, Search<'a>) {
    let mut search = Search { nodes: Vec::new(), interned: HashMap::new(), cfg };
    let mut frontier = WdaFrontier::default();
    for (i, &v) in quantities.iter().enumerate() {
        search.nodes.push(Node {
            kind: NodeKind::Quantity(i),
            value: v,
            has_quantity: true,
            has_pi: false,
            has_mul: false,
            layer: 0,
        });
    }
    for (j, &v) in search.cfg.constants.iter().enumerate() {
        search.nodes.push(Node {
            kind: NodeKind::Constant(j),
            value: v,
            has_quantity: false,
            has_pi: v == PI,
            has_mul: false,
            layer: 0,
        });
    }
    frontier.r1 = (0..search.nodes.len() as u32).collect();
    frontier.r3 = frontier.r1.clone();

    let tol = search.cfg.tolerance;
    let done = |search: &Search<'_>, status, id: Option<u32>, iterations| {
        let solution = id.map(|id| search.materialize(id));
        let layer = id.map_or(0, |id| search.nodes[id as usize].layer as usize);
        WdaOutcome { status, solution, iterations, layer }
    };

    // Bare quantities first; bare constants never count as solutions.
    for i in 0..quantities.len() {
        if answer_matches(quantities[i], answer, tol) {
            let out = done(&search, WdaStatus::Found, Some(i as u32), 0);
            return (out, search);
        }
    }
    if quantities.is_empty() {
        let out = done(&search, WdaStatus::SpaceExhausted, None, 0);
        return (out, search);
    }

    let ops = search.cfg.ops.clone();
    let max = search.cfg.max_iterations;
    let mut iter = 0usize;
    let mut layer = 1u32;
    loop {
        for &i in &frontier.r1 {
            for &j in &frontier.r3 {
                for &op in &ops {
                    let orders: &[(u32, u32)] =
                        if op.is_commutative() { &[(i, j)][..] } else { &[(i, j), (j, i)][..] };
                    for &(a, b) in orders {
                        if iter == max {
                            let out = done(&search, WdaStatus::BudgetExhausted, None, iter);
                            return (out, search);
                        }
                        iter += 1;
                        if let Some(id) = search.combine(op, a, b, layer) {
                            if answer_matches(search.nodes[id as usize].value, answer, tol) {
                                let out = done(&search, WdaStatus::Found, Some(id), iter);
                                return (out, search);
                            }
                            frontier.r2.push(id);
                        }
                    }
                }
            }
        }
        if frontier.r2.is_empty() {
            let out = done(&search, WdaStatus::SpaceExhausted, None, iter);
            return (out, search);
        }
        frontier.r3.extend_from_slice(&frontier.r2);
        frontier.r1 = std::mem::take(&mut frontier.r2);
        layer += 1;
    }
}

/// False iff `e` has an `X-X`/`X/X` subtree with identical operands, has no
/// quantity, or uses `pi` without any multiplication.
pub fn passes_pruning(e: &Expr, constants: &[f64]) -> bool {
    let mut has_quantity = false;
    let mut has_pi = false;
    let mut has_mul = false;
    let mut self_cancel = false;
    e.walk(&mut |node| match node {
        Expr::Quantity(_) => has_quantity = true,
        Expr::Constant(j) => has_pi |= constants.get(*j) == Some(&PI),
        Expr::Binary { op, left, right } => {
            has_mul |= *op == Op::Mul;
            self_cancel |= matches!(op, Op::Sub | Op::Div) && left == right;
        }
    });
    has_quantity && !self_cancel && !(has_pi && !has_mul)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdaSummary {
    pub problems: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_iterations: f64,
    pub wall_time_secs: f64,
    /// Solution count per layer.
    pub layer_histogram: BTreeMap<usize, usize>,
}

/// Runs the search on every problem without a gold equation. Results are
/// keyed by problem id, so the map is identical for any worker count.
pub fn batch_augment(
    corpus: &Corpus,
    cfg: &WdaConfig,
    workers: usize,
) -> (BTreeMap<String, WdaOutcome>, WdaSummary) {
    let start = Instant::now();
    let todo: Vec<&Problem> = corpus.problems.iter().filter(|p| p.gold.is_none()).collect();
    let workers = workers.max(1).min(todo.len().max(1));
    let chunk = todo.len().div_ceil(workers).max(1);
    let mut results = BTreeMap::new();
    if workers == 1 {
        for p in &todo {
            results.insert(p.id.clone(), wda_search(p, cfg));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = todo
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter().map(|p| (p.id.clone(), wda_search(p, cfg))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                results.extend(h.join().expect("wda worker panicked"));
            }
        });
    }
    let successes = results.values().filter(|o| o.found()).count();
    let mut layer_histogram = BTreeMap::new();
    for o in results.values().filter(|o| o.found()) {
        *layer_histogram.entry(o.layer).or_insert(0) += 1;
    }
    let n = results.len();
    let summary = WdaSummary {
        problems: n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        mean_iterations: if n == 0 {
            0.0
        } else {
            results.values().map(|o| o.iterations as f64).sum::<f64>() / n as f64
        },
        wall_time_secs: start.elapsed().as_secs_f64(),
        layer_histogram,
    };
    (results, summary)
}
