//! Encoder-decoder solver: a bidirectional GRU over the mapped problem text
//! and a goal-driven tree decoder emitting prefix tokens.
//!
//! Decoding keeps a stack of pending operator frames. Each step turns the
//! current goal vector plus an attention context over the encoder states into
//! scores over operators, constants and the problem's quantities. Choosing an
//! operator derives a left goal; finishing a left subtree derives the right
//! goal from the parent and the left subtree's embedding; finishing a right
//! subtree merges both children into the parent's subtree embedding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::dataio::Problem;
use crate::expr::{prefix_text, Expr, Op, Token};
use crate::rnn::BiGru;
use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("target token {0} is outside the problem vocabulary")]
    TokenOutOfRange(Token),
    #[error("target is not a complete prefix expression")]
    MalformedTarget,
    #[error("problem `{id}` has no text token for quantity N{index}")]
    MissingQuantity { id: String, index: usize },
    #[error("problem `{0}` has no text tokens")]
    NoTokens(String),
    #[error("weighted loss over an empty buffer")]
    EmptyBuffer,
    #[error("weight {0} is negative or not finite")]
    BadWeight(f64),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, SolverError>;

pub const UNK: &str = "<unk>";

/// Word vocabulary of the encoder; index 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> TextVocab {
        let mut v = TextVocab { words: vec![UNK.to_string()], index: HashMap::new() };
        v.index.insert(UNK.to_string(), 0);
        for w in words {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    /// Every token of every problem, in first-seen order.
    pub fn build<'a>(problems: impl IntoIterator<Item = &'a Problem>) -> TextVocab {
        TextVocab::from_words(problems.into_iter().flat_map(|p| p.tokens.iter().cloned()))
    }

    fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_constants: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { embed_dim: 32, hidden_dim: 64, num_constants: 2 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct SolverIds {
    enc: BiGru,
    root: Affine,
    attn: ParamId,
    mix: Affine,
    op_out: Affine,
    leaf_out: ParamId,
    const_emb: ParamId,
    op_emb: ParamId,
    left: Affine,
    right: Affine,
    merge: Affine,
}

fn affine(p: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut Rng) -> Affine {
    Affine {
        w: p.add_uniform(&format!("{name}.w"), fan_in, out, fan_in, rng),
        b: p.add_uniform(&format!("{name}.b"), 1, out, fan_in, rng),
    }
}

fn apply(g: &mut Graph, a: Affine, x: Var) -> std::result::Result<Var, AutodiffError> {
    let w = g.param(a.w);
    let b = g.param(a.b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Encoder inputs for one problem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub ids: Vec<usize>,
    pub quantity_positions: Vec<usize>,
}

/// Encoder states of one problem on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Encoding {
    /// `m x H` per-token context vectors.
    pub outputs: Var,
    /// `1 x H` mean of the outputs.
    pub pooled: Var,
    /// `(C + k) x H` leaf embeddings: constants first, then quantities.
    pub leaves: Var,
    pub num_quantities: usize,
}

#[derive(Clone, Copy, Debug)]
struct Frame {
    mix: Var,
    op: Var,
    left: Option<Var>,
}

/// Decoder state: the goal to expand next plus the pending frames.
#[derive(Clone, Debug)]
pub struct DecodeState {
    goal: Var,
    mix: Option<Var>,
    stack: Vec<Frame>,
}

/// A token-level model that beam search can drive.
pub trait Decoder {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn is_operator(&self, token: usize) -> bool;
    fn initial(&mut self) -> Result<Self::State>;
    /// Log-probabilities over all tokens at `state`.
    fn log_probs(&mut self, state: &mut Self::State) -> Result<Vec<f64>>;
    /// State after emitting `token`; only called for unfinished sequences.
    fn advance(&mut self, state: &Self::State, token: usize) -> Result<Self::State>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

struct Hyp<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    open: usize,
    state: Option<S>,
}

/// Beam search over complete prefix sequences of at most `max_len` tokens.
/// Extensions that could no longer close every open slot within `max_len`
/// are dropped. Results are sorted by descending log-probability.
pub fn beam_search<D: Decoder>(dec: &mut D, k: usize, max_len: usize) -> Result<Vec<ScoredSequence>> {
    assert!(k >= 1, "beam width must be at least 1");
    let init = dec.initial()?;
    let mut beams = vec![Hyp { tokens: Vec::new(), log_prob: 0.0, open: 1, state: Some(init) }];
    loop {
        if beams.iter().all(|h| h.state.is_none()) {
            break;
        }
        // (log_prob, beam index, token or None for a finished beam)
        let mut cands: Vec<(f64, usize, Option<usize>)> = Vec::new();
        for (b, h) in beams.iter_mut().enumerate() {
            let Some(state) = h.state.as_mut() else {
                cands.push((h.log_prob, b, None));
                continue;
            };
            let lp = dec.log_probs(state)?;
            for (tok, &l) in lp.iter().enumerate() {
                let open = if dec.is_operator(tok) { h.open + 1 } else { h.open - 1 };
                if h.tokens.len() + 1 + open > max_len {
                    continue;
                }
                cands.push((h.log_prob + l, b, Some(tok)));
            }
        }
        if cands.is_empty() {
            beams.clear();
            break;
        }
        // Stable: ties keep generation order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(k);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, b, tok) in cands {
            let h = &beams[b];
            match tok {
                None => next.push(Hyp { tokens: h.tokens.clone(), log_prob: lp, open: 0, state: None }),
                Some(t) => {
                    let open = if dec.is_operator(t) { h.open + 1 } else { h.open - 1 };
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    let state = if open == 0 {
                        None
                    } else {
                        Some(dec.advance(h.state.as_ref().expect("unfinished"), t)?)
                    };
                    next.push(Hyp { tokens, log_prob: lp, open, state });
                }
            }
        }
        beams = next;
    }
    Ok(beams.into_iter().map(|h| ScoredSequence { tokens: h.tokens, log_prob: h.log_prob }).collect())
}

/// Arg-max decoding under the same length constraint as [`beam_search`].
pub fn greedy_search<D: Decoder>(dec: &mut D, max_len: usize) -> Result<Option<ScoredSequence>> {
    let mut state = dec.initial()?;
    let mut tokens = Vec::new();
    let mut open = 1usize;
    let mut total = 0.0;
    loop {
        let lp = dec.log_probs(&mut state)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &l) in lp.iter().enumerate() {
            let o = if dec.is_operator(tok) { open + 1 } else { open - 1 };
            if tokens.len() + 1 + o > max_len {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((tok, l));
            }
        }
        let Some((tok, l)) = best else { return Ok(None) };
        total += l;
        tokens.push(tok);
        open = if dec.is_operator(tok) { open + 1 } else { open - 1 };
        if open == 0 {
            return Ok(Some(ScoredSequence { tokens, log_prob: total }));
        }
        state = dec.advance(&state, tok)?;
    }
}

/// A decoded equation with its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub expr: Expr,
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceBeam {
    pub rank: usize,
    pub prefix: String,
    pub infix: String,
    pub log_prob: f64,
    pub value: Option<f64>,
    pub correct: bool,
}

/// JSON-friendly dump of a beam for debugging.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecodeTrace {
    pub problem_id: String,
    pub answer: f64,
    pub beams: Vec<TraceBeam>,
}

impl DecodeTrace {
    pub fn new(problem: &Problem, constants: &[f64], hyps: &[Hypothesis], eps: f64) -> DecodeTrace {
        let vocab = problem.vocab(constants);
        let beams = hyps
            .iter()
            .enumerate()
            .map(|(rank, h)| {
                let value = h.expr.evaluate(&problem.quantities, constants).ok();
                TraceBeam {
                    rank,
                    prefix: prefix_text(&h.tokens),
                    infix: h.expr.to_infix(&vocab),
                    log_prob: h.log_prob,
                    value,
                    correct: value.is_some_and(|v| crate::expr::answer_matches(v, problem.answer, eps)),
                }
            })
            .collect();
        DecodeTrace { problem_id: problem.id.clone(), answer: problem.answer, beams }
    }
}

#[derive(Serialize, Deserialize)]
struct SolverMeta {
    config: SolverConfig,
    vocab: TextVocab,
}

/// The solver's parameters θ together with its text vocabulary.
#[derive(Clone, Debug)]
pub struct Solver {
    config: SolverConfig,
    vocab: TextVocab,
    params: ParamStore,
    ids: SolverIds,
}

impl Solver {
    pub fn new(config: SolverConfig, vocab: TextVocab, seed: u64) -> Solver {
        let mut rng = seed::rng(seed::derive(seed, "solver-init"));
        let (d, h, c) = (config.embed_dim, config.hidden_dim, config.num_constants);
        let n_ops = Op::ALL.len();
        let mut p = ParamStore::new();
        let ids = SolverIds {
            enc: BiGru::new(&mut p, "solver.enc", vocab.len(), d, h, &mut rng),
            root: affine(&mut p, "solver.dec.root", h, h, &mut rng),
            attn: p.add_uniform("solver.dec.attn", h, h, h, &mut rng),
            mix: affine(&mut p, "solver.dec.mix", 2 * h, h, &mut rng),
            op_out: affine(&mut p, "solver.dec.op_out", h, n_ops, &mut rng),
            leaf_out: p.add_uniform("solver.dec.leaf_out", h, h, h, &mut rng),
            const_emb: p.add_uniform("solver.dec.const_emb", c.max(1), h, h, &mut rng),
            op_emb: p.add_uniform("solver.dec.op_emb", n_ops, h, h, &mut rng),
            left: affine(&mut p, "solver.dec.left", 2 * h, h, &mut rng),
            right: affine(&mut p, "solver.dec.right", 3 * h, h, &mut rng),
            merge: affine(&mut p, "solver.dec.merge", 3 * h, h, &mut rng),
        };
        Solver { config, vocab, params: p, ids }
    }

    pub fn config(&self) -> SolverConfig {
        self.config
    }

    pub fn vocab(&self) -> &TextVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the output scorers so every token is equally likely.
    pub fn make_uniform(&mut self) {
        for id in [self.ids.op_out.w, self.ids.op_out.b, self.ids.leaf_out] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Number of decoder tokens for a problem with `k` quantities.
    pub fn output_size(&self, k: usize) -> usize {
        Op::ALL.len() + self.config.num_constants + k
    }

    pub fn token_index(&self, token: Token, k: usize) -> Result<usize> {
        let c = self.config.num_constants;
        match token {
            Token::Op(op) => Ok(op.index()),
            Token::Constant(j) if j < c => Ok(Op::ALL.len() + j),
            Token::Quantity(i) if i < k => Ok(Op::ALL.len() + c + i),
            t => Err(SolverError::TokenOutOfRange(t)),
        }
    }

    pub fn index_token(&self, index: usize) -> Token {
        let n_ops = Op::ALL.len();
        let c = self.config.num_constants;
        if index < n_ops {
            Token::Op(Op::ALL[index])
        } else if index < n_ops + c {
            Token::Constant(index - n_ops)
        } else {
            Token::Quantity(index - n_ops - c)
        }
    }

    pub fn prepare(&self, problem: &Problem) -> Result<Prepared> {
        if problem.tokens.is_empty() {
            return Err(SolverError::NoTokens(problem.id.clone()));
        }
        let ids = problem.tokens.iter().map(|t| self.vocab.id(t)).collect();
        let quantity_positions = (1..=problem.quantities.len())
            .map(|i| {
                let name = format!("N{i}");
                problem
                    .tokens
                    .iter()
                    .position(|t| *t == name)
                    .ok_or_else(|| SolverError::MissingQuantity { id: problem.id.clone(), index: i })
            })
            .collect::<Result<_>>()?;
        Ok(Prepared { ids, quantity_positions })
    }

    pub fn encode(&self, g: &mut Graph, input: &Prepared) -> Result<Encoding> {
        Ok(self.encode_batch(g, &[input])?.remove(0))
    }

    /// Encodes several problems in one recurrent pass; results equal
    /// encoding each problem alone.
    pub fn encode_batch(&self, g: &mut Graph, inputs: &[&Prepared]) -> Result<Vec<Encoding>> {
        let seqs: Vec<&[usize]> = inputs.iter().map(|p| p.ids.as_slice()).collect();
        let outputs = self.ids.enc.encode_batch(g, &seqs)?;
        let consts = (self.config.num_constants > 0).then(|| g.param(self.ids.const_emb));
        let mut encs = Vec::with_capacity(inputs.len());
        for (input, outputs) in inputs.iter().zip(outputs) {
            let pooled = g.mean_rows(outputs)?;
            let quants = g.gather_rows(outputs, &input.quantity_positions)?;
            let leaves = match (consts, input.quantity_positions.is_empty()) {
                (Some(c), false) => g.concat_rows(&[c, quants])?,
                (Some(c), true) => c,
                (None, _) => quants,
            };
            encs.push(Encoding { outputs, pooled, leaves, num_quantities: input.quantity_positions.len() });
        }
        Ok(encs)
    }

    fn root_state(&self, g: &mut Graph, enc: &Encoding) -> Result<DecodeState> {
        let q = apply(g, self.ids.root, enc.pooled)?;
        let goal = g.tanh(q)?;
        Ok(DecodeState { goal, mix: None, stack: Vec::new() })
    }

    /// Log-softmax row over all output tokens for the state's goal.
    fn step(&self, g: &mut Graph, enc: &Encoding, state: &mut DecodeState) -> Result<Var> {
        let attn = g.param(self.ids.attn);
        let qa = g.matmul(state.goal, attn)?;
        let scores = g.matmul_nt(qa, enc.outputs)?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, enc.outputs)?;
        let qc = g.concat(&[state.goal, ctx])?;
        let mix = apply(g, self.ids.mix, qc)?;
        let mix = g.tanh(mix)?;
        state.mix = Some(mix);
        let op_logits = apply(g, self.ids.op_out, mix)?;
        let leaf_w = g.param(self.ids.leaf_out);
        let lq = g.matmul(mix, leaf_w)?;
        let leaf_logits = g.matmul_nt(lq, enc.leaves)?;
        let logits = g.concat(&[op_logits, leaf_logits])?;
        Ok(g.log_softmax(logits)?)
    }

    /// Transition after emitting `index`; `None` once the tree is complete.
    fn transition(&self, g: &mut Graph, enc: &Encoding, state: &DecodeState, index: usize) -> Result<Option<DecodeState>> {
        let mix = state.mix.expect("step before transition");
        let n_ops = Op::ALL.len();
        let mut stack = state.stack.clone();
        if index < n_ops {
            let table = g.param(self.ids.op_emb);
            let op = g.row(table, index)?;
            let cat = g.concat(&[mix, op])?;
            let left = apply(g, self.ids.left, cat)?;
            let goal = g.tanh(left)?;
            stack.push(Frame { mix, op, left: None });
            return Ok(Some(DecodeState { goal, mix: None, stack }));
        }
        let mut subtree = g.row(enc.leaves, index - n_ops)?;
        while let Some(frame) = stack.pop() {
            match frame.left {
                None => {
                    let cat = g.concat(&[frame.mix, frame.op, subtree])?;
                    let right = apply(g, self.ids.right, cat)?;
                    let goal = g.tanh(right)?;
                    stack.push(Frame { left: Some(subtree), ..frame });
                    return Ok(Some(DecodeState { goal, mix: None, stack }));
                }
                Some(left) => {
                    let cat = g.concat(&[frame.op, left, subtree])?;
                    let merged = apply(g, self.ids.merge, cat)?;
                    subtree = g.tanh(merged)?;
                }
            }
        }
        Ok(None)
    }

    /// Teacher-forced log P(target | problem) as a scalar node.
    pub fn sequence_log_prob(&self, g: &mut Graph, enc: &Encoding, target: &[Token]) -> Result<Var> {
        let indices = target
            .iter()
            .map(|&t| self.token_index(t, enc.num_quantities))
            .collect::<Result<Vec<_>>>()?;
        let mut state = Some(self.root_state(g, enc)?);
        let mut picks = Vec::with_capacity(indices.len());
        for &idx in &indices {
            let Some(st) = state.as_mut() else { return Err(SolverError::MalformedTarget) };
            let lp = self.step(g, enc, st)?;
            picks.push(g.pick(lp, idx)?);
            state = self.transition(g, enc, st, idx)?;
        }
        if state.is_some() || picks.is_empty() {
            return Err(SolverError::MalformedTarget);
        }
        let row = g.concat(&picks)?;
        Ok(g.sum(row)?)
    }

    /// `-Σ a_i log P(B_i | W)`; zero-weight entries contribute nothing.
    pub fn weighted_loss(&self, g: &mut Graph, enc: &Encoding, entries: &[(&[Token], f64)]) -> Result<Var> {
        if entries.is_empty() {
            return Err(SolverError::EmptyBuffer);
        }
        let mut terms = Vec::new();
        for &(tokens, a) in entries {
            if !(a.is_finite() && a >= 0.0) {
                return Err(SolverError::BadWeight(a));
            }
            if a == 0.0 {
                continue;
            }
            let lp = self.sequence_log_prob(g, enc, tokens)?;
            terms.push(g.scale(lp, -a)?);
        }
        if terms.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let row = g.concat(&terms)?;
        Ok(g.sum(row)?)
    }

    pub fn max_decode_len(num_quantities: usize) -> usize {
        2 * num_quantities + 5
    }

    pub fn beam_decode(&self, g: &mut Graph, enc: &Encoding, k: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
        let mut dec = NeuralDecoder { solver: self, graph: g, enc };
        let seqs = beam_search(&mut dec, k, max_len)?;
        Ok(seqs.into_iter().map(|s| self.hypothesis(s)).collect())
    }

    pub fn greedy_decode(&self, g: &mut Graph, enc: &Encoding, max_len: usize) -> Result<Option<Hypothesis>> {
        let mut dec = NeuralDecoder { solver: self, graph: g, enc };
        Ok(greedy_search(&mut dec, max_len)?.map(|s| self.hypothesis(s)))
    }

    fn hypothesis(&self, s: ScoredSequence) -> Hypothesis {
        let tokens: Vec<Token> = s.tokens.iter().map(|&i| self.index_token(i)).collect();
        let expr = Expr::from_prefix(&tokens).expect("beam search only completes well-formed sequences");
        Hypothesis { expr, tokens, log_prob: s.log_prob }
    }

    /// Convenience: encode and beam-decode one problem on a fresh graph.
    pub fn decode_problem(&self, problem: &Problem, k: usize) -> Result<Vec<Hypothesis>> {
        let input = self.prepare(problem)?;
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, &input)?;
        self.beam_decode(&mut g, &enc, k, Self::max_decode_len(problem.quantities.len()))
    }

    /// Saves parameters to `path` and the vocabulary/config to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let meta = SolverMeta { config: self.config, vocab: self.vocab.clone() };
        let json = serde_json::to_string(&meta).map_err(|e| SolverError::Meta(e.to_string()))?;
        std::fs::write(meta_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Solver> {
        let json = std::fs::read_to_string(meta_path(path))?;
        let mut meta: SolverMeta = serde_json::from_str(&json).map_err(|e| SolverError::Meta(e.to_string()))?;
        meta.vocab.reindex();
        let stored = ParamStore::load(path)?;
        let mut solver = Solver::new(meta.config, meta.vocab, 0);
        solver.params.load_values_from(&stored)?;
        Ok(solver)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// The solver's decoder bound to one encoding.
pub struct NeuralDecoder<'s, 'g, 'p> {
    solver: &'s Solver,
    graph: &'g mut Graph<'p>,
    enc: &'s Encoding,
}

impl Decoder for NeuralDecoder<'_, '_, '_> {
    type State = DecodeState;

    fn vocab_size(&self) -> usize {
        self.solver.output_size(self.enc.num_quantities)
    }

    fn is_operator(&self, token: usize) -> bool {
        token < Op::ALL.len()
    }

    fn initial(&mut self) -> Result<DecodeState> {
        self.solver.root_state(self.graph, self.enc)
    }

    fn log_probs(&mut self, state: &mut DecodeState) -> Result<Vec<f64>> {
        let lp = self.solver.step(self.graph, self.enc, state)?;
        Ok(self.graph.value(lp).data().to_vec())
    }

    fn advance(&mut self, state: &DecodeState, token: usize) -> Result<DecodeState> {
        self.solver
            .transition(self.graph, self.enc, state, token)?
            .ok_or(SolverError::MalformedTarget)
    }
}
