//! Solution discriminator: a bidirectional GRU over a solution's prefix
//! tokens and a bilinear score against the problem's pooled encoding,
//! `t = sigmoid(z_w · X_t · z_s)`, trained with binary cross-entropy on
//! positive (equivalent) and negative (disturbed) solutions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::ContrastBatch;
use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::expr::{Op, Token};
use crate::rnn::BiGru;
use crate::seed;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("token {0} is outside the discriminator vocabulary")]
    UnknownToken(Token),
    #[error("empty solution")]
    EmptySolution,
    #[error("contrast batch for `{0}` needs at least one positive and one negative")]
    IncompleteBatch(String),
    #[error("problem vector has shape {got:?}, expected [1, {expected}]")]
    ProblemShape { got: [usize; 2], expected: usize },
}

type Result<T> = std::result::Result<T, DiscError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the problem vector (the solver's hidden size).
    pub problem_dim: usize,
    pub num_constants: usize,
    /// Quantities `N1..N{max}` have embeddings.
    pub max_quantities: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { embed_dim: 16, hidden_dim: 32, problem_dim: 64, num_constants: 2, max_quantities: 16 }
    }
}

/// Per-token states and their mean for one solution.
#[derive(Clone, Copy, Debug)]
pub struct SolutionEncoding {
    pub states: Var,
    pub mean: Var,
}

/// The discriminator's parameters φ.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    params: ParamStore,
    rnn: BiGru,
    bilinear: ParamId,
}

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Discriminator {
        let mut rng = seed::rng(seed::derive(seed, "disc-init"));
        let mut p = ParamStore::new();
        let vocab = Op::ALL.len() + config.num_constants + config.max_quantities;
        let rnn = BiGru::new(&mut p, "disc.enc", vocab, config.embed_dim, config.hidden_dim, &mut rng);
        let bilinear = p.add_uniform("disc.bilinear", config.problem_dim, config.hidden_dim, config.problem_dim, &mut rng);
        Discriminator { config, params: p, rnn, bilinear }
    }

    pub fn config(&self) -> DiscConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bilinear_id(&self) -> ParamId {
        self.bilinear
    }

    pub fn token_id(&self, token: Token) -> Result<usize> {
        let c = self.config.num_constants;
        match token {
            Token::Op(op) => Ok(op.index()),
            Token::Constant(j) if j < c => Ok(Op::ALL.len() + j),
            Token::Quantity(i) if i < self.config.max_quantities => Ok(Op::ALL.len() + c + i),
            t => Err(DiscError::UnknownToken(t)),
        }
    }

    pub fn encode_solutions(&self, g: &mut Graph, solutions: &[&[Token]]) -> Result<Vec<SolutionEncoding>> {
        let ids = solutions
            .iter()
            .map(|s| {
                if s.is_empty() {
                    return Err(DiscError::EmptySolution);
                }
                s.iter().map(|&t| self.token_id(t)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let seqs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        let states = self.rnn.encode_batch(g, &seqs)?;
        states
            .into_iter()
            .map(|s| Ok(SolutionEncoding { states: s, mean: g.mean_rows(s)? }))
            .collect()
    }

    pub fn encode_solution(&self, g: &mut Graph, tokens: &[Token]) -> Result<SolutionEncoding> {
        Ok(self.encode_solutions(g, &[tokens])?.remove(0))
    }

    /// The bilinear form `z_w · X_t · z_s` before the sigmoid.
    pub fn logit(&self, g: &mut Graph, problem: Var, solution: &SolutionEncoding) -> Result<Var> {
        let shape = g.shape(problem);
        if shape != [1, self.config.problem_dim] {
            return Err(DiscError::ProblemShape { got: shape, expected: self.config.problem_dim });
        }
        let x = g.param(self.bilinear);
        let zx = g.matmul(problem, x)?;
        Ok(g.matmul_nt(zx, solution.mean)?)
    }

    pub fn score(&self, g: &mut Graph, problem: Var, solution: &SolutionEncoding) -> Result<Var> {
        let l = self.logit(g, problem, solution)?;
        Ok(g.sigmoid(l)?)
    }

    /// `-Σ_pos log t - Σ_neg log(1 - t)`, computed from logits stably.
    pub fn contrastive_loss(&self, g: &mut Graph, problem: Var, batch: &ContrastBatch) -> Result<Var> {
        if batch.positives.is_empty() || batch.negatives.is_empty() {
            return Err(DiscError::IncompleteBatch(batch.problem_id.clone()));
        }
        let tokens: Vec<Vec<Token>> = batch.positives.iter().chain(&batch.negatives).map(|e| e.to_prefix()).collect();
        let refs: Vec<&[Token]> = tokens.iter().map(Vec::as_slice).collect();
        let encs = self.encode_solutions(g, &refs)?;
        let zero = g.constant(Tensor::scalar(0.0));
        let mut terms = Vec::with_capacity(encs.len());
        for (i, enc) in encs.iter().enumerate() {
            let l = self.logit(g, problem, enc)?;
            // log_softmax([l, 0]) = [log σ(l), log(1 - σ(l))]
            let pair = g.concat(&[l, zero])?;
            let lp = g.log_softmax(pair)?;
            let which = if i < batch.positives.len() { 0 } else { 1 };
            terms.push(g.pick(lp, which)?);
        }
        let row = g.concat(&terms)?;
        let total = g.sum(row)?;
        Ok(g.scale(total, -1.0)?)
    }

    /// Scores of several solutions against a fixed problem vector.
    pub fn score_values(&self, problem: &Tensor, solutions: &[&[Token]]) -> Result<Vec<f64>> {
        if solutions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let z = g.constant(problem.clone());
        let encs = self.encode_solutions(&mut g, solutions)?;
        encs.iter()
            .map(|e| {
                let t = self.score(&mut g, z, e)?;
                Ok(g.value(t).item())
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load(config: DiscConfig, path: &Path) -> Result<Discriminator> {
        let mut d = Discriminator::new(config, 0);
        d.params.load_values_from(&ParamStore::load(path)?)?;
        Ok(d)
    }
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = positives.iter().map(|&s| (s, true)).chain(negatives.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with average ranks over ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += avg_rank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    fn small() -> Discriminator {
        Discriminator::new(DiscConfig { embed_dim: 4, hidden_dim: 6, problem_dim: 5, num_constants: 2, max_quantities: 4 }, 1)
    }

    #[test]
    fn shapes_and_range() {
        let d = small();
        let mut g = Graph::new(d.params());
        let toks = [Token::Op(Op::Add), Token::Quantity(0), Token::Quantity(1)];
        let e = d.encode_solution(&mut g, &toks).unwrap();
        assert_eq!(g.shape(e.states), [3, 6]);
        let z = g.constant(Tensor::row(&[0.3, -1.0, 2.0, 0.5, 0.1]));
        let t = d.score(&mut g, z, &e).unwrap();
        let v = g.value(t).item();
        assert!(v > 0.0 && v < 1.0);
        assert!(matches!(d.token_id(Token::Quantity(4)), Err(DiscError::UnknownToken(_))));
        let wrong = g.constant(Tensor::row(&[1.0]));
        assert!(matches!(d.score(&mut g, wrong, &e), Err(DiscError::ProblemShape { .. })));
    }

    #[test]
    fn zero_bilinear_scores_one_half() {
        let mut d = small();
        let id = d.bilinear_id();
        d.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let toks = [Token::Quantity(2)];
        let s = d.score_values(&Tensor::row(&[1.0; 5]), &[&toks]).unwrap();
        assert_eq!(s, vec![0.5]);
        let batch = ContrastBatch {
            problem_id: "p".into(),
            positives: vec![Expr::Quantity(0)],
            negatives: vec![Expr::Quantity(1), Expr::Quantity(2)],
        };
        let mut g = Graph::new(d.params());
        let z = g.constant(Tensor::row(&[1.0; 5]));
        let l = d.contrastive_loss(&mut g, z, &batch).unwrap();
        assert!((g.value(l).item() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
        assert_eq!(roc_auc(&[0.1], &[0.9]), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.5]), 0.5);
        assert!((roc_auc(&[0.3, 0.7], &[0.5]) - 0.5).abs() < 1e-15);
    }
}
