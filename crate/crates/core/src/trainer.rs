//! The iterative training loop: weighted solver updates from the solution
//! buffers, discriminator updates on contrast batches, and periodic buffer
//! refreshes by beam search. Also evaluation, k-fold runs and ablations.
//!
//! Epochs are numbered from 0. Within epoch `e` the phases run in order:
//! buffer refresh (when `e > 0` and `e` is a multiple of the refresh
//! period), discriminator rescoring (at the stage switch and at every
//! refresh after it), solver updates, discriminator updates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IteratorRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{contrast_batch, gen_positives, AugmentConfig, AugmentError};
use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::buffer::{self, init_buffers, BufferError, Origin, SolutionBuffer, WeightScheme};
use crate::dataio::{kfold_corpus, Corpus, DataError, Problem, SupervisionMode};
use crate::discriminator::{roc_auc, DiscConfig, DiscError, Discriminator};
use crate::expr::{Expr, Token, ANSWER_EPS};
use crate::seed::{self, Rng};
use crate::solver::{Prepared, Solver, SolverConfig, SolverError, TextVocab};
use crate::wda::{batch_augment, WdaConfig, WdaOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every solution buffer is empty; nothing to train on")]
    NoSupervision,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

type Result<T> = std::result::Result<T, TrainError>;

/// How top-k accuracy counts a problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopkMode {
    /// All of the `j` best beams reach the answer.
    All,
    /// At least one of the `j` best beams reaches the answer.
    Any,
}

impl fmt::Display for TopkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopkMode::All => "all",
            TopkMode::Any => "any",
        })
    }
}

impl FromStr for TopkMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(TopkMode::All),
            "any" => Ok(TopkMode::Any),
            other => Err(format!("unknown top-k mode `{other}` (expected all or any)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: SupervisionMode,
    pub epochs: usize,
    pub stage_switch: usize,
    pub refresh_period: usize,
    pub beam_width: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub batch_size: usize,
    /// Problems are shuffled, then sorted by length inside windows of this
    /// many problems before being cut into batches.
    pub sort_window: usize,
    pub solver: SolverConfig,
    pub disc: DiscConfig,
    pub disc_lr: f64,
    /// Problems drawn per epoch for discriminator updates (0 = all).
    pub disc_problems_per_epoch: usize,
    /// Positives drawn per problem for one discriminator update.
    pub disc_max_positives: usize,
    pub scheme: WeightScheme,
    /// Beam-search refreshes of the buffers. Off for the gold-only baseline.
    pub refresh_buffers: bool,
    /// Seed answer-only problems of a semi-weak corpus by search.
    pub use_wda: bool,
    pub wda: WdaConfig,
    pub augment: AugmentConfig,
    pub buffer_cap: Option<usize>,
    pub topk_mode: TopkMode,
    pub eps: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: SupervisionMode::Full,
            epochs: 200,
            stage_switch: 100,
            refresh_period: 5,
            beam_width: 5,
            lr: 1e-3,
            lr_halving_period: 30,
            batch_size: 16,
            sort_window: 256,
            solver: SolverConfig::default(),
            disc: DiscConfig::default(),
            disc_lr: 1e-3,
            disc_problems_per_epoch: 256,
            disc_max_positives: 4,
            scheme: WeightScheme::TwoStage,
            refresh_buffers: true,
            use_wda: false,
            wda: WdaConfig::default(),
            augment: AugmentConfig::default(),
            buffer_cap: None,
            topk_mode: TopkMode::All,
            eps: ANSWER_EPS,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.stage_switch > self.epochs {
            return bad("stage_switch must not exceed epochs");
        }
        if self.refresh_period == 0 || self.lr_halving_period == 0 {
            return bad("periods must be at least 1");
        }
        if self.beam_width == 0 || self.batch_size == 0 || self.sort_window == 0 {
            return bad("beam_width, batch_size and sort_window must be at least 1");
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.disc_max_positives == 0 {
            return bad("disc_max_positives must be at least 1");
        }
        self.augment.validate()?;
        Ok(())
    }

    /// `lr / 2^floor(epoch / period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        halved(self.lr, epoch, self.lr_halving_period)
    }

    pub fn disc_lr_at(&self, epoch: usize) -> f64 {
        halved(self.disc_lr, epoch, self.lr_halving_period)
    }

    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        self.refresh_buffers && epoch > 0 && epoch.is_multiple_of(self.refresh_period)
    }

    fn trains_disc(&self) -> bool {
        self.scheme == WeightScheme::TwoStage
    }
}

fn halved(lr: f64, epoch: usize, period: usize) -> f64 {
    lr / 2f64.powi((epoch / period) as i32)
}

/// One recorded `(s, t, a)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSample {
    pub s: f64,
    pub t: Option<f64>,
    pub a: f64,
}

/// Schedule and invariant record for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub epoch: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub uses_scores: bool,
    pub refreshed: bool,
    pub rescored: bool,
    pub added: usize,
    pub buffer_total: usize,
    /// Largest `|sum_i s_i - 1|` over the buffers trained this epoch.
    pub max_sum_dev: f64,
    /// Largest deviation of any `a_i` from the value the schedule demands.
    pub max_gate_dev: f64,
    /// Buffered equations that do not reach their answer.
    pub invalid_entries: usize,
    /// Buffers smaller than at the previous epoch.
    pub shrunk: usize,
    /// Buffers holding only model-found equations.
    pub model_only_buffers: usize,
    pub samples: Vec<WeightSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub solver_loss: f64,
    pub disc_loss: Option<f64>,
    /// Buffer size -> number of problems.
    pub buffer_sizes: BTreeMap<usize, usize>,
    /// Mean entropy of the normalized weights over non-empty buffers.
    pub weight_entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub beam_width: usize,
    pub mode: TopkMode,
    pub problems: usize,
    pub topk: Vec<TopK>,
}

impl EvalReport {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    pub eval: Option<EvalReport>,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub solver: Solver,
    pub disc: Discriminator,
    pub buffers: Vec<SolutionBuffer>,
    pub metrics: Metrics,
    pub events: Vec<EpochEvent>,
}

fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Decoded beams as `(expr, log P)` pairs plus the pooled problem vector.
fn decode_with_pooled(solver: &Solver, problem: &Problem, input: &Prepared, k: usize) -> Result<(Vec<(Expr, f64)>, Tensor)> {
    let mut g = Graph::new(solver.params());
    let enc = solver.encode(&mut g, input)?;
    let beams = solver.beam_decode(&mut g, &enc, k, Solver::max_decode_len(problem.quantities.len()))?;
    Ok((beams.into_iter().map(|h| (h.expr, h.log_prob)).collect(), g.value(enc.pooled).clone()))
}

/// Training state. Cloning it forks an independent run.
#[derive(Clone, Debug)]
pub struct Trainer<'c> {
    corpus: &'c Corpus,
    cfg: TrainConfig,
    solver: Solver,
    disc: Discriminator,
    buffers: Vec<SolutionBuffer>,
    prepared: Vec<Prepared>,
    /// Rule-closure positives of each gold equation.
    gold_positives: Vec<Option<Vec<Expr>>>,
    problem_vecs: Vec<Option<Tensor>>,
    prev_sizes: Vec<usize>,
    batch_rng: Rng,
    disc_rng: Rng,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
    events: Vec<EpochEvent>,
}

impl<'c> Trainer<'c> {
    /// Sets up buffers, models and seeds. Weak (and semi-weak with
    /// `use_wda`) corpora are searched first unless results are given.
    pub fn new(corpus: &'c Corpus, cfg: TrainConfig, search: Option<&BTreeMap<String, WdaOutcome>>) -> Result<Self> {
        cfg.validate()?;
        corpus.check_mode(cfg.mode)?;
        let needs_search = cfg.mode == SupervisionMode::Weak || (cfg.mode == SupervisionMode::SemiWeak && cfg.use_wda);
        let owned;
        let search = match (needs_search, search) {
            (false, _) => None,
            (true, Some(s)) => Some(s),
            (true, None) => {
                let wda = WdaConfig { constants: corpus.constants.clone(), ..cfg.wda.clone() };
                let (results, summary) = batch_augment(corpus, &wda, cfg.workers);
                log::info!("search seeded {} of {} answer-only problems", summary.successes, summary.problems);
                owned = results;
                Some(&owned)
            }
        };
        let buffers = init_buffers(corpus, cfg.mode, search)?;
        if buffers.iter().all(SolutionBuffer::is_empty) {
            return Err(TrainError::NoSupervision);
        }
        let solver_cfg = SolverConfig { num_constants: corpus.constants.len(), ..cfg.solver };
        let solver = Solver::new(solver_cfg, TextVocab::build(&corpus.problems), seed::derive(cfg.seed, "solver"));
        let max_q = corpus.problems.iter().map(|p| p.quantities.len()).max().unwrap_or(0);
        let disc_cfg = DiscConfig {
            problem_dim: solver_cfg.hidden_dim,
            num_constants: corpus.constants.len(),
            max_quantities: cfg.disc.max_quantities.max(max_q),
            ..cfg.disc
        };
        let disc = Discriminator::new(disc_cfg, seed::derive(cfg.seed, "disc"));
        let prepared = corpus.problems.iter().map(|p| solver.prepare(p)).collect::<std::result::Result<Vec<_>, _>>()?;
        let gold_positives = corpus
            .problems
            .iter()
            .zip(&buffers)
            .map(|(p, b)| {
                let gold = b.entries().iter().find(|e| e.origin == Origin::Gold)?;
                debug_assert_eq!(Some(&gold.expr), p.gold.as_ref());
                Some(gen_positives(&gold.expr, &cfg.augment))
            })
            .collect();
        let n = corpus.len();
        Ok(Trainer {
            corpus,
            solver,
            disc,
            prev_sizes: buffers.iter().map(SolutionBuffer::len).collect(),
            buffers,
            prepared,
            gold_positives,
            problem_vecs: vec![None; n],
            batch_rng: seed::rng(seed::derive(cfg.seed, "batches")),
            disc_rng: seed::rng(seed::derive(cfg.seed, "disc-data")),
            cfg,
            epoch: 0,
            metrics: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the weighting scheme from the next epoch on.
    pub fn set_scheme(&mut self, scheme: WeightScheme) {
        self.cfg.scheme = scheme;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn solver(&self) -> &Solver {
        &self.solver
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn buffers(&self) -> &[SolutionBuffer] {
        &self.buffers
    }

    pub fn events(&self) -> &[EpochEvent] {
        &self.events
    }

    /// Runs epochs until `epoch` (exclusive) or the configured end.
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn finish(mut self, test: Option<&Corpus>) -> Result<RunOutput> {
        self.run_until(self.cfg.epochs)?;
        let eval = match test {
            Some(t) => Some(evaluate(&self.solver, t, self.cfg.beam_width, self.cfg.topk_mode, self.cfg.workers)?),
            None => None,
        };
        Ok(RunOutput {
            solver: self.solver,
            disc: self.disc,
            buffers: self.buffers,
            metrics: Metrics { epochs: self.metrics, eval },
            events: self.events,
        })
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let e = self.epoch;
        let started = std::time::Instant::now();
        let refreshed = self.cfg.is_refresh_epoch(e);
        let added = if refreshed { self.refresh(e)? } else { 0 };
        let rescored = self.cfg.trains_disc() && e >= self.cfg.stage_switch && (e == self.cfg.stage_switch || refreshed);
        if rescored {
            self.rescore()?;
        }
        let lr = self.cfg.lr_at(e);
        let disc_lr = self.cfg.disc_lr_at(e);
        let step = self.solver_epoch(e, lr)?;
        let disc_loss = if self.cfg.trains_disc() { Some(self.disc_epoch(disc_lr)?) } else { None };

        let constants = &self.corpus.constants;
        let mut invalid_entries = 0;
        let mut model_only_buffers = 0;
        let mut buffer_sizes = BTreeMap::new();
        for (p, b) in self.corpus.problems.iter().zip(&self.buffers) {
            invalid_entries += b.entries().iter().filter(|x| !p.is_solution(&x.expr, constants, self.cfg.eps)).count();
            if !b.is_empty() && b.entries().iter().all(|x| matches!(x.origin, Origin::Model { .. })) {
                model_only_buffers += 1;
            }
            *buffer_sizes.entry(b.len()).or_insert(0) += 1;
        }
        let shrunk = self.buffers.iter().zip(&self.prev_sizes).filter(|(b, &n)| b.len() < n).count();
        self.prev_sizes = self.buffers.iter().map(SolutionBuffer::len).collect();
        let entropies: Vec<f64> = self.buffers.iter().filter(|b| !b.is_empty()).map(weight_entropy).collect();
        let weight_entropy = entropies.iter().sum::<f64>() / entropies.len().max(1) as f64;

        log::info!(
            "epoch {e}: loss {:.4} disc {:?} lr {lr} entries {} ({:.1}s)",
            step.loss,
            disc_loss,
            self.prev_sizes.iter().sum::<usize>(),
            started.elapsed().as_secs_f64()
        );
        self.metrics.push(EpochMetrics { epoch: e, solver_loss: step.loss, disc_loss, buffer_sizes, weight_entropy });
        self.events.push(EpochEvent {
            epoch: e,
            lr,
            disc_lr,
            uses_scores: step.uses_scores,
            refreshed,
            rescored,
            added,
            buffer_total: self.prev_sizes.iter().sum(),
            max_sum_dev: step.max_sum_dev,
            max_gate_dev: step.max_gate_dev,
            invalid_entries,
            shrunk,
            model_only_buffers,
            samples: step.samples,
        });
        self.epoch += 1;
        Ok(())
    }

    fn batches(&mut self, active: Vec<usize>) -> Vec<Vec<usize>> {
        let mut order = active;
        order.shuffle(&mut self.batch_rng);
        let mut out = Vec::new();
        for window in order.chunks_mut(self.cfg.sort_window) {
            window.sort_by_key(|&i| self.prepared[i].ids.len());
            out.extend(window.chunks(self.cfg.batch_size).map(<[usize]>::to_vec));
        }
        out
    }

    fn solver_epoch(&mut self, epoch: usize, lr: f64) -> Result<StepSummary> {
        let active: Vec<usize> = (0..self.buffers.len()).filter(|&i| !self.buffers[i].is_empty()).collect();
        let batches = self.batches(active);
        let mut summary = StepSummary::default();
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches {
            let grads = {
                let mut g = Graph::new(self.solver.params());
                let inputs: Vec<&Prepared> = batch.iter().map(|&i| &self.prepared[i]).collect();
                let encs = self.solver.encode_batch(&mut g, &inputs)?;
                let mut terms = Vec::with_capacity(batch.len());
                for (&i, enc) in batch.iter().zip(&encs) {
                    let buf = &mut self.buffers[i];
                    let tokens: Vec<Vec<Token>> = buf.entries().iter().map(|x| x.expr.to_prefix()).collect();
                    let lps = tokens
                        .iter()
                        .map(|t| self.solver.sequence_log_prob(&mut g, enc, t))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let values: Vec<f64> = lps.iter().map(|&v| g.value(v).item()).collect();
                    let update = buf.compute_weights(&values, epoch, self.cfg.stage_switch, self.cfg.scheme)?;
                    summary.observe(buf, update.uses_scores, self.cfg.scheme);
                    let mut parts = Vec::with_capacity(lps.len());
                    for (&lp, &a) in lps.iter().zip(&update.weights) {
                        if a != 0.0 {
                            parts.push(g.scale(lp, -a)?);
                        }
                    }
                    if !parts.is_empty() {
                        let row = g.concat(&parts)?;
                        terms.push(g.sum(row)?);
                    }
                    self.problem_vecs[i] = Some(g.value(enc.pooled).clone());
                }
                if terms.is_empty() {
                    continue;
                }
                let row = g.concat(&terms)?;
                let sum = g.sum(row)?;
                let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
                total += g.value(sum).item();
                count += batch.len();
                g.backward(loss)?
            };
            self.solver.params_mut().adam_step(&grads, lr)?;
        }
        summary.loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(summary)
    }

    /// Positives for a discriminator update on problem `i`.
    fn disc_positives(&mut self, i: usize) -> Vec<Expr> {
        let max = self.cfg.disc_max_positives;
        if let Some(all) = &self.gold_positives[i] {
            return all.iter().cloned().choose_multiple(&mut self.disc_rng, max);
        }
        // Without a gold equation the single best-weighted buffered
        // solution is the positive.
        self.buffers[i]
            .entries()
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight))
            .map(|e| vec![e.expr.clone()])
            .unwrap_or_default()
    }

    fn disc_epoch(&mut self, lr: f64) -> Result<f64> {
        let eligible: Vec<usize> =
            (0..self.buffers.len()).filter(|&i| !self.buffers[i].is_empty() && self.problem_vecs[i].is_some()).collect();
        let mut chosen = if self.cfg.disc_problems_per_epoch == 0 || self.cfg.disc_problems_per_epoch >= eligible.len() {
            eligible
        } else {
            eligible.into_iter().choose_multiple(&mut self.disc_rng, self.cfg.disc_problems_per_epoch)
        };
        chosen.shuffle(&mut self.disc_rng);
        let mut total = 0.0;
        let mut count = 0;
        for group in chosen.chunks(self.cfg.batch_size) {
            let mut batches = Vec::new();
            for &i in group {
                let positives = self.disc_positives(i);
                let p = &self.corpus.problems[i];
                match contrast_batch(p, &positives, &self.corpus.constants, self.cfg.eps, &self.cfg.augment, &mut self.disc_rng) {
                    Ok(b) => batches.push((i, b)),
                    Err(AugmentError::ExhaustedRetries { .. } | AugmentError::NoPositives(_)) => {
                        log::debug!("no contrast batch for {}", p.id);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if batches.is_empty() {
                continue;
            }
            let grads = {
                let mut g = Graph::new(self.disc.params());
                let mut terms = Vec::with_capacity(batches.len());
                for (i, b) in &batches {
                    let z = g.constant(self.problem_vecs[*i].clone().expect("eligible problems have vectors"));
                    let l = self.disc.contrastive_loss(&mut g, z, b)?;
                    let n = (b.positives.len() + b.negatives.len()) as f64;
                    terms.push(g.scale(l, 1.0 / n)?);
                }
                let row = g.concat(&terms)?;
                let sum = g.sum(row)?;
                total += g.value(sum).item();
                count += batches.len();
                let loss = g.scale(sum, 1.0 / batches.len() as f64)?;
                g.backward(loss)?
            };
            self.disc.params_mut().adam_step(&grads, lr)?;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Beam-decodes every training problem and appends new correct
    /// equations. Returns how many were added.
    fn refresh(&mut self, epoch: usize) -> Result<usize> {
        let idx: Vec<usize> = (0..self.corpus.len()).collect();
        let (solver, corpus, prepared, k) = (&self.solver, self.corpus, &self.prepared, self.cfg.beam_width);
        let decoded = par_map(&idx, self.cfg.workers, |&i| decode_with_pooled(solver, &corpus.problems[i], &prepared[i], k));
        let mut added = 0;
        for (i, result) in decoded.into_iter().enumerate() {
            let (beams, pooled) = result?;
            let p = &self.corpus.problems[i];
            added += self.buffers[i].update_from_beams(p, &beams, epoch, &self.corpus.constants, self.cfg.eps);
            if let Some(cap) = self.cfg.buffer_cap {
                self.buffers[i].enforce_cap(cap);
            }
            self.problem_vecs[i] = Some(pooled);
        }
        Ok(added)
    }

    /// Scores every buffered equation with the current discriminator.
    fn rescore(&mut self) -> Result<()> {
        for i in 0..self.buffers.len() {
            if self.buffers[i].is_empty() {
                continue;
            }
            let z = match &self.problem_vecs[i] {
                Some(z) => z.clone(),
                None => {
                    let mut g = Graph::new(self.solver.params());
                    let enc = self.solver.encode(&mut g, &self.prepared[i])?;
                    g.value(enc.pooled).clone()
                }
            };
            let tokens: Vec<Vec<Token>> = self.buffers[i].entries().iter().map(|e| e.expr.to_prefix()).collect();
            let refs: Vec<&[Token]> = tokens.iter().map(Vec::as_slice).collect();
            let scores = self.disc.score_values(&z, &refs)?;
            self.buffers[i].set_scores(&scores)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct StepSummary {
    loss: f64,
    uses_scores: bool,
    max_sum_dev: f64,
    max_gate_dev: f64,
    samples: Vec<WeightSample>,
}

const SAMPLES_PER_EPOCH: usize = 8;

impl StepSummary {
    fn observe(&mut self, buf: &SolutionBuffer, uses_scores: bool, scheme: WeightScheme) {
        self.uses_scores |= uses_scores;
        let sum: f64 = buf.entries().iter().map(|e| e.s).sum();
        self.max_sum_dev = self.max_sum_dev.max((sum - 1.0).abs());
        for e in buf.entries() {
            let want = match (scheme, uses_scores) {
                (WeightScheme::Uniform, _) => 1.0,
                (_, true) => (e.s + e.score.unwrap_or(f64::NAN)) / 2.0,
                (_, false) => e.s,
            };
            let dev = (e.weight - want).abs();
            self.max_gate_dev = self.max_gate_dev.max(if dev.is_nan() { f64::INFINITY } else { dev });
            if self.samples.len() < SAMPLES_PER_EPOCH && buf.len() > 1 {
                self.samples.push(WeightSample { s: e.s, t: e.score, a: e.weight });
            }
        }
    }
}

fn weight_entropy(buf: &SolutionBuffer) -> f64 {
    let z: f64 = buf.entries().iter().map(|e| e.weight).sum();
    if z <= 0.0 {
        return 0.0;
    }
    -buf.entries()
        .iter()
        .map(|e| e.weight / z)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Trains on `train` per `cfg` and evaluates on `test` when given.
pub fn run(train: &Corpus, cfg: &TrainConfig, test: Option<&Corpus>) -> Result<RunOutput> {
    Trainer::new(train, cfg.clone(), None)?.finish(test)
}

/// The `k` used by the report columns: 1, 3, 5 up to the beam width, and
/// the beam width itself.
pub fn report_ks(beam_width: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 3, 5].into_iter().filter(|&k| k <= beam_width).collect();
    if !ks.contains(&beam_width) {
        ks.push(beam_width);
    }
    ks
}

/// Whether each problem's ordered beams reach its answer.
pub fn beam_correctness(solver: &Solver, test: &Corpus, k: usize, workers: usize) -> Result<Vec<Vec<bool>>> {
    let items: Vec<&Problem> = test.problems.iter().collect();
    par_map(&items, workers, |p| -> Result<Vec<bool>> {
        let beams = solver.decode_problem(p, k)?;
        Ok(beams.iter().map(|h| p.is_solution(&h.expr, &test.constants, ANSWER_EPS)).collect())
    })
    .into_iter()
    .collect()
}

/// Top-`j` accuracy from per-problem beam correctness.
pub fn topk_accuracy(correct: &[Vec<bool>], j: usize, mode: TopkMode) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    let hits = correct
        .iter()
        .filter(|c| match mode {
            TopkMode::All => c.len() >= j && c[..j].iter().all(|&x| x),
            TopkMode::Any => c.iter().take(j).any(|&x| x),
        })
        .count();
    hits as f64 / correct.len() as f64
}

pub fn evaluate(solver: &Solver, test: &Corpus, k: usize, mode: TopkMode, workers: usize) -> Result<EvalReport> {
    if k == 0 {
        return Err(TrainError::Config("beam width must be at least 1".into()));
    }
    let correct = beam_correctness(solver, test, k, workers)?;
    Ok(EvalReport {
        beam_width: k,
        mode,
        problems: test.len(),
        topk: report_ks(k).into_iter().map(|j| TopK { k: j, accuracy: topk_accuracy(&correct, j, mode) }).collect(),
    })
}

/// Held-out discriminator quality: positives are rule variants of each gold
/// equation, negatives their disturbances.
pub fn disc_auc(solver: &Solver, disc: &Discriminator, test: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = seed::rng(seed::derive(cfg.seed, "disc-eval"));
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for p in test.problems.iter().filter(|p| p.gold.is_some()) {
        let positives = gen_positives(p.gold.as_ref().expect("filtered"), &cfg.augment);
        let positives: Vec<Expr> = positives.into_iter().choose_multiple(&mut rng, cfg.disc_max_positives);
        let Ok(batch) = contrast_batch(p, &positives, &test.constants, cfg.eps, &cfg.augment, &mut rng) else { continue };
        let mut g = Graph::new(solver.params());
        let enc = solver.encode(&mut g, &solver.prepare(p)?)?;
        let z = g.value(enc.pooled).clone();
        let score = |list: &[Expr]| -> Result<Vec<f64>> {
            let toks: Vec<Vec<Token>> = list.iter().map(Expr::to_prefix).collect();
            let refs: Vec<&[Token]> = toks.iter().map(Vec::as_slice).collect();
            Ok(disc.score_values(&z, &refs)?)
        };
        pos.extend(score(&batch.positives)?);
        neg.extend(score(&batch.negatives)?);
    }
    Ok(roc_auc(&pos, &neg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfoldReport {
    pub folds: Vec<FoldResult>,
    /// Mean accuracy over folds for each `k`.
    pub mean: Vec<TopK>,
}

fn mean_topk(reports: &[&EvalReport]) -> Vec<TopK> {
    let Some(first) = reports.first() else { return Vec::new() };
    first
        .topk
        .iter()
        .map(|t| TopK {
            k: t.k,
            accuracy: reports.iter().map(|r| r.accuracy(t.k).unwrap_or(0.0)).sum::<f64>() / reports.len() as f64,
        })
        .collect()
}

/// Trains and evaluates once per fold. With `out`, each fold's run is
/// written to `out/fold<i>/` and the summary to `out/kfold.{json,csv}`.
pub fn run_kfold(corpus: &Corpus, cfg: &TrainConfig, folds: usize, out: Option<&Path>) -> Result<KfoldReport> {
    let splits = kfold_corpus(corpus, folds, seed::derive(cfg.seed, "folds"))?;
    let mut results = Vec::with_capacity(folds);
    for (f, (train, test)) in splits.iter().enumerate() {
        let fold_cfg = TrainConfig { seed: seed::derive_index(cfg.seed, "fold", f as u64), ..cfg.clone() };
        let output = run(train, &fold_cfg, Some(test))?;
        if let Some(dir) = out {
            write_run(&dir.join(format!("fold{f}")), &output)?;
        }
        let eval = output.metrics.eval.expect("evaluated on the fold's test split");
        log::info!("fold {f}: {:?}", eval.topk);
        results.push(FoldResult { fold: f, train_size: train.len(), test_size: test.len(), eval });
    }
    let mean = mean_topk(&results.iter().map(|r| &r.eval).collect::<Vec<_>>());
    let report = KfoldReport { folds: results, mean };
    if let Some(dir) = out {
        write_json(&dir.join("kfold.json"), &report)?;
        write_kfold_csv(&dir.join("kfold.csv"), &report)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two-stage weighting per the full method.
    FullMethod,
    /// Model probabilities only, at every epoch.
    OneStage,
    /// Every buffered equation weighs 1.
    NonProbabilistic,
    /// Plain maximum likelihood on the gold equation, no buffer growth.
    GoldOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FullMethod, Variant::OneStage, Variant::NonProbabilistic, Variant::GoldOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullMethod => "full_method",
            Variant::OneStage => "one_stage",
            Variant::NonProbabilistic => "non_probabilistic",
            Variant::GoldOnly => "gold_only",
        }
    }

    /// The configuration a fresh run of this variant uses.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::FullMethod => c.scheme = WeightScheme::TwoStage,
            Variant::OneStage => c.scheme = WeightScheme::ModelOnly,
            Variant::NonProbabilistic => c.scheme = WeightScheme::Uniform,
            Variant::GoldOnly => {
                c.scheme = WeightScheme::Uniform;
                c.refresh_buffers = false;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Runs each variant and evaluates it on `test`. The full method and the
/// one-stage variant are identical up to the stage switch, so when both
/// are requested the one-stage run forks from the full run there.
pub fn ablate(train: &Corpus, test: &Corpus, cfg: &TrainConfig, variants: &[Variant]) -> Result<Vec<(Variant, RunOutput)>> {
    let mut out = Vec::new();
    let fork = variants.contains(&Variant::FullMethod) && variants.contains(&Variant::OneStage);
    let mut forked = None;
    for &v in variants {
        if fork && v == Variant::OneStage {
            continue;
        }
        let mut t = Trainer::new(train, v.apply(cfg), None)?;
        if fork && v == Variant::FullMethod {
            t.run_until(cfg.stage_switch)?;
            let mut branch = t.clone();
            branch.set_scheme(WeightScheme::ModelOnly);
            forked = Some(branch.finish(Some(test))?);
        }
        out.push((v, t.finish(Some(test))?));
    }
    if let Some(o) = forked {
        out.push((Variant::OneStage, o));
    }
    out.sort_by_key(|(v, _)| variants.iter().position(|x| x == v));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Output files

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("metrics serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    solver_loss: f64,
    disc_loss: Option<f64>,
    weight_entropy: f64,
    buffer_entries: usize,
    max_buffer: usize,
}

pub fn write_metrics_csv(path: &Path, metrics: &Metrics) -> Result<()> {
    let csv_err = |source| TrainError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for m in &metrics.epochs {
        w.serialize(EpochRow {
            epoch: m.epoch,
            solver_loss: m.solver_loss,
            disc_loss: m.disc_loss,
            weight_entropy: m.weight_entropy,
            buffer_entries: m.buffer_sizes.iter().map(|(s, n)| s * n).sum(),
            max_buffer: m.buffer_sizes.keys().next_back().copied().unwrap_or(0),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_kfold_csv(path: &Path, report: &KfoldReport) -> Result<()> {
    let csv_err = |source| TrainError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["fold".to_string()];
    header.extend(report.mean.iter().map(|t| format!("top{}", t.k)));
    w.write_record(&header).map_err(csv_err)?;
    let mut rows: Vec<(String, &Vec<TopK>)> = report.folds.iter().map(|f| (f.fold.to_string(), &f.eval.topk)).collect();
    rows.push(("mean".into(), &report.mean));
    for (name, topk) in rows {
        let mut rec = vec![name];
        rec.extend(topk.iter().map(|t| format!("{:.6}", t.accuracy)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_events(path: &Path, events: &[EpochEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for e in events {
        writeln!(w, "{}", serde_json::to_string(e).expect("event serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes metrics (JSON and CSV), the schedule log, buffers and both
/// checkpoints into `dir`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("metrics.json"), &output.metrics)?;
    write_metrics_csv(&dir.join("metrics.csv"), &output.metrics)?;
    write_events(&dir.join("events.jsonl"), &output.events)?;
    buffer::write_jsonl(&dir.join("buffers.jsonl"), &output.buffers)?;
    output.solver.save(&dir.join("solver.ckpt"))?;
    output.disc.save(&dir.join("disc.ckpt"))?;
    Ok(())
}
