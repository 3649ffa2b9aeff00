//! Core of the dmwp training framework: expression handling, dataset
//! ingestion, weak-supervision search, solution augmentation, a small
//! reverse-mode autodiff engine, the tree-decoding solver, the solution
//! discriminator, per-problem solution buffers and the iterative trainer.

pub mod augment;
pub mod autodiff;
pub mod buffer;
pub mod dataio;
pub mod discriminator;
pub mod expr;
pub mod rnn;
pub mod seed;
pub mod solver;
pub mod trainer;
pub mod wda;

pub use augment::{AugmentConfig, ContrastBatch};
pub use buffer::{SolutionBuffer, WeightScheme};
pub use dataio::{Corpus, Problem, SupervisionMode};
pub use discriminator::{DiscConfig, Discriminator};
pub use expr::{Expr, NumberMapping, Op, Token, Vocabulary};
pub use solver::{Solver, SolverConfig};
pub use trainer::{EvalReport, Metrics, TopkMode, TrainConfig, Variant};
pub use wda::{WdaConfig, WdaOutcome};
