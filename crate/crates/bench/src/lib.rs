//! Shared fixtures for the criterion benchmarks in `benches/`.
//!
//! Run with `cargo bench -p dmwp-bench`.

use dmwp_core::dataio::{problem_from_text, synth_corpus, template_ids, Problem};
use dmwp_core::expr::Vocabulary;
use dmwp_core::solver::TextVocab;
use dmwp_core::{Corpus, Solver, SolverConfig};

/// The four-quantity running example with answer 15.
pub fn running_example() -> Problem {
    problem_from_text(
        "bench",
        "There are 40 students taking Chinese and math exams, 25 students passed the Chinese exam, 20 students \
         passed the math exam, 10 students failed both exams. How many students pass both exams?",
        "N2+N3-(N1-N4)",
        &Vocabulary::default_constants(),
    )
    .expect("fixture parses")
}

/// A deterministic synthetic corpus over every template.
pub fn corpus(n: usize) -> Corpus {
    synth_corpus(&template_ids(), n, 1).expect("synthetic corpus")
}

/// A freshly initialized solver at the default desk-scale dims.
pub fn solver(corpus: &Corpus) -> Solver {
    let config = SolverConfig { num_constants: corpus.constants.len(), ..SolverConfig::default() };
    Solver::new(config, TextVocab::build(&corpus.problems), 0)
}
