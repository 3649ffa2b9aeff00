//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dmwp_core::augment::{contrast_batch, gen_positives, AugmentError};
use dmwp_core::buffer::{self, BufferError};
use dmwp_core::dataio::{self, convert_legacy, parse_record, synth_corpus, DataError, Record};
use dmwp_core::expr::Vocabulary;
use dmwp_core::trainer::{self, evaluate, run, run_kfold, write_json, write_run, TrainError};
use dmwp_core::wda::{batch_augment, WdaStatus};
use dmwp_core::{seed, AugmentConfig, Corpus, EvalReport, Solver, TrainConfig, Variant, WdaConfig};
use serde::Serialize;

use crate::{
    AblateArgs, AugmentArgs, Cli, Command, ConvertArgs, EvalArgs, Failure, InspectArgs, KfoldArgs, SynthArgs,
    TrainArgs, TrainFlags, WdaArgs,
};

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn classify(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => usage(e),
        TrainError::Data(_) | TrainError::NoSupervision | TrainError::Buffer(BufferError::Mode(_)) => data(e),
        _ => runtime(e),
    }
}

struct Globals {
    seed: Option<u64>,
    workers: Option<usize>,
    config: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> Outcome {
    let g = Globals { seed: cli.seed, workers: cli.workers, config: cli.config };
    match cli.command {
        Command::Synth(a) => synth(&g, a),
        Command::Wda(a) => wda(&g, a),
        Command::Augment(a) => augment(&g, a),
        Command::Train(a) => train(&g, a),
        Command::Eval(a) => eval(&g, a),
        Command::Kfold(a) => kfold(&g, a),
        Command::Ablate(a) => ablate(&g, a),
        Command::InspectBuffer(a) => inspect(a),
        Command::Convert(a) => convert(a),
    }
}

fn load_corpus(path: &Path) -> Outcome<Corpus> {
    let (corpus, report) = dataio::load(path, &Vocabulary::default_constants()).map_err(data)?;
    for r in &report.rejected {
        log::warn!("{}: line {} ({}): {}", path.display(), r.line, r.id, r.reason);
    }
    if corpus.is_empty() {
        return Err(data(anyhow!("{}: no usable problems", path.display())));
    }
    log::info!("{}: {} problems, {} rejected", path.display(), corpus.len(), report.rejected.len());
    Ok(corpus)
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(runtime)?;
    Ok(BufWriter::new(f))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Outcome {
    let mut w = create(path)?;
    for item in items {
        let line = serde_json::to_string(&item).map_err(runtime)?;
        writeln!(w, "{line}").map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

/// Defaults, then the config file, then flags (clap has already merged
/// environment variables into the flags). The mode falls back to the
/// corpus's own mode when neither source sets it, and the stage switch to
/// half the epoch count.
fn build_config(g: &Globals, flags: &TrainFlags, corpus: &Corpus) -> Outcome<TrainConfig> {
    let (mut cfg, mode_in_file, switch_in_file) = match &g.config {
        None => (TrainConfig::default(), false, false),
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)?;
            let has_mode = value.get("mode").is_some();
            let has_switch = value.get("stage_switch").is_some();
            let cfg = serde_json::from_value(value).with_context(|| format!("in {}", path.display())).map_err(usage)?;
            (cfg, has_mode, has_switch)
        }
    };
    if !mode_in_file {
        cfg.mode = corpus.stats().mode;
    }
    if let Some(v) = flags.mode {
        cfg.mode = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    match flags.stage_switch {
        Some(v) => cfg.stage_switch = v,
        // Unset: the switch sits halfway through training.
        None if !switch_in_file => cfg.stage_switch = cfg.epochs / 2,
        None => {}
    }
    if let Some(v) = flags.refresh_period {
        cfg.refresh_period = v;
    }
    if let Some(v) = flags.beam {
        cfg.beam_width = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.lr_halving {
        cfg.lr_halving_period = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.embed_dim {
        cfg.solver.embed_dim = v;
    }
    if let Some(v) = flags.hidden_dim {
        cfg.solver.hidden_dim = v;
    }
    if let Some(v) = flags.disc_lr {
        cfg.disc_lr = v;
    }
    if let Some(v) = flags.max_iter {
        cfg.wda.max_iterations = v;
    }
    if flags.use_wda {
        cfg.use_wda = true;
    }
    if let Some(v) = flags.topk_mode {
        cfg.topk_mode = v;
    }
    if flags.buffer_cap.is_some() {
        cfg.buffer_cap = flags.buffer_cap;
    }
    if let Some(v) = flags.lambda {
        cfg.augment.lambda = v;
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.workers {
        cfg.workers = v;
    }
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn print_eval(label: &str, report: &EvalReport) {
    let cells: Vec<String> = report.topk.iter().map(|t| format!("top{} {:.4}", t.k, t.accuracy)).collect();
    println!("{label}: {} ({} problems, beam {}, {})", cells.join("  "), report.problems, report.beam_width, report.mode);
}

fn synth(g: &Globals, a: SynthArgs) -> Outcome {
    if !(0.0..=1.0).contains(&a.answer_only) {
        return Err(usage(anyhow!("--answer-only must lie in [0, 1], got {}", a.answer_only)));
    }
    let seed = g.seed.unwrap_or(0);
    let ids: Vec<&str> = a.templates.iter().map(String::as_str).collect();
    let corpus = synth_corpus(&ids, a.n, seed).map_err(|e| match e {
        DataError::UnknownTemplate(_) | DataError::EmptyRequest => usage(e),
        e => data(e),
    })?;
    let corpus = if a.answer_only > 0.0 {
        corpus.into_semi_weak(|i, _| {
            let u = (seed::derive_index(seed, "answer-only", i as u64) >> 11) as f64 / (1u64 << 53) as f64;
            u >= a.answer_only
        })
    } else {
        corpus
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    corpus.write_jsonl(&a.out).map_err(runtime)?;
    let s = corpus.stats();
    println!(
        "wrote {} problems ({} with equations, {} answer-only, {}) to {}",
        s.total,
        s.with_equation,
        s.answer_only,
        s.mode,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct WdaLine {
    id: String,
    status: WdaStatus,
    equation: Option<String>,
    with_values: Option<String>,
    iterations: usize,
    layer: usize,
}

fn wda(g: &Globals, a: WdaArgs) -> Outcome {
    let corpus = load_corpus(&a.input)?;
    let corpus = if a.all { corpus.into_weak() } else { corpus };
    let mut cfg = WdaConfig::with_constants(&corpus.constants);
    if let Some(m) = a.max_iter {
        if m == 0 {
            return Err(usage(anyhow!("--max-iter must be at least 1")));
        }
        cfg.max_iterations = m;
    }
    let (results, summary) = batch_augment(&corpus, &cfg, g.workers.unwrap_or(1));
    let lines = corpus.problems.iter().filter_map(|p| {
        let o = results.get(&p.id)?;
        let vocab = p.vocab(&corpus.constants);
        Some(WdaLine {
            id: p.id.clone(),
            status: o.status,
            equation: o.solution.as_ref().map(|e| e.to_infix(&vocab)),
            with_values: o.solution.as_ref().map(|e| dataio::equation_with_values(p, e, &corpus.constants)),
            iterations: o.iterations,
            layer: o.layer,
        })
    });
    write_lines(&a.out, lines)?;
    println!(
        "searched {} problems: {} solved ({:.1}%), mean {:.1} iterations, layers {:?}",
        summary.problems,
        summary.successes,
        100.0 * summary.success_rate,
        summary.mean_iterations,
        summary.layer_histogram
    );
    Ok(())
}

fn augment(g: &Globals, a: AugmentArgs) -> Outcome {
    let corpus = load_corpus(&a.input)?;
    let mut cfg = AugmentConfig { seed: g.seed.unwrap_or(0), ..AugmentConfig::default() };
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.max_positives {
        cfg.max_positive_variants = v;
    }
    if let Some(v) = a.negatives {
        cfg.negatives_per_positive = v;
    }
    cfg.validate().map_err(usage)?;
    let mut records = Vec::new();
    let (mut positives, mut negatives, mut skipped) = (0, 0, 0);
    for (i, p) in corpus.problems.iter().enumerate() {
        let Some(gold) = &p.gold else { continue };
        let mut rng = seed::rng(seed::derive_index(cfg.seed, "augment", i as u64));
        let variants = gen_positives(gold, &cfg);
        match contrast_batch(p, &variants, &corpus.constants, dmwp_core::expr::ANSWER_EPS, &cfg, &mut rng) {
            Ok(batch) => {
                positives += batch.positives.len();
                negatives += batch.negatives.len();
                records.push(batch.to_record(p, &corpus.constants));
            }
            Err(e @ (AugmentError::ExhaustedRetries { .. } | AugmentError::NoPositives(_))) => {
                log::warn!("{e}");
                skipped += 1;
            }
            Err(e) => return Err(runtime(e)),
        }
    }
    write_lines(&a.out, &records)?;
    println!(
        "{} problems: {positives} positives, {negatives} negatives, {skipped} skipped",
        records.len()
    );
    Ok(())
}

fn train(g: &Globals, a: TrainArgs) -> Outcome {
    let corpus = load_corpus(&a.input)?;
    let test = a.test.as_deref().map(load_corpus).transpose()?;
    let cfg = build_config(g, &a.flags, &corpus)?;
    log::info!("training {} problems ({}) for {} epochs", corpus.len(), cfg.mode, cfg.epochs);
    let output = run(&corpus, &cfg, test.as_ref()).map_err(classify)?;
    write_run(&a.out, &output).map_err(runtime)?;
    write_json(&a.out.join("config.json"), &cfg).map_err(runtime)?;
    if let Some(last) = output.metrics.epochs.last() {
        let entries: usize = output.buffers.iter().map(|b| b.len()).sum();
        println!("epoch {}: solver loss {:.4}, {entries} buffered equations", last.epoch, last.solver_loss);
    }
    if let Some(report) = &output.metrics.eval {
        print_eval("test", report);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(g: &Globals, a: EvalArgs) -> Outcome {
    if a.beam == 0 {
        return Err(usage(anyhow!("--beam must be at least 1")));
    }
    let ckpt = if a.model.is_dir() { a.model.join("solver.ckpt") } else { a.model.clone() };
    let solver = Solver::load(&ckpt).with_context(|| format!("loading {}", ckpt.display())).map_err(data)?;
    let corpus = load_corpus(&a.input)?;
    let report = evaluate(&solver, &corpus, a.beam, a.topk_mode, g.workers.unwrap_or(1)).map_err(runtime)?;
    print_eval("eval", &report);
    if let Some(out) = &a.out {
        write_json(out, &report).map_err(runtime)?;
    }
    Ok(())
}

fn kfold(g: &Globals, a: KfoldArgs) -> Outcome {
    let corpus = load_corpus(&a.input)?;
    let cfg = build_config(g, &a.flags, &corpus)?;
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let report = run_kfold(&corpus, &cfg, a.folds, Some(&a.out)).map_err(|e| match e {
        TrainError::Data(DataError::TooSmall { .. }) => usage(e),
        e => classify(e),
    })?;
    for f in &report.folds {
        let cells: Vec<String> = f.eval.topk.iter().map(|t| format!("top{} {:.4}", t.k, t.accuracy)).collect();
        println!("fold {}: {}", f.fold, cells.join("  "));
    }
    let cells: Vec<String> = report.mean.iter().map(|t| format!("top{} {:.4}", t.k, t.accuracy)).collect();
    println!("mean:   {}", cells.join("  "));
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    variant: Variant,
    seed: u64,
    eval: EvalReport,
}

#[derive(Serialize)]
struct AblateReport {
    rows: Vec<AblateRow>,
    /// Mean top-k accuracy per variant over seeds.
    mean: BTreeMap<String, Vec<trainer::TopK>>,
}

fn ablate(g: &Globals, a: AblateArgs) -> Outcome {
    if a.seeds == 0 || a.variants.is_empty() {
        return Err(usage(anyhow!("need at least one seed and one variant")));
    }
    let corpus = load_corpus(&a.input)?;
    let base = build_config(g, &a.flags, &corpus)?;
    let (train, test) = dataio::kfold_corpus(&corpus, a.folds, seed::derive(base.seed, "folds"))
        .map_err(usage)?
        .swap_remove(0);
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let mut rows = Vec::new();
    for s in 0..a.seeds {
        let cfg = TrainConfig { seed: seed::derive_index(base.seed, "ablate", s as u64), ..base.clone() };
        for (variant, output) in trainer::ablate(&train, &test, &cfg, &a.variants).map_err(classify)? {
            write_run(&a.out.join(format!("seed{s}")).join(variant.name()), &output).map_err(runtime)?;
            let eval = output.metrics.eval.expect("ablation runs are evaluated");
            rows.push(AblateRow { variant, seed: cfg.seed, eval });
        }
    }
    let mut mean = BTreeMap::new();
    for v in &a.variants {
        let runs: Vec<&EvalReport> = rows.iter().filter(|r| r.variant == *v).map(|r| &r.eval).collect();
        let topk = runs[0]
            .topk
            .iter()
            .map(|t| trainer::TopK {
                k: t.k,
                accuracy: runs.iter().filter_map(|r| r.accuracy(t.k)).sum::<f64>() / runs.len() as f64,
            })
            .collect::<Vec<_>>();
        let cells: Vec<String> = topk.iter().map(|t| format!("top{} {:.4}", t.k, t.accuracy)).collect();
        println!("{:<18} {}", v.name(), cells.join("  "));
        mean.insert(v.name().to_string(), topk);
    }
    write_json(&a.out.join("ablate.json"), &AblateReport { rows, mean }).map_err(runtime)?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Outcome {
    let buffers = buffer::read_jsonl(&a.buffers).map_err(data)?;
    let buf = buffers
        .iter()
        .find(|b| b.problem_id == a.id)
        .ok_or_else(|| data(anyhow!("no buffer for problem `{}` in {}", a.id, a.buffers.display())))?;
    let corpus = a.input.as_deref().map(load_corpus).transpose()?;
    let problem = corpus.as_ref().and_then(|c| c.problems.iter().find(|p| p.id == a.id).map(|p| (c, p)));
    if let Some((_, p)) = problem {
        println!("{}: {}", p.id, p.raw_text);
        println!("answer {}", dataio::format_answer(p.answer));
    } else {
        println!("{}", buf.problem_id);
    }
    let max_q = buf.entries().iter().filter_map(|e| e.expr.max_quantity()).max().map_or(0, |m| m + 1);
    let fallback = Vocabulary::new(max_q);
    println!("{:>8}  {:>8}  {:>10}  {:>8}  {:<10}  equation", "weight", "s", "log p", "t", "origin");
    let mut entries: Vec<_> = buf.entries().iter().collect();
    entries.sort_by(|x, y| y.weight.total_cmp(&x.weight));
    for e in entries {
        let eq = match problem {
            Some((c, p)) => dataio::equation_with_values(p, &e.expr, &c.constants),
            None => e.expr.to_infix(&fallback),
        };
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        let origin = serde_json::to_value(e.origin).map_err(runtime)?;
        let origin = origin.get("kind").and_then(|k| k.as_str()).unwrap_or("?").to_string();
        println!(
            "{:>8.4}  {:>8.4}  {:>10}  {:>8}  {:<10}  {eq}",
            e.weight,
            e.s,
            opt(e.log_prob, 3),
            opt(e.score, 4),
            origin
        );
    }
    Ok(())
}

fn read_legacy(path: &Path) -> Outcome<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(data)?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(data);
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line.map_err(data)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("line {}", i + 1)).map_err(data)?);
    }
    Ok(out)
}

fn convert(a: ConvertArgs) -> Outcome {
    let values = read_legacy(&a.input)?;
    let constants = Vocabulary::default_constants();
    let mut kept: Vec<Record> = Vec::new();
    let mut rejected = 0;
    for (i, v) in values.iter().enumerate() {
        let Some(record) = convert_legacy(v) else {
            log::warn!("record {}: missing id, text or answer", i + 1);
            rejected += 1;
            continue;
        };
        match parse_record(&record, &constants) {
            Ok(_) => kept.push(record),
            Err(e) => {
                log::warn!("{e}");
                rejected += 1;
            }
        }
    }
    write_lines(&a.out, &kept)?;
    println!("converted {} records, rejected {rejected}", kept.len());
    if kept.is_empty() {
        return Err(data(anyhow!("no record survived conversion")));
    }
    Ok(())
}
