use dmwp_core::autodiff::Graph;
use dmwp_core::dataio::{synth_corpus, template_ids, Corpus};
use dmwp_core::solver::{Solver, SolverConfig, TextVocab};
use dmwp_core::trainer::{ablate, beam_correctness, run, run_kfold, topk_accuracy, TrainError, Trainer};
use dmwp_core::{seed, DiscConfig, SupervisionMode, TopkMode, TrainConfig, Variant, WdaConfig};

fn tiny(epochs: usize, stage_switch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        stage_switch,
        refresh_period: 3,
        batch_size: 8,
        solver: SolverConfig { embed_dim: 8, hidden_dim: 16, num_constants: 2 },
        disc: DiscConfig { embed_dim: 6, hidden_dim: 8, ..DiscConfig::default() },
        disc_problems_per_epoch: 8,
        lr: 5e-3,
        disc_lr: 5e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn corpus(n: usize) -> Corpus {
    synth_corpus(&template_ids(), n, 3).unwrap()
}

#[test]
fn single_problem_single_epoch_is_a_likelihood_step() {
    let c = corpus(1);
    let cfg = TrainConfig { epochs: 1, stage_switch: 1, ..tiny(1, 1) };
    let out = run(&c, &cfg, None).unwrap();

    // Same initialization, one Adam step on -log P(gold).
    let p = &c.problems[0];
    let mut solver = Solver::new(
        SolverConfig { num_constants: c.constants.len(), ..cfg.solver },
        TextVocab::build(&c.problems),
        seed::derive(cfg.seed, "solver"),
    );
    let grads = {
        let mut g = Graph::new(solver.params());
        let enc = solver.encode(&mut g, &solver.prepare(p).unwrap()).unwrap();
        let lp = solver.sequence_log_prob(&mut g, &enc, &p.gold.as_ref().unwrap().to_prefix()).unwrap();
        let loss = g.scale(lp, -1.0).unwrap();
        g.backward(loss).unwrap()
    };
    solver.params_mut().adam_step(&grads, cfg.lr).unwrap();
    for id in solver.params().ids() {
        assert_eq!(solver.params().get(id), out.solver.params().get(id), "{}", solver.params().name(id));
    }
}

#[test]
fn overfits_twenty_problems() {
    let c = corpus(20);
    let cfg = TrainConfig { lr: 1e-2, ..tiny(60, 60) };
    let out = run(&c, &cfg, Some(&c)).unwrap();
    let correct = beam_correctness(&out.solver, &c, 1, 1).unwrap();
    let acc = topk_accuracy(&correct, 1, TopkMode::Any);
    assert!(acc >= 0.95, "training accuracy {acc}");
    let first = out.metrics.epochs.first().unwrap().solver_loss;
    let last = out.metrics.epochs.last().unwrap().solver_loss;
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let c = corpus(24);
    let cfg = tiny(8, 4);
    let a = run(&c, &cfg, Some(&c)).unwrap();
    let b = run(&c, &cfg, Some(&c)).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.events, b.events);
    assert_eq!(a.buffers, b.buffers);
    let parallel = run(&c, &TrainConfig { workers: 3, ..cfg.clone() }, Some(&c)).unwrap();
    assert_eq!(a.metrics, parallel.metrics);
    let other = run(&c, &TrainConfig { seed: 12, ..cfg }, Some(&c)).unwrap();
    assert_ne!(a.metrics, other.metrics);
}

#[test]
fn schedule_gates_hold_in_the_event_log() {
    let c = corpus(24);
    let cfg = TrainConfig { lr_halving_period: 4, ..tiny(14, 7) };
    let out = run(&c, &cfg, None).unwrap();
    assert_eq!(out.events.len(), 14);
    for e in &out.events {
        assert_eq!(e.lr, 5e-3 / 2f64.powi((e.epoch / 4) as i32));
        assert_eq!(e.refreshed, e.epoch > 0 && e.epoch % 3 == 0);
        assert_eq!(e.uses_scores, e.epoch >= 7);
        assert!(e.max_sum_dev < 1e-9);
        assert_eq!(e.max_gate_dev, 0.0);
        assert_eq!(e.invalid_entries, 0);
        assert_eq!(e.shrunk, 0);
        for s in &e.samples {
            let want = if e.epoch >= 7 { (s.s + s.t.unwrap()) / 2.0 } else { s.s };
            assert_eq!(s.a, want);
        }
    }
    assert!(out.events.iter().any(|e| e.added > 0));
}

#[test]
fn ablation_variants_follow_their_schemes() {
    let c = corpus(24);
    let cfg = tiny(9, 5);
    let runs = ablate(&c, &c, &cfg, &Variant::ALL).unwrap();
    let names: Vec<Variant> = runs.iter().map(|(v, _)| *v).collect();
    assert_eq!(names, Variant::ALL);
    for (v, out) in &runs {
        match v {
            Variant::NonProbabilistic => {
                assert!(out.events.iter().flat_map(|e| &e.samples).all(|s| s.a == 1.0));
                assert!(out.events.iter().all(|e| !e.uses_scores));
            }
            Variant::OneStage => assert!(out.events.iter().all(|e| !e.uses_scores)),
            Variant::FullMethod => assert!(out.events.iter().filter(|e| e.epoch >= 5).all(|e| e.uses_scores)),
            Variant::GoldOnly => assert!(out.buffers.iter().all(|b| b.len() == 1)),
        }
    }
    // The one-stage fork equals a fresh one-stage run.
    let fresh = run(&c, &Variant::OneStage.apply(&cfg), Some(&c)).unwrap();
    let forked = &runs.iter().find(|(v, _)| *v == Variant::OneStage).unwrap().1;
    assert_eq!(forked.metrics.eval, fresh.metrics.eval);
    assert_eq!(forked.buffers, fresh.buffers);
    for id in fresh.solver.params().ids() {
        assert_eq!(fresh.solver.params().get(id), forked.solver.params().get(id));
    }
}

#[test]
fn weak_mode_seeds_buffers_by_search() {
    let c = corpus(20).into_weak();
    let cfg = TrainConfig { mode: SupervisionMode::Weak, ..tiny(4, 2) };
    let t = Trainer::new(&c, cfg.clone(), None).unwrap();
    assert!(t.buffers().iter().filter(|b| !b.is_empty()).count() >= 15);
    let out = t.finish(None).unwrap();
    assert!(out.metrics.epochs.iter().all(|m| m.solver_loss.is_finite()));

    // Answers nothing can reach within a small budget.
    let mut unreachable = c.clone();
    unreachable.problems.iter_mut().for_each(|p| p.answer = 987_654.321);
    let starved = TrainConfig { wda: WdaConfig { max_iterations: 2_000, ..WdaConfig::default() }, ..cfg.clone() };
    assert!(matches!(Trainer::new(&unreachable, starved, None), Err(TrainError::NoSupervision)));
    let full = TrainConfig { mode: SupervisionMode::Full, ..cfg };
    assert!(matches!(Trainer::new(&c, full, None), Err(TrainError::Data(_))));
}

#[test]
fn semi_weak_without_search_trains_on_gold_only() {
    let c = corpus(20).into_semi_weak(|i, _| i % 2 == 0);
    let cfg = TrainConfig { mode: SupervisionMode::SemiWeak, ..tiny(4, 4) };
    let t = Trainer::new(&c, cfg, None).unwrap();
    assert_eq!(t.buffers().iter().filter(|b| b.is_empty()).count(), 10);
}

#[test]
fn kfold_writes_files_and_averages_folds() {
    let c = corpus(30);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3, 2);
    let report = run_kfold(&c, &cfg, 3, Some(dir.path())).unwrap();
    assert_eq!(report.folds.len(), 3);
    for (i, t) in report.mean.iter().enumerate() {
        let mean = report.folds.iter().map(|f| f.eval.topk[i].accuracy).sum::<f64>() / 3.0;
        assert_eq!(t.accuracy, mean);
    }
    for f in 0..3 {
        for name in ["metrics.json", "metrics.csv", "events.jsonl", "buffers.jsonl", "solver.ckpt", "disc.ckpt"] {
            assert!(dir.path().join(format!("fold{f}")).join(name).exists(), "fold{f}/{name}");
        }
    }
    assert!(dir.path().join("kfold.json").exists());
    let csv = std::fs::read_to_string(dir.path().join("kfold.csv")).unwrap();
    assert!(csv.starts_with("fold,top1,top3,top5\n"));
    assert_eq!(csv.lines().count(), 5);
}
