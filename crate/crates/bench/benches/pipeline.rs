use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dmwp_bench::{corpus, running_example, solver};
use dmwp_core::augment::{contrast_batch, gen_positives};
use dmwp_core::autodiff::Graph;
use dmwp_core::expr::ANSWER_EPS;
use dmwp_core::wda::wda_search;
use dmwp_core::{seed, AugmentConfig, WdaConfig};

fn wda(c: &mut Criterion) {
    let p = running_example();
    let cfg = WdaConfig::default();
    c.bench_function("wda/running_example", |b| b.iter(|| wda_search(&p, &cfg)));
}

fn augment(c: &mut Criterion) {
    let p = running_example();
    let gold = p.gold.clone().unwrap();
    let cfg = AugmentConfig::default();
    let constants = dmwp_core::expr::Vocabulary::default_constants();
    c.bench_function("augment/positives", |b| b.iter(|| gen_positives(&gold, &cfg)));
    let positives = gen_positives(&gold, &cfg);
    c.bench_function("augment/contrast_batch", |b| {
        b.iter_batched(
            || seed::rng(3),
            |mut rng| contrast_batch(&p, &positives, &constants, ANSWER_EPS, &cfg, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn solver_step(c: &mut Criterion) {
    let corpus = corpus(16);
    let base = solver(&corpus);
    let prepared: Vec<_> = corpus.problems.iter().map(|p| base.prepare(p).unwrap()).collect();
    let targets: Vec<_> = corpus.problems.iter().map(|p| p.gold.as_ref().unwrap().to_prefix()).collect();
    c.bench_function("solver/train_step_batch16", |b| {
        b.iter_batched(
            || base.clone(),
            |mut s| {
                let grads = {
                    let mut g = Graph::new(s.params());
                    let refs: Vec<_> = prepared.iter().collect();
                    let encs = s.encode_batch(&mut g, &refs).unwrap();
                    let mut total = None;
                    for (enc, t) in encs.iter().zip(&targets) {
                        let loss = s.weighted_loss(&mut g, enc, &[(t.as_slice(), 1.0)]).unwrap();
                        total = Some(match total {
                            None => loss,
                            Some(acc) => g.add(acc, loss).unwrap(),
                        });
                    }
                    let loss = g.scale(total.unwrap(), 1.0 / 16.0).unwrap();
                    g.backward(loss).unwrap()
                };
                s.params_mut().adam_step(&grads, 1e-3).unwrap();
                s
            },
            BatchSize::LargeInput,
        )
    });
    let p = &corpus.problems[0];
    c.bench_function("solver/beam5_decode", |b| b.iter(|| base.decode_problem(p, 5).unwrap()));
}

criterion_group!(benches, wda, augment, solver_step);
criterion_main!(benches);
