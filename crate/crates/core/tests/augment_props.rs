use std::collections::HashSet;

use dmwp_core::augment::{contrast_batch, gen_positives, AugmentConfig, AugmentError};
use dmwp_core::expr::{answer_matches, parse_infix, Expr, NumberMapping, Op, Vocabulary, ANSWER_EPS};
use dmwp_core::{seed, Problem};
use rand::Rng as _;

fn random_expr(rng: &mut seed::Rng, depth: usize, num: usize) -> Expr {
    if depth == 0 || rng.gen_bool(0.3) {
        return if rng.gen_bool(0.9) { Expr::Quantity(rng.gen_range(0..num)) } else { Expr::Constant(rng.gen_range(0..2)) };
    }
    let op = if rng.gen_bool(0.05) { Op::Pow } else { Op::ALL[rng.gen_range(0..4)] };
    Expr::binary(op, random_expr(rng, depth - 1, num), random_expr(rng, depth - 1, num))
}

fn problem(id: &str, quantities: Vec<f64>, answer: f64) -> Problem {
    Problem {
        id: id.into(),
        raw_text: String::new(),
        tokens: Vec::new(),
        mapping: NumberMapping::default(),
        quantities,
        answer,
        gold: None,
        trivial: false,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn positives_preserve_value_and_negatives_miss_answer() {
    let mut rng = seed::rng(31);
    let consts = Vocabulary::default_constants();
    let cfg = AugmentConfig::default();
    let (mut checked, mut positives, mut negatives, mut skipped) = (0, 0, 0, 0);
    while checked < 10_000 {
        let e = random_expr(&mut rng, 5, 5);
        let q: Vec<f64> = (0..5).map(|_| rng.gen_range(1..200) as f64).collect();
        let Ok(value) = e.evaluate(&q, &consts) else { continue };
        if value.abs() > 1e12 || (value != 0.0 && value.abs() < 1e-9) {
            continue;
        }
        checked += 1;
        let variants = gen_positives(&e, &cfg);
        assert_eq!(variants[0], e);
        let keys: HashSet<String> = variants.iter().map(Expr::canonical_key).collect();
        assert_eq!(keys.len(), variants.len());
        for v in &variants {
            let got = v.evaluate(&q, &consts).expect("variant evaluates");
            assert!(rel(got, value) <= 1e-9 || (got - value).abs() <= 1e-9, "{e:?} -> {v:?}: {got} vs {value}");
        }
        positives += variants.len();
        let p = problem(&format!("r{checked}"), q, value);
        match contrast_batch(&p, &variants, &consts, ANSWER_EPS, &cfg, &mut rng) {
            Ok(batch) => {
                for n in &batch.negatives {
                    if let Ok(v) = n.evaluate(&p.quantities, &consts) {
                        assert!(!answer_matches(v, value, ANSWER_EPS));
                    }
                }
                negatives += batch.negatives.len();
            }
            Err(AugmentError::ExhaustedRetries { .. }) => skipped += 1,
            Err(other) => panic!("{other}"),
        }
    }
    assert!(positives > 10_000);
    assert!(negatives > 10_000);
    assert!(skipped < 100, "{skipped} degenerate problems");
}

/// Left-associated chain `t0 s1 t1 s2 t2 ...` from signed terms.
fn chain(terms: &[(bool, usize)]) -> Expr {
    let mut e = Expr::Quantity(terms[0].1);
    for &(plus, q) in &terms[1..] {
        e = Expr::binary(if plus { Op::Add } else { Op::Sub }, e, Expr::Quantity(q));
    }
    e
}

fn permutations(items: &[(bool, usize)]) -> Vec<Vec<(bool, usize)>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Every reordering of a flat additive chain that keeps each term's sign and
/// needs no leading minus, and that keeps the value.
fn permuter_count(terms: &[(bool, usize)], q: &[f64]) -> usize {
    let target = chain(terms).evaluate(q, &[]).unwrap();
    let mut keys = HashSet::new();
    for perm in permutations(terms) {
        if !perm[0].0 {
            continue;
        }
        let e = chain(&perm);
        if (e.evaluate(q, &[]).unwrap() - target).abs() < 1e-9 {
            keys.insert(e.canonical_key());
        }
    }
    keys.len()
}

#[test]
fn additive_chain_closure_matches_permuter() {
    let v = Vocabulary::new(4);
    let q = [17.0, 5.0, 11.0, 3.0];
    let cases: [(&str, &[(bool, usize)]); 3] = [
        ("N1+N2+N3+N4", &[(true, 0), (true, 1), (true, 2), (true, 3)]),
        ("N1+N2-N3+N4", &[(true, 0), (true, 1), (false, 2), (true, 3)]),
        ("N1-N2-N3+N4", &[(true, 0), (false, 1), (false, 2), (true, 3)]),
    ];
    let expected = [24, 18, 12];
    for ((text, terms), want) in cases.iter().zip(expected) {
        let gold = parse_infix(text, &v).unwrap();
        let got = gen_positives(&gold, &AugmentConfig::default()).len();
        let oracle = permuter_count(terms, &q);
        assert_eq!(oracle, want, "{text}");
        assert_eq!(got, oracle, "{text}");
    }
}

#[test]
fn batches_are_deterministic_per_seed() {
    let consts = Vocabulary::default_constants();
    let v = Vocabulary::new(3);
    let gold = parse_infix("N1*N2+N3", &v).unwrap();
    let p = problem("d", vec![4.0, 6.0, 5.0], 29.0);
    let cfg = AugmentConfig::default();
    let positives = gen_positives(&gold, &cfg);
    let a = contrast_batch(&p, &positives, &consts, ANSWER_EPS, &cfg, &mut seed::rng(3)).unwrap();
    let b = contrast_batch(&p, &positives, &consts, ANSWER_EPS, &cfg, &mut seed::rng(3)).unwrap();
    let c = contrast_batch(&p, &positives, &consts, ANSWER_EPS, &cfg, &mut seed::rng(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.negatives, c.negatives);
    assert_eq!(a.negatives.len(), positives.len() * cfg.negatives_per_positive);
}
