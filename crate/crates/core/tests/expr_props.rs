use dmwp_core::expr::{number_map, parse_infix, EvalError, Expr, Op, Token, Vocabulary};
use dmwp_core::seed;
use proptest::prelude::*;
use rand::Rng as _;

const NUM: usize = 6;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![4 => (0..NUM).prop_map(Expr::Quantity), 1 => (0..2usize).prop_map(Expr::Constant)]
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    // Depth is bounded by the recursion limit of 6.
    leaf().prop_recursive(6, 64, 2, |inner| {
        (0..5usize, inner.clone(), inner).prop_map(|(o, l, r)| Expr::binary(Op::ALL[o], l, r))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn infix_and_prefix_round_trip(e in arb_expr()) {
        prop_assert!(e.depth() <= 7);
        let v = Vocabulary::new(NUM);
        let text = e.to_infix(&v);
        prop_assert_eq!(&parse_infix(&text, &v).unwrap(), &e);
        prop_assert_eq!(&Expr::from_prefix(&e.to_prefix()).unwrap(), &e);
        prop_assert_eq!(parse_infix(&text, &v).unwrap().canonical_key(), e.canonical_key());
    }
}

/// Independent evaluator: postfix linearization run on an explicit stack.
fn postfix(e: &Expr, out: &mut Vec<Token>) {
    match e {
        Expr::Binary { op, left, right } => {
            postfix(left, out);
            postfix(right, out);
            out.push(Token::Op(*op));
        }
        Expr::Quantity(i) => out.push(Token::Quantity(*i)),
        Expr::Constant(j) => out.push(Token::Constant(*j)),
    }
}

fn stack_eval(tokens: &[Token], q: &[f64], c: &[f64]) -> Option<f64> {
    let mut stack: Vec<f64> = Vec::new();
    for t in tokens {
        let v = match *t {
            Token::Quantity(i) => q[i],
            Token::Constant(j) => c[j],
            Token::Op(op) => {
                let b = stack.pop()?;
                let a = stack.pop()?;
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div if b == 0.0 => return None,
                    Op::Div => a / b,
                    Op::Pow if a == 0.0 && b < 0.0 => return None,
                    Op::Pow => a.powf(b),
                }
            }
        };
        if !v.is_finite() {
            return None;
        }
        stack.push(v);
    }
    (stack.len() == 1).then(|| stack[0])
}

fn random_expr(rng: &mut seed::Rng, depth: usize) -> Expr {
    if depth == 0 || rng.gen_bool(0.35) {
        return if rng.gen_bool(0.85) { Expr::Quantity(rng.gen_range(0..NUM)) } else { Expr::Constant(rng.gen_range(0..2)) };
    }
    // Powers are rarer so values stay in range.
    let op = if rng.gen_bool(0.08) { Op::Pow } else { Op::ALL[rng.gen_range(0..4)] };
    Expr::binary(op, random_expr(rng, depth - 1), random_expr(rng, depth - 1))
}

#[test]
fn evaluation_agrees_with_stack_oracle() {
    let mut rng = seed::rng(21);
    let consts = Vocabulary::default_constants();
    let mut compared = 0;
    for _ in 0..10_000 {
        let e = random_expr(&mut rng, 6);
        let q: Vec<f64> = (0..NUM).map(|_| (rng.gen_range(1..2000) as f64) / 20.0).collect();
        let mut toks = Vec::new();
        postfix(&e, &mut toks);
        let ours = e.evaluate(&q, &consts);
        let oracle = stack_eval(&toks, &q, &consts);
        match (ours, oracle) {
            (Ok(a), Some(b)) => {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{a} vs {b}");
                // Bit-identical on repetition.
                assert_eq!(e.evaluate(&q, &consts).unwrap().to_bits(), a.to_bits());
                compared += 1;
            }
            (Err(_), None) => {}
            (a, b) => panic!("disagreement on {e:?}: {a:?} vs {b:?}"),
        }
    }
    assert!(compared > 8_000);
}

#[test]
fn table_five_equation() {
    let v = Vocabulary::new(0);
    let (e, q) = dmwp_core::expr::parse_infix_literals("840/6/70+630", &v).unwrap();
    assert_eq!(e.evaluate(&q, &v.constants).unwrap(), 632.0);
    let e = parse_infix("N1/(N1-N1)", &Vocabulary::new(1)).unwrap();
    assert_eq!(e.evaluate(&[3.0], &v.constants), Err(EvalError::DivisionByZero));
}

#[test]
fn number_mapping_in_reading_order() {
    let (tokens, m) = number_map("3.5 km in 0.5 h, then 12 more");
    assert_eq!(m.values(), vec![3.5, 0.5, 12.0]);
    let mapped: Vec<&str> = tokens.iter().map(String::as_str).filter(|t| t.starts_with('N')).collect();
    assert_eq!(mapped, ["N1", "N2", "N3"]);
}
