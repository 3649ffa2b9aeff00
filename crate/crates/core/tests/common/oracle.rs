//! Brute-force reference implementations. Nothing here calls into the code
//! paths it checks beyond the data types.

use std::f64::consts::PI;

/// One enumerated expression: its value plus the flags the pruning rules
/// need. Expressions in one list are pairwise distinct structures.
#[derive(Clone, Copy)]
struct Item {
    value: f64,
    quantity: bool,
    pi: bool,
    mul: bool,
}

fn apply(op: usize, a: f64, b: f64) -> Option<f64> {
    let v = match op {
        0 => a + b,
        1 => a - b,
        2 => a * b,
        3 => {
            if b == 0.0 {
                return None;
            }
            a / b
        }
        _ => {
            if a == 0.0 && b < 0.0 {
                return None;
            }
            a.powf(b)
        }
    };
    v.is_finite().then_some(v)
}

fn hits(v: f64, answer: f64, eps: f64) -> bool {
    (v - answer).abs() <= eps * answer.abs().max(1.0)
}

/// Exhaustive search over every expression with at most `max_ops` binary
/// operators, where every composite subtree obeys the pruning rules.
/// Returns true if some composite expression, or a bare quantity, reaches
/// `answer`.
pub fn exhaustive_solvable(quantities: &[f64], constants: &[f64], answer: f64, max_ops: usize, eps: f64) -> bool {
    if quantities.iter().any(|&q| hits(q, answer, eps)) {
        return true;
    }
    if quantities.is_empty() {
        return false;
    }
    let mut levels: Vec<Vec<Item>> = Vec::new();
    let mut leaves: Vec<Item> =
        quantities.iter().map(|&q| Item { value: q, quantity: true, pi: false, mul: false }).collect();
    leaves.extend(constants.iter().map(|&c| Item { value: c, quantity: false, pi: c == PI, mul: false }));
    levels.push(leaves);
    for n in 1..=max_ops {
        let mut level = Vec::new();
        for left_ops in 0..n {
            let right_ops = n - 1 - left_ops;
            for (li, l) in levels[left_ops].iter().enumerate() {
                for (ri, r) in levels[right_ops].iter().enumerate() {
                    let identical = left_ops == right_ops && li == ri;
                    for op in 0..5 {
                        if identical && (op == 1 || op == 3) {
                            continue;
                        }
                        let quantity = l.quantity || r.quantity;
                        let pi = l.pi || r.pi;
                        let mul = op == 2 || l.mul || r.mul;
                        if !quantity || (pi && !mul) {
                            continue;
                        }
                        let Some(value) = apply(op, l.value, r.value) else { continue };
                        if hits(value, answer, eps) {
                            return true;
                        }
                        if n < max_ops {
                            level.push(Item { value, quantity, pi, mul });
                        }
                    }
                }
            }
        }
        levels.push(level);
    }
    false
}
