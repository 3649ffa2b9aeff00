mod common;

use common::gradcheck;
use dmwp_core::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};
use dmwp_core::seed;

const TOL: f64 = 1e-6;

/// Builds a store with parameters `a` (3x4), `b` (4x2), `c` (3x4), `bias` (1x4).
fn store() -> ParamStore {
    let mut rng = seed::rng(2024);
    let mut p = ParamStore::new();
    p.add("a", Tensor::uniform(3, 4, 1, &mut rng));
    p.add("b", Tensor::uniform(4, 2, 1, &mut rng));
    p.add("c", Tensor::uniform(3, 4, 1, &mut rng));
    p.add("bias", Tensor::uniform(1, 4, 1, &mut rng));
    p
}

/// Reduces any node to a scalar through a fixed random weighting so every
/// output entry contributes a distinct gradient.
fn reduce(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let [r, c] = g.shape(x);
    let mut rng = seed::rng(77);
    let w = g.constant(Tensor::uniform(r, c, 1, &mut rng));
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

fn run(name: &str, build: impl Fn(&mut Graph, [Var; 4]) -> Result<Var, AutodiffError>) {
    let mut p = store();
    let report = gradcheck::check(&mut p, 1, |store, with_grad| {
        let mut g = Graph::new(store);
        let ids: Vec<_> = store.ids().collect();
        let vars = [g.param(ids[0]), g.param(ids[1]), g.param(ids[2]), g.param(ids[3])];
        let out = build(&mut g, vars)?;
        let loss = reduce(&mut g, out)?;
        let value = g.value(loss).item();
        let grads = if with_grad { Some(g.backward(loss)?) } else { None };
        Ok((value, grads))
    });
    assert!(report.max_rel_err < TOL, "{name}: {} ({})", report.max_rel_err, report.worst);
}

#[test]
fn matmul_gradients() {
    run("matmul", |g, [a, b, _, _]| g.matmul(a, b));
    run("matmul_nt", |g, [a, _, c, _]| g.matmul_nt(a, c));
}

#[test]
fn elementwise_gradients() {
    run("add", |g, [a, _, c, _]| g.add(a, c));
    run("sub", |g, [a, _, c, _]| g.sub(a, c));
    run("mul", |g, [a, _, c, _]| g.mul(a, c));
    run("scale", |g, [a, ..]| g.scale(a, -2.5));
    run("add_bias", |g, [a, _, _, bias]| g.add_bias(a, bias));
}

#[test]
fn nonlinearity_gradients() {
    run("sigmoid", |g, [a, ..]| g.sigmoid(a));
    run("tanh", |g, [a, ..]| g.tanh(a));
    run("softmax", |g, [a, ..]| g.softmax(a));
    run("log_softmax", |g, [a, ..]| g.log_softmax(a));
    run("log", |g, [a, ..]| {
        let s = g.sigmoid(a)?;
        g.log(s)
    });
}

#[test]
fn structural_gradients() {
    run("concat", |g, [a, _, c, _]| g.concat(&[a, c, a]));
    run("concat_rows", |g, [a, _, _, bias]| g.concat_rows(&[a, bias, a]));
    run("slice_cols", |g, [a, ..]| g.slice_cols(a, 1, 2));
    run("gather_rows", |g, [a, ..]| g.gather_rows(a, &[2, 0, 2]));
    run("mean_rows", |g, [a, ..]| g.mean_rows(a));
    run("pick", |g, [a, ..]| g.pick(a, 5));
}

#[test]
fn embedding_lookup_gradient_hits_only_used_rows() {
    let mut rng = seed::rng(3);
    let mut p = ParamStore::new();
    let table = p.add("table", Tensor::uniform(5, 3, 1, &mut rng));
    let mut g = Graph::new(&p);
    let rows = g.embedding_lookup(table, &[1, 3, 1]).unwrap();
    let loss = g.sum(rows).unwrap();
    let grads = g.backward(loss).unwrap();
    let gt = grads.get(table).unwrap();
    let expected = [0.0, 2.0, 0.0, 1.0, 0.0];
    for (r, &e) in expected.iter().enumerate() {
        assert!(gt.row_slice(r).iter().all(|&v| v == e), "row {r}");
    }
}

#[test]
fn composite_chain_gradient() {
    // A small recurrent cell exercised twice with shared parameters.
    run("recurrent", |g, [a, b, c, bias]| {
        let h0 = g.row(a, 0)?;
        let x = g.row(c, 1)?;
        let z = g.add(h0, x)?;
        let z = g.add_bias(z, bias)?;
        let h1 = g.tanh(z)?;
        let z = g.add(h1, x)?;
        let h2 = g.sigmoid(z)?;
        let gate = g.mul(h2, h1)?;
        let proj = g.matmul(gate, b)?;
        let cat = g.concat(&[proj, gate])?;
        g.log_softmax(cat)
    });
}
