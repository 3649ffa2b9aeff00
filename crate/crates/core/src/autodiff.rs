//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! A [`Graph`] records every operation as a node on a tape. Parameters live
//! in a [`ParamStore`] and are referenced, not copied, by the graph; calling
//! [`Graph::backward`] on a scalar node returns [`Gradients`] keyed by
//! [`ParamId`]. Vectors are `1 x n` matrices. The only broadcasting is the
//! bias add of a `1 x n` row onto every row of an `m x n` matrix.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::seed::Rng;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: [usize; 2], right: [usize; 2] },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("index {index} out of range for {op} (len {len})")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn row(values: &[f64]) -> Tensor {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += a * b` for `a: p x q`, `b: q x r`. Rows of `a` are processed four
/// at a time so each row of `b` is loaded once per block.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    let mut i = 0;
    while i + 4 <= p {
        let (o0, rest) = out[i * r..(i + 4) * r].split_at_mut(r);
        let (o1, rest) = rest.split_at_mut(r);
        let (o2, o3) = rest.split_at_mut(r);
        for k in 0..q {
            let (a0, a1, a2, a3) = (a[i * q + k], a[(i + 1) * q + k], a[(i + 2) * q + k], a[(i + 3) * q + k]);
            let b_row = &b[k * r..(k + 1) * r];
            for j in 0..r {
                let bv = b_row[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `out += a * b^T` for `a: p x q`, `b: r x q`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            out[i * r + j] += dot(a_row, &b[j * q..(j + 1) * q]);
        }
    }
}

/// `out += a^T * b` for `a: p x q`, `b: p x r`. Accumulates four rows of `a`
/// per pass over `out`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    let mut i = 0;
    while i + 4 <= p {
        let (b0, b1, b2, b3) = (
            &b[i * r..(i + 1) * r],
            &b[(i + 1) * r..(i + 2) * r],
            &b[(i + 2) * r..(i + 3) * r],
            &b[(i + 3) * r..(i + 4) * r],
        );
        for k in 0..q {
            let (a0, a1, a2, a3) = (a[i * q + k], a[(i + 1) * q + k], a[(i + 2) * q + k], a[(i + 3) * q + k]);
            let out_row = &mut out[k * r..(k + 1) * r];
            for j in 0..r {
                out_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        i += 4;
    }
    for i in i..p {
        let b_row = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters plus Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    index: HashMap<String, ParamId>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.m.push(Tensor::zeros(value.rows, value.cols));
        self.v.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> ParamId {
        self.add(name, Tensor::uniform(rows, cols, fan_in, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    /// One Adam update; fails without touching anything if a gradient is
    /// non-finite.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(AutodiffError::NonFiniteGradient(self.names[i].clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..self.values.len() {
            let g = grads.grads.get(i).and_then(Option::as_ref);
            let (m, v, w) = (&mut self.m[i].data, &mut self.v[i].data, &mut self.values[i].data);
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g.data[k]);
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 8] = b"DMWPCKPT";
    const VERSION: u32 = 1;

    /// Binary checkpoint: magic, version, tensor count, then per tensor a
    /// length-prefixed name, rank, dims and little-endian doubles.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(t.rows as u64).to_le_bytes())?;
            w.write_all(&(t.cols as u64).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ParamStore> {
        fn u32_of(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of(r: &mut impl Read) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(AutodiffError::Checkpoint("wrong magic".into()));
        }
        let version = u32_of(&mut r)?;
        if version != Self::VERSION {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32_of(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| AutodiffError::Checkpoint("name not utf-8".into()))?;
            let rank = u32_of(&mut r)?;
            if rank != 2 {
                return Err(AutodiffError::Checkpoint(format!("rank {rank} tensor `{name}`")));
            }
            let rows = u64_of(&mut r)? as usize;
            let cols = u64_of(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_bits(u64_of(&mut r)?));
            }
            store.add(&name, Tensor::from_vec(rows, cols, data));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Copies values of same-named parameters from `other`.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter `{name}`")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(AutodiffError::Checkpoint(format!("shape of `{name}` differs")));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Gradients per parameter; parameters the loss never reached stay `None`
/// and read as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(param_count: usize) -> Self {
        Gradients { grads: vec![None; param_count] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient as a dense tensor shaped like the parameter.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| {
            let p = store.get(id);
            Tensor::zeros(p.rows, p.cols)
        })
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum NodeOp {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Pick(Var, usize),
}

struct Node {
    value: Option<Tensor>,
    op: NodeOp,
    /// Some parameter is upstream of this node.
    needs_grad: bool,
}

/// A tape of operations over one set of parameters.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(AutodiffError::NonFinite(op))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(1024), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, NodeOp::Param(id)) => self.params.get(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: NodeOp) -> Var {
        let needs_grad = match &op {
            NodeOp::Leaf => false,
            NodeOp::Param(_) => true,
            NodeOp::MatMul(a, b)
            | NodeOp::MatMulNt(a, b)
            | NodeOp::Add(a, b)
            | NodeOp::AddBias(a, b)
            | NodeOp::Sub(a, b)
            | NodeOp::Mul(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            NodeOp::ConcatCols(parts) | NodeOp::ConcatRows(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            NodeOp::Scale(a, _)
            | NodeOp::SliceCols(a, _)
            | NodeOp::GatherRows(a, _)
            | NodeOp::MeanRows(a)
            | NodeOp::Sum(a)
            | NodeOp::Sigmoid(a)
            | NodeOp::Tanh(a)
            | NodeOp::Softmax(a)
            | NodeOp::LogSoftmax(a)
            | NodeOp::Log(a)
            | NodeOp::Pick(a, _) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, NodeOp::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: NodeOp::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(AutodiffError::Shape { op: "matmul", left: sa, right: sb });
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        gemm_acc(&self.value(a).data, &self.value(b).data, &mut out.data, sa[0], sa[1], sb[1]);
        Ok(self.push(finite(out, "matmul")?, NodeOp::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(AutodiffError::Shape { op: "matmul_nt", left: sa, right: sb });
        }
        let mut out = Tensor::zeros(sa[0], sb[0]);
        gemm_nt_acc(&self.value(a).data, &self.value(b).data, &mut out.data, sa[0], sa[1], sb[0]);
        Ok(self.push(finite(out, "matmul_nt")?, NodeOp::MatMulNt(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: NodeOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape { op: name, left: sa, right: sb });
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(sa[0], sa[1], data);
        Ok(self.push(finite(out, name)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, NodeOp::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, NodeOp::Sub(a, b))
    }

    /// Pointwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, NodeOp::Mul(a, b))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb[0] != 1 || sa[1] != sb[1] {
            return Err(AutodiffError::Shape { op: "add_bias", left: sa, right: sb });
        }
        let mut out = self.value(a).clone();
        let b = &self.value(bias).data;
        for row in out.data.chunks_mut(sa[1]) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(finite(out, "add_bias")?, NodeOp::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|x| x * k).collect());
        Ok(self.push(finite(out, "scale")?, NodeOp::Scale(a, k)))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(AutodiffError::Shape { op: "concat", left: [rows, cols], right: s });
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row_slice(r));
            }
            offset += t.cols;
        }
        Ok(self.push(out, NodeOp::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(AutodiffError::Shape { op: "concat_rows", left: [rows, cols], right: t.shape() });
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data), NodeOp::ConcatRows(parts.to_vec())))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(AutodiffError::Index { op: "slice_cols", index: start + len, len: t.cols });
        }
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&t.row_slice(r)[start..start + len]);
        }
        Ok(self.push(out, NodeOp::SliceCols(a, start)))
    }

    /// Rows of `a` selected by `indices` (also the embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            if i >= t.rows {
                return Err(AutodiffError::Index { op: "gather_rows", index: i, len: t.rows });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_vec(indices.len(), t.cols, data);
        Ok(self.push(out, NodeOp::GatherRows(a, indices.to_vec())))
    }

    pub fn embedding_lookup(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.param(table);
        self.gather_rows(t, ids)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.gather_rows(a, &[r])
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, &v) in out.data.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let n = t.rows.max(1) as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(out, NodeOp::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.push(finite(Tensor::scalar(s), "sum")?, NodeOp::Sum(a)))
    }

    fn map(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: NodeOp) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect());
        Ok(self.push(finite(out, name)?, op))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", sigmoid, NodeOp::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, "tanh", f64::tanh, NodeOp::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, "log", f64::ln, NodeOp::Log(a))
    }

    fn row_softmax(t: &Tensor, log: bool) -> Tensor {
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            if log {
                let lz = z.ln() + max;
                row.iter_mut().for_each(|x| *x -= lz);
            } else {
                row.iter_mut().for_each(|x| *x = (*x - max).exp() / z);
            }
        }
        out
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = Self::row_softmax(self.value(a), false);
        Ok(self.push(finite(out, "softmax")?, NodeOp::Softmax(a)))
    }

    /// Row-wise log-softmax, stable for large logits.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = Self::row_softmax(self.value(a), true);
        Ok(self.push(finite(out, "log_softmax")?, NodeOp::LogSoftmax(a)))
    }

    /// Element `index` of the flattened matrix, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let v = *t.data.get(index).ok_or(AutodiffError::Index { op: "pick", index, len: t.data.len() })?;
        Ok(self.push(Tensor::scalar(v), NodeOp::Pick(a, index)))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(s));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.params.len());
        let needs = |v: &Var| self.nodes[v.0].needs_grad;

        // Adds `t` into the gradient slot of `v`, moving it in when empty.
        fn put(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
        // Zero-initialised slot for scattered or accumulated writes.
        fn buf(grads: &mut [Option<Tensor>], v: Var, shape: [usize; 2]) -> &mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
        }
        fn map(g: &Tensor, f: impl Fn(usize) -> f64) -> Tensor {
            Tensor { rows: g.rows, cols: g.cols, data: (0..g.data.len()).map(f).collect() }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let own = self.value(Var(i));
            match &node.op {
                NodeOp::Leaf => {}
                NodeOp::Param(id) => out.accumulate(*id, &g),
                NodeOp::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (p, q, r) = (va.rows, va.cols, vb.cols);
                    if needs(a) {
                        gemm_nt_acc(&g.data, &vb.data, &mut buf(&mut grads, *a, va.shape()).data, p, r, q);
                    }
                    if needs(b) {
                        gemm_tn_acc(&va.data, &g.data, &mut buf(&mut grads, *b, vb.shape()).data, p, q, r);
                    }
                }
                NodeOp::MatMulNt(a, b) => {
                    // c = a b^T: da = g b, db = g^T a
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (p, q, r) = (va.rows, va.cols, vb.rows);
                    if needs(a) {
                        gemm_acc(&g.data, &vb.data, &mut buf(&mut grads, *a, va.shape()).data, p, r, q);
                    }
                    if needs(b) {
                        gemm_tn_acc(&g.data, &va.data, &mut buf(&mut grads, *b, vb.shape()).data, p, r, q);
                    }
                }
                NodeOp::Add(a, b) => {
                    if needs(b) {
                        put(&mut grads, *b, g.clone());
                    }
                    if needs(a) {
                        put(&mut grads, *a, g);
                    }
                }
                NodeOp::Sub(a, b) => {
                    if needs(b) {
                        put(&mut grads, *b, map(&g, |k: usize| -g.data[k]));
                    }
                    if needs(a) {
                        put(&mut grads, *a, g);
                    }
                }
                NodeOp::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if needs(a) {
                        put(&mut grads, *a, map(&g, |k: usize| g.data[k] * vb.data[k]));
                    }
                    if needs(b) {
                        put(&mut grads, *b, map(&g, |k: usize| g.data[k] * va.data[k]));
                    }
                }
                NodeOp::AddBias(a, bias) => {
                    if needs(bias) {
                        let gb = buf(&mut grads, *bias, [1, g.cols]);
                        for row in g.data.chunks(g.cols) {
                            for (o, &x) in gb.data.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                    if needs(a) {
                        put(&mut grads, *a, g);
                    }
                }
                NodeOp::Scale(a, k) => {
                    if needs(a) {
                        put(&mut grads, *a, map(&g, |j: usize| k * g.data[j]));
                    }
                }
                NodeOp::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let s = self.shape(p);
                        if needs(&p) {
                            let mut part = Vec::with_capacity(s[0] * s[1]);
                            for r in 0..s[0] {
                                part.extend_from_slice(&g.data[r * g.cols + offset..r * g.cols + offset + s[1]]);
                            }
                            put(&mut grads, p, Tensor::from_vec(s[0], s[1], part));
                        }
                        offset += s[1];
                    }
                }
                NodeOp::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let s = self.shape(p);
                        let n = s[0] * s[1];
                        if needs(&p) {
                            put(&mut grads, p, Tensor::from_vec(s[0], s[1], g.data[offset..offset + n].to_vec()));
                        }
                        offset += n;
                    }
                }
                NodeOp::SliceCols(a, start) => {
                    if needs(a) {
                        let s = self.shape(*a);
                        let ga = buf(&mut grads, *a, s);
                        for r in 0..g.rows {
                            let dst = &mut ga.data[r * s[1] + start..r * s[1] + start + g.cols];
                            for (o, &x) in dst.iter_mut().zip(g.row_slice(r)) {
                                *o += x;
                            }
                        }
                    }
                }
                NodeOp::GatherRows(a, indices) => {
                    if needs(a) {
                        let s = self.shape(*a);
                        let ga = buf(&mut grads, *a, s);
                        for (r, &i) in indices.iter().enumerate() {
                            let dst = &mut ga.data[i * s[1]..(i + 1) * s[1]];
                            for (o, &x) in dst.iter_mut().zip(g.row_slice(r)) {
                                *o += x;
                            }
                        }
                    }
                }
                NodeOp::MeanRows(a) => {
                    if needs(a) {
                        let s = self.shape(*a);
                        let n = s[0].max(1) as f64;
                        put(&mut grads, *a, Tensor { rows: s[0], cols: s[1], data: (0..s[0] * s[1]).map(|k| g.data[k % s[1]] / n).collect() });
                    }
                }
                NodeOp::Sum(a) => {
                    if needs(a) {
                        let s = self.shape(*a);
                        put(&mut grads, *a, Tensor { rows: s[0], cols: s[1], data: vec![g.data[0]; s[0] * s[1]] });
                    }
                }
                NodeOp::Sigmoid(a) => {
                    if needs(a) {
                        put(&mut grads, *a, map(&g, |k: usize| g.data[k] * own.data[k] * (1.0 - own.data[k])));
                    }
                }
                NodeOp::Tanh(a) => {
                    if needs(a) {
                        put(&mut grads, *a, map(&g, |k: usize| g.data[k] * (1.0 - own.data[k] * own.data[k])));
                    }
                }
                NodeOp::Log(a) => {
                    if needs(a) {
                        let va = self.value(*a);
                        put(&mut grads, *a, map(&g, |k: usize| g.data[k] / va.data[k]));
                    }
                }
                NodeOp::Softmax(a) => {
                    if needs(a) {
                        let dots: Vec<f64> = (0..g.rows)
                            .map(|r| own.row_slice(r).iter().zip(g.row_slice(r)).map(|(y, d)| y * d).sum())
                            .collect();
                        put(&mut grads, *a, map(&g, |k: usize| own.data[k] * (g.data[k] - dots[k / g.cols])));
                    }
                }
                NodeOp::LogSoftmax(a) => {
                    if needs(a) {
                        let totals: Vec<f64> = (0..g.rows).map(|r| g.row_slice(r).iter().sum()).collect();
                        put(&mut grads, *a, map(&g, |k: usize| g.data[k] - own.data[k].exp() * totals[k / g.cols]));
                    }
                }
                NodeOp::Pick(a, index) => {
                    if needs(a) {
                        let s = self.shape(*a);
                        buf(&mut grads, *a, s).data[*index] += g.data[0];
                    }
                }
            }
        }
        Ok(out)
    }
}
