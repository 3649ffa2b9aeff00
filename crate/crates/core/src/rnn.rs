//! Bidirectional GRU over batches of token-id sequences.
//!
//! Sequences of different lengths share one pass: row `b` of every step
//! belongs to sequence `b`, and steps beyond a sequence's end leave its state
//! untouched. Outputs of the two directions are summed.

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub wx: ParamId,
    pub bx: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
}

impl GruParams {
    pub fn new(p: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        GruParams {
            wx: p.add_uniform(&format!("{name}.wx"), input, 3 * hidden, hidden, rng),
            bx: p.add_uniform(&format!("{name}.bx"), 1, 3 * hidden, hidden, rng),
            wh: p.add_uniform(&format!("{name}.wh"), hidden, 3 * hidden, hidden, rng),
            bh: p.add_uniform(&format!("{name}.bh"), 1, 3 * hidden, hidden, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiGru {
    pub embed: ParamId,
    pub fwd: GruParams,
    pub bwd: GruParams,
    pub hidden: usize,
}

impl BiGru {
    pub fn new(p: &mut ParamStore, name: &str, vocab: usize, embed_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        BiGru {
            embed: p.add_uniform(&format!("{name}.embed"), vocab, embed_dim, embed_dim, rng),
            fwd: GruParams::new(p, &format!("{name}.fwd"), embed_dim, hidden, rng),
            bwd: GruParams::new(p, &format!("{name}.bwd"), embed_dim, hidden, rng),
            hidden,
        }
    }

    /// Per-sequence `len x hidden` outputs. Every sequence must be non-empty.
    pub fn encode_batch(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Vec<Var>, AutodiffError> {
        let b = seqs.len();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let t_max = lens.iter().copied().max().unwrap_or(0);
        // Step-major ids; padding reuses id 0 and is masked out.
        let mut ids = Vec::with_capacity(t_max * b);
        for t in 0..t_max {
            for s in seqs {
                ids.push(s.get(t).copied().unwrap_or(0));
            }
        }
        let x = g.embedding_lookup(self.embed, &ids)?;
        let mut stacked = Vec::with_capacity(2);
        for (gp, reverse) in [(self.fwd, false), (self.bwd, true)] {
            let wx = g.param(gp.wx);
            let bx = g.param(gp.bx);
            let xp = g.matmul(x, wx)?;
            let xp = g.add_bias(xp, bx)?;
            let outs = self.pass(g, xp, gp, &lens, t_max, reverse)?;
            stacked.push(g.concat_rows(&outs)?);
        }
        let both = g.add(stacked[0], stacked[1])?;
        (0..b)
            .map(|i| {
                let rows: Vec<usize> = (0..lens[i]).map(|t| t * b + i).collect();
                g.gather_rows(both, &rows)
            })
            .collect()
    }

    fn pass(
        &self,
        g: &mut Graph,
        xp: Var,
        gp: GruParams,
        lens: &[usize],
        t_max: usize,
        reverse: bool,
    ) -> Result<Vec<Var>, AutodiffError> {
        let (b, h_dim) = (lens.len(), self.hidden);
        let wh = g.param(gp.wh);
        let bh = g.param(gp.bh);
        let mut h = g.constant(Tensor::zeros(b, h_dim));
        let mut outs = vec![h; t_max];
        let order: Vec<usize> = if reverse { (0..t_max).rev().collect() } else { (0..t_max).collect() };
        for t in order {
            let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
            let gx = g.gather_rows(xp, &rows)?;
            let gh = g.matmul(h, wh)?;
            let gh = g.add_bias(gh, bh)?;
            let gx_rz = g.slice_cols(gx, 0, 2 * h_dim)?;
            let gh_rz = g.slice_cols(gh, 0, 2 * h_dim)?;
            let rz = g.add(gx_rz, gh_rz)?;
            let rz = g.sigmoid(rz)?;
            let r = g.slice_cols(rz, 0, h_dim)?;
            let z = g.slice_cols(rz, h_dim, h_dim)?;
            let gx_n = g.slice_cols(gx, 2 * h_dim, h_dim)?;
            let gh_n = g.slice_cols(gh, 2 * h_dim, h_dim)?;
            let rn = g.mul(r, gh_n)?;
            let n = g.add(gx_n, rn)?;
            let n = g.tanh(n)?;
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            let next = g.add(n, zd)?;
            h = if lens.iter().all(|&l| t < l) {
                next
            } else {
                let mut keep = Tensor::zeros(b, h_dim);
                let mut take = Tensor::zeros(b, h_dim);
                for (i, &l) in lens.iter().enumerate() {
                    let row = if t < l { &mut take } else { &mut keep };
                    row.data_mut()[i * h_dim..(i + 1) * h_dim].iter_mut().for_each(|v| *v = 1.0);
                }
                let take = g.constant(take);
                let keep = g.constant(keep);
                let a = g.mul(next, take)?;
                let c = g.mul(h, keep)?;
                g.add(a, c)?
            };
            outs[t] = h;
        }
        Ok(outs)
    }
}
