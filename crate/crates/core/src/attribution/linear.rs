//! The frozen, linearized residual stream: attention patterns and LayerNorm
//! denominators are held at recorded values and MLPs are cut, so the map from
//! a residual-stream write to a later read is exactly linear.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::activations::ActivationRecord;
use crate::tinylm::ModelParams;

/// Where a perturbation enters the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WriteSite {
    /// The token-plus-position embedding, before block 0.
    Embedding,
    /// Added to the residual with the MLP output of this layer.
    AfterMlp(usize),
}

/// Where the linearized stream is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadSite {
    /// The post-LN2 input of this layer's MLP.
    MlpIn(usize),
    /// The final-norm output feeding the unembedding.
    FinalNorm,
}

impl WriteSite {
    /// Index of the residual stage this write lands in: the stream entering
    /// block `stage` (or the final norm when `stage == n_layers`).
    pub fn stage(self) -> usize {
        match self {
            WriteSite::Embedding => 0,
            WriteSite::AfterMlp(s) => s + 1,
        }
    }
}

/// Adjoints of one read functional with respect to the residual stream.
#[derive(Debug, Clone)]
pub struct Adjoints {
    /// `stages[i]` is `[T × d]`: the gradient at the stream entering block `i`.
    /// Writes at stage `i` are valid sources iff `i < stages.len()`.
    pub stages: Vec<Array2<f64>>,
    /// Gradient at the post-attention stream of each block that the read sees.
    pub mid: Vec<Array2<f64>>,
}

/// A frozen view of one recorded forward pass.
pub struct FrozenPass<'a> {
    pub params: &'a ModelParams<f64>,
    pub record: &'a ActivationRecord,
}

fn ln_lin(v: ArrayView1<f64>, gamma: &Array1<f64>, sigma: f64) -> Array1<f64> {
    let mean = v.mean().unwrap_or(0.0);
    v.iter().zip(gamma).map(|(&x, &g)| g * (x - mean) / sigma).collect()
}

/// Transpose of [`ln_lin`]; the centering projection is symmetric.
fn ln_lin_t(g_out: ArrayView1<f64>, gamma: &Array1<f64>, sigma: f64) -> Array1<f64> {
    let u: Array1<f64> = g_out.iter().zip(gamma).map(|(&a, &g)| a * g / sigma).collect();
    let mean = u.mean().unwrap_or(0.0);
    u - mean
}

impl<'a> FrozenPass<'a> {
    pub fn new(params: &'a ModelParams<f64>, record: &'a ActivationRecord) -> Self {
        Self { params, record }
    }

    fn n_layers(&self) -> usize {
        self.params.blocks.len()
    }

    fn read_stage(&self, read: ReadSite) -> usize {
        match read {
            ReadSite::MlpIn(l) => l,
            ReadSite::FinalNorm => self.n_layers(),
        }
    }

    fn read_norm(&self, read: ReadSite, pos: usize) -> (&Array1<f64>, &Array1<f64>, f64) {
        match read {
            ReadSite::MlpIn(l) => {
                let b = &self.params.blocks[l];
                (&b.ln2_g, &b.ln2_b, self.record.ln2_sigma[l][pos])
            }
            ReadSite::FinalNorm => (&self.params.lnf_g, &self.params.lnf_b, self.record.lnf_sigma[pos]),
        }
    }

    /// Frozen attention output for a residual perturbation `delta` `[T × d]`.
    pub fn attn_lin(&self, layer: usize, delta: &Array2<f64>) -> Array2<f64> {
        let blk = &self.params.blocks[layer];
        let c = &self.params.config;
        let sig = &self.record.ln1_sigma[layer];
        let mut a = Array2::zeros(delta.raw_dim());
        for (j, row) in delta.outer_iter().enumerate() {
            a.row_mut(j).assign(&ln_lin(row, &blk.ln1_g, sig[j]));
        }
        let v = a.dot(&blk.wv);
        let mut o = Array2::zeros(v.raw_dim());
        for (h, pat) in self.record.attn[layer].iter().enumerate() {
            let cols = h * c.d_head..(h + 1) * c.d_head;
            o.slice_mut(s![.., cols.clone()]).assign(&pat.dot(&v.slice(s![.., cols])));
        }
        o.dot(&blk.wo)
    }

    /// Transpose of [`FrozenPass::attn_lin`].
    pub fn attn_lin_t(&self, layer: usize, adj: &Array2<f64>) -> Array2<f64> {
        let blk = &self.params.blocks[layer];
        let c = &self.params.config;
        let sig = &self.record.ln1_sigma[layer];
        let go = adj.dot(&blk.wo.t());
        let mut gv = Array2::zeros(go.raw_dim());
        for (h, pat) in self.record.attn[layer].iter().enumerate() {
            let cols = h * c.d_head..(h + 1) * c.d_head;
            gv.slice_mut(s![.., cols.clone()]).assign(&pat.t().dot(&go.slice(s![.., cols])));
        }
        let ga = gv.dot(&blk.wv.t());
        let mut out = Array2::zeros(adj.raw_dim());
        for (j, row) in ga.outer_iter().enumerate() {
            out.row_mut(j).assign(&ln_lin_t(row, &blk.ln1_g, sig[j]));
        }
        out
    }

    /// Push an additive write `v` at (`write`, `pos`) forward to (`read`,
    /// `read_pos`). Returns zero when the read is not downstream of the write.
    pub fn propagate(
        &self,
        write: WriteSite,
        pos: usize,
        v: ArrayView1<f64>,
        read: ReadSite,
        read_pos: usize,
    ) -> Array1<f64> {
        let d = self.params.config.d_model;
        let t = self.record.len();
        let top = self.read_stage(read);
        if read_pos < pos || write.stage() > top || pos >= t || read_pos >= t {
            return Array1::zeros(d);
        }
        let mut delta = Array2::<f64>::zeros((t, d));
        delta.row_mut(pos).assign(&v);
        // Blocks strictly between the write and the read contribute their
        // attention; a block-`l` MLP read also sees block `l`'s attention.
        let last_attn = match read {
            ReadSite::MlpIn(l) => l + 1,
            ReadSite::FinalNorm => self.n_layers(),
        };
        for b in write.stage()..last_attn {
            delta = &delta + &self.attn_lin(b, &delta);
        }
        let (g, _, sigma) = self.read_norm(read, read_pos);
        ln_lin(delta.row(read_pos), g, sigma)
    }

    /// Gradient of `g · read(read_pos)` with respect to every upstream
    /// residual stage.
    pub fn pullback(&self, read: ReadSite, read_pos: usize, g: ArrayView1<f64>) -> Adjoints {
        let d = self.params.config.d_model;
        let t = self.record.len();
        let (gamma, _, sigma) = self.read_norm(read, read_pos);
        let mut adj = Array2::<f64>::zeros((t, d));
        adj.row_mut(read_pos).assign(&ln_lin_t(g, gamma, sigma));
        let top = self.read_stage(read);
        let mut stages = vec![Array2::zeros((t, d)); top + 1];
        // Blocks `0..top` always contribute attention; an MLP read also sees block `top`.
        let n_mid = if top < self.n_layers() { top + 1 } else { top };
        let mut mid = vec![Array2::zeros((t, d)); n_mid];
        match read {
            ReadSite::MlpIn(l) => {
                stages[l] = &adj + &self.attn_lin_t(l, &adj);
                mid[l] = adj;
            }
            ReadSite::FinalNorm => stages[top] = adj,
        }
        for b in (0..top).rev() {
            // The MLP is cut, so the post-attention adjoint equals the block output's.
            let m = stages[b + 1].clone();
            stages[b] = &m + &self.attn_lin_t(b, &m);
            mid[b] = m;
        }
        Adjoints { stages, mid }
    }

    /// Constant part of `g · read(read_pos)`: LayerNorm shifts and attention
    /// biases reaching the read. Transcoder biases are accounted separately.
    pub fn model_bias(&self, read: ReadSite, read_pos: usize, g: ArrayView1<f64>, adj: &Adjoints) -> f64 {
        let (_, beta, _) = self.read_norm(read, read_pos);
        let mut total = g.dot(beta);
        for (b, m) in adj.mid.iter().enumerate() {
            let blk = &self.params.blocks[b];
            // Attention rows sum to one, so the constant write is the same at every position.
            let c = (blk.ln1_b.dot(&blk.wv) + &blk.bv).dot(&blk.wo) + &blk.bo;
            total += m.rows().into_iter().map(|r| r.dot(&c)).sum::<f64>();
        }
        total
    }
}
