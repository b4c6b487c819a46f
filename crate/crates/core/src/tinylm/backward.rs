use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_cache, gelu_grad, layer_norm_backward, ForwardCache};
use super::ModelParams;
use crate::error::{bail, Result};
use crate::linalg::Scalar;
use crate::params::ParamSet;

/// Target value for positions excluded from the loss.
pub const IGNORE: u32 = u32::MAX;

/// Equal-length next-token prediction batch, laid out row-major `[batch × seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Shift each sequence by one to form (input, target) pairs and right-pad
    /// with `pad`. Padded positions are masked from the loss.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], pad: u32) -> Result<Self> {
        let seq_len = seqs.iter().map(|s| s.as_ref().len().saturating_sub(1)).max().unwrap_or(0);
        if seqs.is_empty() || seq_len == 0 {
            bail!(Validation, "batch needs at least one sequence of two or more tokens");
        }
        let mut inputs = Vec::with_capacity(seqs.len() * seq_len);
        let mut targets = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            let n = s.len().saturating_sub(1);
            inputs.extend_from_slice(&s[..n]);
            targets.extend_from_slice(&s[1..=n]);
            inputs.extend(std::iter::repeat_n(pad, seq_len - n));
            targets.extend(std::iter::repeat_n(IGNORE, seq_len - n));
        }
        Ok(Self { inputs, targets, batch: seqs.len(), seq_len })
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

/// Mean cross-entropy and `dL/dlogits`.
fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[u32]) -> Result<(f64, Array2<T>)> {
    let valid = targets.iter().filter(|&&t| t != IGNORE).count();
    if valid == 0 {
        bail!(Validation, "every position in the batch is masked");
    }
    let v = logits.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t != IGNORE && t as usize >= v) {
        bail!(Validation, "target id {t} out of range for vocabulary of {v}");
    }
    let inv = T::of(1.0 / valid as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let t = targets[i];
        if t == IGNORE {
            continue;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut g = grad.row_mut(i);
        let mut sum = T::zero();
        for (o, &z) in g.iter_mut().zip(row.iter()) {
            *o = (z - max).exp();
            sum += *o;
        }
        total += (sum.ln() + max - row[t as usize]).f64();
        for o in g.iter_mut() {
            *o = *o / sum * inv;
        }
        g[t as usize] -= inv;
    }
    if !total.is_finite() {
        bail!(Numerical, "non-finite cross-entropy");
    }
    Ok((total / valid as f64, grad))
}

/// Mean token cross-entropy without gradients.
pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<f64> {
    let fc = forward_cache(params, &batch.inputs, batch.batch, None)?;
    Ok(cross_entropy(&fc.logits, &batch.targets)?.0)
}

/// Mean token cross-entropy over unmasked positions and its exact gradient.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelParams<T>)> {
    let fc = forward_cache(params, &batch.inputs, batch.batch, dropout_rng)?;
    let (loss, dlogits) = cross_entropy(&fc.logits, &batch.targets)?;
    let grads = backward(params, &fc, &dlogits);
    Ok((loss, grads))
}

fn backward<T: Scalar>(params: &ModelParams<T>, fc: &ForwardCache<T>, dlogits: &Array2<T>) -> ModelParams<T> {
    let c = &params.config;
    let mut g = params.zeros_like();
    let (t_len, n_heads, d_head) = (fc.seq_len, c.n_heads, c.d_head);
    let scale = T::of(1.0 / (d_head as f64).sqrt());

    g.unembed = fc.y.t().dot(dlogits);
    let dy = dlogits.dot(&params.unembed.t());
    let mut dx = layer_norm_backward(&dy, &fc.lnf, &params.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

    for (l, (blk, bc)) in params.blocks.iter().zip(&fc.blocks).enumerate().rev() {
        let gb = &mut g.blocks[l];

        // MLP branch.
        let dm = match &bc.mlp_mask {
            Some(mk) => &dx * mk,
            None => dx.clone(),
        };
        gb.w_out = bc.act.t().dot(&dm);
        gb.b_out = dm.sum_axis(Axis(0));
        let mut du = dm.dot(&blk.w_out.t());
        du.zip_mut_with(&bc.u, |d, &u| *d *= gelu_grad(u));
        gb.w_in = bc.h.t().dot(&du);
        gb.b_in = du.sum_axis(Axis(0));
        let dh = du.dot(&blk.w_in.t());
        let dx_mid = dx + layer_norm_backward(&dh, &bc.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);

        // Attention branch.
        let dattn = match &bc.attn_mask {
            Some(mk) => &dx_mid * mk,
            None => dx_mid.clone(),
        };
        gb.wo = bc.o_cat.t().dot(&dattn);
        gb.bo = dattn.sum_axis(Axis(0));
        let do_cat = dattn.dot(&blk.wo.t());
        let mut dq = Array2::zeros(bc.q.raw_dim());
        let mut dk = Array2::zeros(bc.k.raw_dim());
        let mut dv = Array2::zeros(bc.v.raw_dim());
        for b in 0..fc.batch {
            let rows = b * t_len..(b + 1) * t_len;
            for hd in 0..n_heads {
                let cols = hd * d_head..(hd + 1) * d_head;
                let a = &bc.att[b * n_heads + hd];
                let doh = do_cat.slice(s![rows.clone(), cols.clone()]);
                let vh = bc.v.slice(s![rows.clone(), cols.clone()]);
                let qh = bc.q.slice(s![rows.clone(), cols.clone()]);
                let kh = bc.k.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&a.t().dot(&doh));
                let mut ds = doh.dot(&vh.t());
                for (i, (mut dsr, ar)) in ds.outer_iter_mut().zip(a.outer_iter()).enumerate() {
                    let dsr = dsr.as_slice_mut().expect("contiguous row");
                    let ar = ar.as_slice().expect("contiguous row");
                    let inner: T = dsr[..=i].iter().zip(&ar[..=i]).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in dsr[..=i].iter_mut().zip(&ar[..=i]) {
                        *d = p * (*d - inner) * scale;
                    }
                    dsr[i + 1..].fill(T::zero());
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        gb.wq = bc.a.t().dot(&dq);
        gb.bq = dq.sum_axis(Axis(0));
        gb.wk = bc.a.t().dot(&dk);
        gb.bk = dk.sum_axis(Axis(0));
        gb.wv = bc.a.t().dot(&dv);
        gb.bv = dv.sum_axis(Axis(0));
        let da = dq.dot(&blk.wq.t()) + dk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
        dx = dx_mid + layer_norm_backward(&da, &bc.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
    }

    for (i, &tok) in fc.tokens.iter().enumerate() {
        let row = dx.row(i);
        let mut te = g.tok_emb.row_mut(tok as usize);
        te += &row;
        let mut pe = g.pos_emb.row_mut(i % t_len);
        pe += &row;
    }
    g
}
