use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Block, ModelParams};
use crate::activations::ActivationRecord;
use crate::corpus::LanguageId;
use crate::error::{bail, Result};
use crate::linalg::{cast1, cast2, Scalar};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn fast_tanh<T: Scalar>(x: T) -> T {
    // tanh(x) = 1 − 2 / (e^{2x} + 1), saturating cleanly at both ends.
    let two = T::of(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + fast_tanh(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = fast_tanh(inner);
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Normalized rows plus the statistics needed for backprop and attribution.
#[derive(Debug, Clone)]
pub struct LnCache<T: Scalar> {
    pub xhat: Array2<T>,
    pub mean: Array1<T>,
    /// `sqrt(var + eps)` per row.
    pub sigma: Array1<T>,
}

pub fn layer_norm<T: Scalar>(x: ArrayView2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let inv_d = T::of(1.0 / d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut mean = Array1::zeros(n);
    let mut sigma = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mu = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let s = (var + T::of(LN_EPS)).sqrt();
        let mut out = xhat.row_mut(i);
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - mu) / s;
        }
        mean[i] = mu;
        sigma[i] = s;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, mean, sigma })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array1<T>,
    dg: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = T::of(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.dot(&xh) / d;
        let inv = T::one() / cache.sigma[i];
        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = (a - m1 - b * m2) * inv;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct BlockCache<T: Scalar> {
    pub x_in: Array2<T>,
    pub ln1: LnCache<T>,
    pub a: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Attention patterns indexed by `seq · n_heads + head`, each `T × T`.
    pub att: Vec<Array2<T>>,
    pub o_cat: Array2<T>,
    pub attn_out: Array2<T>,
    pub x_mid: Array2<T>,
    pub ln2: LnCache<T>,
    /// MLP input.
    pub h: Array2<T>,
    pub u: Array2<T>,
    pub act: Array2<T>,
    /// MLP output, before dropout.
    pub m: Array2<T>,
    pub x_out: Array2<T>,
    pub attn_mask: Option<Array2<T>>,
    pub mlp_mask: Option<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub x0: Array2<T>,
    pub blocks: Vec<BlockCache<T>>,
    pub lnf: LnCache<T>,
    pub y: Array2<T>,
    pub logits: Array2<T>,
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep })
}

/// Softmax over `row[..=i] · scale`, zeroing the masked tail.
#[inline]
fn causal_softmax<T: Scalar>(row: &mut [T], i: usize, scale: T) {
    let (live, masked) = row.split_at_mut(i + 1);
    let mut max = T::neg_infinity();
    for v in live.iter_mut() {
        *v *= scale;
        max = max.max(*v);
    }
    let mut sum = T::zero();
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    live.iter_mut().for_each(|v| *v *= inv);
    masked.fill(T::zero());
}

pub(crate) fn check_tokens<T: Scalar>(params: &ModelParams<T>, tokens: &[u32], seq_len: usize) -> Result<()> {
    let c = &params.config;
    if seq_len == 0 {
        bail!(Validation, "empty token sequence");
    }
    if seq_len > c.context_len {
        bail!(Validation, "sequence length {seq_len} exceeds context length {}", c.context_len);
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        bail!(Validation, "token id {t} out of range for vocabulary of {}", c.vocab_size);
    }
    Ok(())
}

struct SelfAttention<T: Scalar> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    att: Vec<Array2<T>>,
    o_cat: Array2<T>,
}

/// Causal multi-head attention over normalized inputs `a`, before the output projection.
fn self_attention<T: Scalar>(
    blk: &Block<T>,
    a: &Array2<T>,
    batch: usize,
    t_len: usize,
    n_heads: usize,
    d_head: usize,
) -> SelfAttention<T> {
    let scale = T::of(1.0 / (d_head as f64).sqrt());
    let q = a.dot(&blk.wq) + &blk.bq;
    let k = a.dot(&blk.wk) + &blk.bk;
    let v = a.dot(&blk.wv) + &blk.bv;
    let mut o_cat = Array2::zeros((a.nrows(), n_heads * d_head));
    let mut att = Vec::with_capacity(batch * n_heads);
    for b in 0..batch {
        let rows = b * t_len..(b + 1) * t_len;
        for hd in 0..n_heads {
            let cols = hd * d_head..(hd + 1) * d_head;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            for (i, mut row) in scores.outer_iter_mut().enumerate() {
                causal_softmax(row.as_slice_mut().expect("contiguous row"), i, scale);
            }
            o_cat.slice_mut(s![rows.clone(), cols]).assign(&scores.dot(&vh));
            att.push(scores);
        }
    }
    SelfAttention { q, k, v, att, o_cat }
}

/// The block's MLP applied to its (post-LN2) input.
pub fn mlp_forward<T: Scalar>(blk: &Block<T>, h: &Array2<T>) -> Array2<T> {
    (h.dot(&blk.w_in) + &blk.b_in).mapv(gelu).dot(&blk.w_out) + &blk.b_out
}

/// Single-sequence forward pass in which `mlp(layer, h)` supplies each
/// block's MLP output from its input. Returns the logits.
pub fn forward_with_mlp<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    mut mlp: impl FnMut(usize, &Array2<T>) -> Result<Array2<T>>,
) -> Result<Array2<T>> {
    let c = &params.config;
    check_tokens(params, tokens, tokens.len())?;
    let mut x = Array2::zeros((tokens.len(), c.d_model));
    for (i, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&params.tok_emb.row(tok as usize));
        row += &params.pos_emb.row(i);
    }
    for (l, blk) in params.blocks.iter().enumerate() {
        let (a, _) = layer_norm(x.view(), &blk.ln1_g, &blk.ln1_b);
        let att = self_attention(blk, &a, 1, tokens.len(), c.n_heads, c.d_head);
        x = &x + &(att.o_cat.dot(&blk.wo) + &blk.bo);
        let (h, _) = layer_norm(x.view(), &blk.ln2_g, &blk.ln2_b);
        let m = mlp(l, &h)?;
        if m.dim() != x.dim() {
            bail!(Validation, "layer {l} MLP replacement has shape {:?}, expected {:?}", m.dim(), x.dim());
        }
        x = x + m;
    }
    let (y, _) = layer_norm(x.view(), &params.lnf_g, &params.lnf_b);
    Ok(y.dot(&params.unembed))
}

/// Batched forward pass over `batch` equal-length sequences laid out
/// contiguously in `tokens`. Dropout is applied only when `dropout_rng` is
/// given and the configured rate is positive.
pub fn forward_cache<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    batch: usize,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<T>> {
    let c = &params.config;
    if batch == 0 || tokens.len() % batch != 0 {
        bail!(Validation, "{} tokens cannot be split into {batch} sequences", tokens.len());
    }
    let t_len = tokens.len() / batch;
    check_tokens(params, tokens, t_len)?;
    let n = tokens.len();
    let (n_heads, d_head) = (c.n_heads, c.d_head);
    let p_drop = c.dropout;

    let mut x0 = Array2::zeros((n, c.d_model));
    for (i, &tok) in tokens.iter().enumerate() {
        let mut row = x0.row_mut(i);
        row.assign(&params.tok_emb.row(tok as usize));
        row += &params.pos_emb.row(i % t_len);
    }

    let mut x = x0.clone();
    let mut blocks = Vec::with_capacity(c.n_layers);
    for blk in &params.blocks {
        let (a, ln1) = layer_norm(x.view(), &blk.ln1_g, &blk.ln1_b);
        let SelfAttention { q, k, v, att, o_cat } = self_attention(blk, &a, batch, t_len, n_heads, d_head);
        let attn_out = o_cat.dot(&blk.wo) + &blk.bo;
        let attn_mask = match dropout_rng.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(dropout_mask::<T>(rng, attn_out.dim(), p_drop)),
            _ => None,
        };
        let x_mid = match &attn_mask {
            Some(mk) => &x + &(&attn_out * mk),
            None => &x + &attn_out,
        };
        let (h, ln2) = layer_norm(x_mid.view(), &blk.ln2_g, &blk.ln2_b);
        let u = h.dot(&blk.w_in) + &blk.b_in;
        let act = u.mapv(gelu);
        let m = act.dot(&blk.w_out) + &blk.b_out;
        let mlp_mask = match dropout_rng.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(dropout_mask::<T>(rng, m.dim(), p_drop)),
            _ => None,
        };
        let x_out = match &mlp_mask {
            Some(mk) => &x_mid + &(&m * mk),
            None => &x_mid + &m,
        };
        let x_in = std::mem::replace(&mut x, x_out.clone());
        blocks.push(BlockCache {
            x_in,
            ln1,
            a,
            q,
            k,
            v,
            att,
            o_cat,
            attn_out,
            x_mid,
            ln2,
            h,
            u,
            act,
            m,
            x_out,
            attn_mask,
            mlp_mask,
        });
    }
    let (y, lnf) = layer_norm(x.view(), &params.lnf_g, &params.lnf_b);
    let logits = y.dot(&params.unembed);
    Ok(ForwardCache { batch, seq_len: t_len, tokens: tokens.to_vec(), x0, blocks, lnf, y, logits })
}

/// Logits `[len × V]` for a single sequence.
pub fn forward<T: Scalar>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Array2<T>> {
    Ok(forward_cache(params, tokens, 1, None)?.logits)
}

/// Forward pass of one sequence recording every intermediate in 64-bit form.
pub fn capture<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    language: Option<LanguageId>,
) -> Result<ActivationRecord> {
    let fc = forward_cache(params, tokens, 1, None)?;
    let mut rec = ActivationRecord {
        tokens: tokens.to_vec(),
        language,
        embed: cast2(&fc.x0),
        resid_pre: Vec::new(),
        resid_mid: Vec::new(),
        resid_post: Vec::new(),
        ln1_sigma: Vec::new(),
        ln2_sigma: Vec::new(),
        lnf_sigma: cast1(&fc.lnf.sigma),
        attn: Vec::new(),
        h: Vec::new(),
        m: Vec::new(),
        logits: cast2(&fc.logits),
    };
    for blk in &fc.blocks {
        rec.resid_pre.push(cast2(&blk.x_in));
        rec.resid_mid.push(cast2(&blk.x_mid));
        rec.resid_post.push(cast2(&blk.x_out));
        rec.ln1_sigma.push(cast1(&blk.ln1.sigma));
        rec.ln2_sigma.push(cast1(&blk.ln2.sigma));
        rec.attn.push(blk.att.iter().map(cast2).collect());
        rec.h.push(cast2(&blk.h));
        rec.m.push(cast2(&blk.m));
    }
    Ok(rec)
}
