use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::linalg::{cast1, cast2, randn, Scalar};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    /// `d_model × n_heads·d_head`
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    /// `n_heads·d_head × d_model`
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    /// `d_model × d_ffn`
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    /// `d_ffn × d_model`
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub tok_emb: Array2<T>,
    /// `context_len × d_model`
    pub pos_emb: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    /// `d_model × vocab`
    pub unembed: Array2<T>,
}

impl<T: Scalar> Block<T> {
    fn map<U: Scalar>(&self) -> Block<U> {
        Block {
            ln1_g: cast1(&self.ln1_g),
            ln1_b: cast1(&self.ln1_b),
            wq: cast2(&self.wq),
            bq: cast1(&self.bq),
            wk: cast2(&self.wk),
            bk: cast1(&self.bk),
            wv: cast2(&self.wv),
            bv: cast1(&self.bv),
            wo: cast2(&self.wo),
            bo: cast1(&self.bo),
            ln2_g: cast1(&self.ln2_g),
            ln2_b: cast1(&self.ln2_b),
            w_in: cast2(&self.w_in),
            b_in: cast1(&self.b_in),
            w_out: cast2(&self.w_out),
            b_out: cast1(&self.b_out),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded init: N(0, 0.02) matrices, residual-output projections scaled by
    /// `1/√(2·n_layers)`, zero biases, unit LayerNorm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, a, f) = (config.d_model, config.attn_width(), config.d_ffn);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = randn(&mut rng, config.vocab_size, d, std);
        let pos_emb = randn(&mut rng, config.context_len, d, std);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: randn(&mut rng, d, a, std),
                bq: Array1::zeros(a),
                wk: randn(&mut rng, d, a, std),
                bk: Array1::zeros(a),
                wv: randn(&mut rng, d, a, std),
                bv: Array1::zeros(a),
                wo: randn(&mut rng, a, d, proj_std),
                bo: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_in: randn(&mut rng, d, f, std),
                b_in: Array1::zeros(f),
                w_out: randn(&mut rng, f, d, proj_std),
                b_out: Array1::zeros(d),
            })
            .collect();
        let unembed = randn(&mut rng, d, config.vocab_size, std);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            unembed,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: cast2(&self.tok_emb),
            pos_emb: cast2(&self.pos_emb),
            blocks: self.blocks.iter().map(Block::map).collect(),
            lnf_g: cast1(&self.lnf_g),
            lnf_b: cast1(&self.lnf_b),
            unembed: cast2(&self.unembed),
        }
    }
}

fn s2<T>(a: &Array2<T>) -> [usize; 2] {
    [a.nrows(), a.ncols()]
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, "ln1.g");
        $m!(ln1_b, "ln1.b");
        $m!(wq, "attn.q.W");
        $m!(bq, "attn.q.b");
        $m!(wk, "attn.k.W");
        $m!(bk, "attn.k.b");
        $m!(wv, "attn.v.W");
        $m!(bv, "attn.v.b");
        $m!(wo, "attn.o.W");
        $m!(bo, "attn.o.b");
        $m!(ln2_g, "ln2.g");
        $m!(ln2_b, "ln2.b");
        $m!(w_in, "mlp.in.W");
        $m!(b_in, "mlp.in.b");
        $m!(w_out, "mlp.out.W");
        $m!(b_out, "mlp.out.b");
    };
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f("tok_emb", &s2(&self.tok_emb), self.tok_emb.as_slice().unwrap());
        f("pos_emb", &s2(&self.pos_emb), self.pos_emb.as_slice().unwrap());
        for (i, b) in self.blocks.iter().enumerate() {
            macro_rules! v {
                ($field:ident, $name:literal) => {
                    f(
                        &format!("blocks.{i}.{}", $name),
                        b.$field.shape(),
                        b.$field.as_slice().unwrap(),
                    )
                };
            }
            block_fields!(v);
        }
        f("ln_f.g", self.lnf_g.shape(), self.lnf_g.as_slice().unwrap());
        f("ln_f.b", self.lnf_b.shape(), self.lnf_b.as_slice().unwrap());
        f("unembed.W", &s2(&self.unembed), self.unembed.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let sh = s2(&self.tok_emb);
        f("tok_emb", &sh, self.tok_emb.as_slice_mut().unwrap());
        let sh = s2(&self.pos_emb);
        f("pos_emb", &sh, self.pos_emb.as_slice_mut().unwrap());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            macro_rules! v {
                ($field:ident, $name:literal) => {{
                    let shape = b.$field.shape().to_vec();
                    f(
                        &format!("blocks.{i}.{}", $name),
                        &shape,
                        b.$field.as_slice_mut().unwrap(),
                    )
                }};
            }
            block_fields!(v);
        }
        let sh = self.lnf_g.shape().to_vec();
        f("ln_f.g", &sh, self.lnf_g.as_slice_mut().unwrap());
        f("ln_f.b", &sh, self.lnf_b.as_slice_mut().unwrap());
        let sh = s2(&self.unembed);
        f("unembed.W", &sh, self.unembed.as_slice_mut().unwrap());
    }
}
