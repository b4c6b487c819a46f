//! Helpers shared by the attribution and acceptance tests: random micro
//! models and an independent frozen forward pass used as a perturbation oracle.
#![allow(dead_code)]

use clt_tracer::activations::ActivationRecord;
use clt_tracer::attribution::{
    build_attribution_graph, AttributionGraph, GraphEdge, GraphNode, GraphOptions, NodeKind, GRAPH_VERSION,
};
use clt_tracer::clt::{Activation, CltConfig, CltParams};
use clt_tracer::params::ParamSet;
use clt_tracer::tinylm::{capture, ModelConfig, ModelParams};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_ffn: 16,
        vocab_size: 13,
        context_len: 16,
        dropout: 0.0,
        seed: 5,
    }
}

pub fn noisy_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |_, _, d| {
        for v in d.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    });
    p
}

/// ReLU transcoder with random weights and a slightly negative encoder bias,
/// so a fraction of features fire at each position.
pub fn noisy_clt(n_layers: usize, d_model: usize, d_features: usize, seed: u64) -> CltParams<f64> {
    let cfg = CltConfig {
        d_features,
        activation: Activation::Relu,
        seed,
        ..CltConfig::default()
    };
    let mut p = CltParams::<f64>::init(&cfg, n_layers, d_model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    p.visit_mut(&mut |name, _, d| {
        for v in d.iter_mut() {
            *v += if name.starts_with("enc") && name.ends_with(".b") {
                rng.random_range(-0.6..0.1)
            } else {
                rng.random_range(-0.3..0.3)
            };
        }
    });
    p
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Outputs of the frozen pass: the MLP input of every layer and the final-norm output.
pub struct Frozen {
    pub mlp_in: Vec<Array2<f64>>,
    pub final_out: Array2<f64>,
}

fn frozen_norm(x: &[f64], g: &Array1<f64>, b: &Array1<f64>, sigma: f64) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / sigma + b[i]).collect()
}

/// Re-run the model with attention patterns, LayerNorm denominators and MLP
/// outputs clamped to the recorded values. `inject` adds vectors to the
/// residual: stage 0 is the embedding, stage `s + 1` is after MLP `s`.
pub fn frozen_forward(p: &ModelParams<f64>, rec: &ActivationRecord, inject: &[(usize, usize, Vec<f64>)]) -> Frozen {
    let c = &p.config;
    let (t, d) = (rec.len(), c.d_model);
    let add = |x: &mut Vec<Vec<f64>>, stage: usize| {
        for (s, k, v) in inject {
            if *s == stage {
                for i in 0..d {
                    x[*k][i] += v[i];
                }
            }
        }
    };
    let mut x: Vec<Vec<f64>> = (0..t).map(|k| rec.embed.row(k).to_vec()).collect();
    add(&mut x, 0);
    let mut mlp_in = Vec::new();
    for (l, blk) in p.blocks.iter().enumerate() {
        let a: Vec<Vec<f64>> = (0..t).map(|j| frozen_norm(&x[j], &blk.ln1_g, &blk.ln1_b, rec.ln1_sigma[l][j])).collect();
        let width = c.n_heads * c.d_head;
        let v: Vec<Vec<f64>> = a
            .iter()
            .map(|aj| (0..width).map(|o| blk.bv[o] + (0..d).map(|i| aj[i] * blk.wv[[i, o]]).sum::<f64>()).collect())
            .collect();
        let mut mid = x.clone();
        for i in 0..t {
            let mut cat = vec![0.0; width];
            for h in 0..c.n_heads {
                for j in 0..t {
                    let w = rec.attn[l][h][[i, j]];
                    for e in 0..c.d_head {
                        cat[h * c.d_head + e] += w * v[j][h * c.d_head + e];
                    }
                }
            }
            for o in 0..d {
                mid[i][o] += blk.bo[o] + (0..width).map(|e| cat[e] * blk.wo[[e, o]]).sum::<f64>();
            }
        }
        let h = Array2::from_shape_fn((t, d), |(k, i)| frozen_norm(&mid[k], &blk.ln2_g, &blk.ln2_b, rec.ln2_sigma[l][k])[i]);
        mlp_in.push(h);
        for k in 0..t {
            for i in 0..d {
                mid[k][i] += rec.m[l][[k, i]];
            }
        }
        x = mid;
        add(&mut x, l + 1);
    }
    let final_out = Array2::from_shape_fn((t, d), |(k, i)| frozen_norm(&x[k], &p.lnf_g, &p.lnf_b, rec.lnf_sigma[k])[i]);
    Frozen { mlp_in, final_out }
}

/// A layered random DAG with non-negative influence structure for pruning checks.
pub fn random_graph(seed: u64) -> AttributionGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.random_range(1..4usize);
    let mut nodes = Vec::new();
    let mut layer_of = Vec::new();
    let mut push = |nodes: &mut Vec<GraphNode>, kind, layer: Option<usize>, idx: usize, rank: usize| {
        let id = nodes.len();
        nodes.push(GraphNode {
            id,
            kind,
            layer,
            position: 0,
            feature_index: Some(idx),
            token_id: None,
            label: None,
            activation: 1.0,
            influence: 0.0,
            probability: None,
            pre_activation: None,
            bias: None,
            multilingual: None,
        });
        layer_of.push(rank);
        id
    };
    for i in 0..rng.random_range(1..5usize) {
        push(&mut nodes, NodeKind::Embedding, None, i, 0);
    }
    for l in 0..n_layers {
        for i in 0..rng.random_range(1..12usize) {
            let kind = if rng.random_bool(0.2) { NodeKind::Error } else { NodeKind::Feature };
            push(&mut nodes, kind, Some(l), i, l + 1);
        }
    }
    let n_logits = rng.random_range(1..4usize);
    let mut probs: Vec<f64> = (0..n_logits).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    for (i, p) in probs.iter().enumerate() {
        let id = push(&mut nodes, NodeKind::Logit, None, i, n_layers + 1);
        nodes[id].probability = Some(*p);
    }
    let mut edges = Vec::new();
    for s in 0..nodes.len() {
        for d in 0..nodes.len() {
            if layer_of[s] < layer_of[d] && rng.random_bool(0.4) {
                let w = rng.random_range(-2.0..2.0) * if rng.random_bool(0.2) { 10.0 } else { 1.0 };
                edges.push(GraphEdge { src: s, dst: d, weight: w, raw_weight: w });
            }
        }
    }
    AttributionGraph {
        version: GRAPH_VERSION,
        prompt: String::new(),
        tokens: vec![],
        target_position: 0,
        nodes,
        edges,
        pruning: None,
    }
}

pub fn micro_graph(seed: u64, n_layers: usize, len: usize) -> (AttributionGraph, Frozen, Ctx) {
    let cfg = micro_config(n_layers);
    let p = noisy_params(&cfg, seed);
    let clt = noisy_clt(n_layers, cfg.d_model, 16, seed + 100);
    let rec = capture(&p, &random_tokens(len, cfg.vocab_size, seed + 7), None).unwrap();
    let g = build_attribution_graph(&p, &clt, &rec, "micro", &GraphOptions { top_logits: 3, target_position: None })
        .unwrap();
    let base = frozen_forward(&p, &rec, &[]);
    (g, base, Ctx { p, clt, rec })
}

pub struct Ctx {
    pub p: clt_tracer::tinylm::ModelParams<f64>,
    pub clt: clt_tracer::clt::CltParams<f64>,
    pub rec: clt_tracer::activations::ActivationRecord,
}

/// Residual writes made by a source node, as (stage, position, vector).
pub fn source_writes(ctx: &Ctx, node: &GraphNode) -> Vec<(usize, usize, Vec<f64>)> {
    let k = node.position;
    match node.kind {
        NodeKind::Embedding => vec![(0, k, ctx.rec.embed.row(k).to_vec())],
        NodeKind::Feature => {
            let (l, n) = (node.layer.unwrap(), node.feature_index.unwrap());
            (l..ctx.clt.n_layers)
                .map(|s| (s + 1, k, ctx.clt.dec_block(l, s).column(n).mapv(|w| w * node.activation).to_vec()))
                .collect()
        }
        NodeKind::Error => {
            let s = node.layer.unwrap();
            let z: Vec<_> = (0..ctx.clt.n_layers)
                .map(|l| clt_tracer::clt::encode_batch(&ctx.clt, ctx.rec.h[l].view(), l).1)
                .collect();
            let e = &ctx.rec.m[s] - &clt_tracer::clt::decode_batch(&ctx.clt, &z, s);
            vec![(s + 1, k, e.row(k).to_vec())]
        }
        NodeKind::Logit => unreachable!(),
    }
}

pub fn target_value(ctx: &Ctx, fz: &Frozen, node: &GraphNode) -> f64 {
    let k = node.position;
    match node.kind {
        NodeKind::Feature => {
            let (l, n) = (node.layer.unwrap(), node.feature_index.unwrap());
            ctx.clt.enc_w[l].row(n).dot(&fz.mlp_in[l].row(k)) + ctx.clt.enc_b[l][n]
        }
        NodeKind::Logit => ctx.p.unembed.column(node.token_id.unwrap() as usize).dot(&fz.final_out.row(k)),
        _ => unreachable!(),
    }
}
