use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::influence::influence_scores;
use super::linear::{FrozenPass, ReadSite};
use super::{AttributionGraph, GraphEdge, GraphNode, NodeKind, GRAPH_VERSION};
use crate::activations::ActivationRecord;
use crate::clt::{decode_batch, encode_batch, CltParams};
use crate::error::{bail, Result};
use crate::linalg::{softmax_in_place, top_k};
use crate::tinylm::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Number of highest-logit candidates that become logit nodes.
    pub top_logits: usize,
    /// Position whose next-token logits are explained; defaults to the last.
    pub target_position: Option<usize>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { top_logits: 5, target_position: None }
    }
}

struct Target {
    id: usize,
    read: ReadSite,
    position: usize,
    g: Array1<f64>,
    /// Bias that belongs to the target itself (the encoder bias).
    own_bias: f64,
}

fn check_shapes(params: &ModelParams<f64>, clt: &CltParams<f64>, record: &ActivationRecord) -> Result<()> {
    let c = &params.config;
    if clt.n_layers != c.n_layers || clt.d_model != c.d_model {
        bail!(
            Validation,
            "transcoder is {} layers × {} dims but the model is {} × {}",
            clt.n_layers,
            clt.d_model,
            c.n_layers,
            c.d_model
        );
    }
    if record.n_layers() != c.n_layers || record.embed.ncols() != c.d_model {
        bail!(Validation, "activation record does not match the model shape");
    }
    if record.is_empty() {
        bail!(Validation, "cannot attribute an empty prompt");
    }
    Ok(())
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Build the full (unpruned) graph for one recorded prompt, with influence
/// already assigned.
pub fn build_attribution_graph(
    params: &ModelParams<f64>,
    clt: &CltParams<f64>,
    record: &ActivationRecord,
    prompt: &str,
    opts: &GraphOptions,
) -> Result<AttributionGraph> {
    check_shapes(params, clt, record)?;
    let n_layers = params.config.n_layers;
    let tpos = opts.target_position.unwrap_or(record.len() - 1);
    if tpos >= record.len() {
        bail!(Validation, "target position {tpos} is outside a {}-token prompt", record.len());
    }
    if opts.top_logits == 0 || opts.top_logits > params.config.vocab_size {
        bail!(Validation, "top_logits must be in 1..={}", params.config.vocab_size);
    }
    let n_pos = tpos + 1;

    let (pre, z): (Vec<Array2<f64>>, Vec<Array2<f64>>) =
        (0..n_layers).map(|l| encode_batch(clt, record.h[l].view(), l)).unzip();
    let errors: Vec<Array2<f64>> = (0..n_layers).map(|s| &record.m[s] - &decode_batch(clt, &z, s)).collect();

    let mut nodes = Vec::new();
    let push = |nodes: &mut Vec<GraphNode>, kind, layer, position, feature_index, token_id, activation| {
        let id = nodes.len();
        nodes.push(GraphNode {
            id,
            kind,
            layer,
            position,
            feature_index,
            token_id,
            label: None,
            activation,
            influence: 0.0,
            probability: None,
            pre_activation: None,
            bias: None,
            multilingual: None,
        });
        id
    };

    let embed_ids: Vec<usize> = (0..n_pos)
        .map(|k| {
            let a = norm(record.embed.row(k));
            push(&mut nodes, NodeKind::Embedding, None, k, None, Some(record.tokens[k]), a)
        })
        .collect();
    // active[l][k] = [(feature index, node id)]
    let mut active: Vec<Vec<Vec<(usize, usize)>>> = vec![vec![Vec::new(); n_pos]; n_layers];
    let mut targets = Vec::new();
    for l in 0..n_layers {
        for k in 0..n_pos {
            for (n, &zv) in z[l].row(k).iter().enumerate() {
                if zv > 0.0 {
                    let id = push(&mut nodes, NodeKind::Feature, Some(l), k, Some(n), None, zv);
                    nodes[id].pre_activation = Some(pre[l][[k, n]]);
                    active[l][k].push((n, id));
                    targets.push(Target {
                        id,
                        read: ReadSite::MlpIn(l),
                        position: k,
                        g: clt.enc_w[l].row(n).to_owned(),
                        own_bias: clt.enc_b[l][n],
                    });
                }
            }
        }
    }
    let error_ids: Vec<Vec<usize>> = (0..n_layers)
        .map(|s| {
            (0..n_pos)
                .map(|k| push(&mut nodes, NodeKind::Error, Some(s), k, None, None, norm(errors[s].row(k))))
                .collect()
        })
        .collect();
    let logit_row: Vec<f64> = record.logits.row(tpos).to_vec();
    let mut probs = logit_row.clone();
    softmax_in_place(&mut probs);
    let candidates = top_k(&logit_row, opts.top_logits);
    let cand_mass: f64 = candidates.iter().map(|&(tok, _)| probs[tok]).sum();
    for &(tok, value) in &candidates {
        let id = push(&mut nodes, NodeKind::Logit, None, tpos, None, Some(tok as u32), value);
        nodes[id].probability = Some(probs[tok] / cand_mass);
        nodes[id].pre_activation = Some(value);
        targets.push(Target {
            id,
            read: ReadSite::FinalNorm,
            position: tpos,
            g: params.unembed.column(tok).to_owned(),
            own_bias: 0.0,
        });
    }

    let pass = FrozenPass::new(params, record);
    let mut edges = Vec::new();
    for tgt in &targets {
        let adj = pass.pullback(tgt.read, tgt.position, tgt.g.view());
        let n_stages = adj.stages.len();
        let upto = tgt.position + 1;

        for (k, &src) in embed_ids.iter().enumerate().take(upto) {
            let w = record.embed.row(k).dot(&adj.stages[0].row(k));
            let a = nodes[src].activation;
            add_edge(&mut edges, src, tgt.id, w, if a > 0.0 { w / a } else { 0.0 });
        }
        // A layer-l feature writes into every stage s+1 with l ≤ s and s+1 < n_stages.
        for (l, act_l) in active.iter().enumerate() {
            if l + 1 >= n_stages {
                break;
            }
            let mut raw: Option<Array2<f64>> = None;
            for s in l..n_stages - 1 {
                let part = adj.stages[s + 1].dot(clt.dec_block(l, s));
                raw = Some(match raw {
                    Some(acc) => acc + part,
                    None => part,
                });
            }
            let raw = raw.expect("at least one stage");
            for (k, feats) in act_l.iter().enumerate().take(upto) {
                for &(n, src) in feats {
                    let r = raw[[k, n]];
                    add_edge(&mut edges, src, tgt.id, nodes[src].activation * r, r);
                }
            }
        }
        for (s, ids) in error_ids.iter().enumerate() {
            if s + 1 >= n_stages {
                break;
            }
            for (k, &src) in ids.iter().enumerate().take(upto) {
                let w = errors[s].row(k).dot(&adj.stages[s + 1].row(k));
                let a = nodes[src].activation;
                add_edge(&mut edges, src, tgt.id, w, if a > 0.0 { w / a } else { 0.0 });
            }
        }

        let mut bias = tgt.own_bias + pass.model_bias(tgt.read, tgt.position, tgt.g.view(), &adj);
        for s in 0..n_stages - 1 {
            bias += adj.stages[s + 1].rows().into_iter().map(|r| r.dot(&clt.dec_b[s])).sum::<f64>();
        }
        nodes[tgt.id].bias = Some(bias);
    }

    let mut graph = AttributionGraph {
        version: GRAPH_VERSION,
        prompt: prompt.to_string(),
        tokens: record.tokens.clone(),
        target_position: tpos,
        nodes,
        edges,
        pruning: None,
    };
    let infl = influence_scores(&graph);
    for (node, v) in graph.nodes.iter_mut().zip(infl) {
        node.influence = v;
    }
    Ok(graph)
}

fn add_edge(edges: &mut Vec<GraphEdge>, src: usize, dst: usize, weight: f64, raw_weight: f64) {
    if weight != 0.0 {
        edges.push(GraphEdge { src, dst, weight, raw_weight });
    }
}
