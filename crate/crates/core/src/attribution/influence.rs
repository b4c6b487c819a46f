use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use super::{AttributionGraph, NodeKind, PruningReport};

/// Series terms whose total mass falls below this are dropped.
pub const INFLUENCE_TOL: f64 = 1e-6;

/// Indirect influence of every node on the logit nodes, aligned with
/// `graph.nodes`.
///
/// Incoming absolute weights are normalized per target. Logit nodes are
/// weighted by their candidate probability (uniform when absent), and the
/// series `I + Â + Â² + …` is summed until an increment carries less than
/// [`INFLUENCE_TOL`] mass.
pub fn influence_scores(graph: &AttributionGraph) -> Vec<f64> {
    let n = graph.nodes.len();
    let index: HashMap<usize, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut in_mass = vec![0.0; n];
    let edges: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .filter_map(|e| Some((index.get(&e.src).copied()?, index.get(&e.dst).copied()?, e.weight.abs())))
        .collect();
    for &(_, d, w) in &edges {
        in_mass[d] += w;
    }

    let logits: Vec<usize> = (0..n).filter(|&i| graph.nodes[i].kind == NodeKind::Logit).collect();
    let mut current = vec![0.0; n];
    for &i in &logits {
        current[i] = graph.nodes[i].probability.unwrap_or(1.0 / logits.len() as f64);
    }
    let mut total = current.clone();
    // On a DAG the series is finite; the cap only guards malformed input.
    for _ in 0..=n {
        let mut next = vec![0.0; n];
        for &(s, d, w) in &edges {
            if current[d] != 0.0 && in_mass[d] > 0.0 {
                next[s] += current[d] * w / in_mass[d];
            }
        }
        let mass: f64 = next.iter().sum();
        for (t, v) in total.iter_mut().zip(&next) {
            *t += v;
        }
        if mass < INFLUENCE_TOL {
            break;
        }
        current = next;
    }
    total
}

/// Shortest prefix of `values` (already in the desired order) whose running
/// sum reaches `keep × total`. Returns the prefix length and the kept share.
fn minimal_prefix(values: &[f64], keep: f64) -> (usize, f64) {
    let total: f64 = values.iter().sum();
    if keep >= 1.0 {
        return (values.len(), 1.0);
    }
    let need = keep.max(0.0) * total;
    let mut cum = 0.0;
    let mut len = 0;
    while len < values.len() && cum < need {
        cum += values[len];
        len += 1;
    }
    let share = if total > 0.0 { cum / total } else { 1.0 };
    (len, share)
}

/// Keep the most influential nodes, then the highest-effect edges among
/// them, then drop non-logit nodes left without edges. With both thresholds
/// at 1.0 the graph is returned unchanged apart from the report.
pub fn prune_graph(graph: &AttributionGraph, node_keep: f64, edge_keep: f64) -> AttributionGraph {
    let infl = influence_scores(graph);
    let index: HashMap<usize, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

    let mut order: Vec<usize> = (0..graph.nodes.len()).filter(|&i| graph.nodes[i].kind != NodeKind::Logit).collect();
    order.sort_by(|&a, &b| {
        infl[b]
            .partial_cmp(&infl[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| graph.nodes[a].tie_key().cmp(&graph.nodes[b].tie_key()))
    });
    let masses: Vec<f64> = order.iter().map(|&i| infl[i]).collect();
    let (n_keep, node_share) = minimal_prefix(&masses, node_keep);
    let mut keep: HashSet<usize> = order[..n_keep].iter().copied().collect();
    keep.extend((0..graph.nodes.len()).filter(|&i| graph.nodes[i].kind == NodeKind::Logit));

    let mut cand: Vec<(usize, f64)> = graph
        .edges
        .iter()
        .enumerate()
        .filter_map(|(ei, e)| {
            let (s, d) = (*index.get(&e.src)?, *index.get(&e.dst)?);
            (keep.contains(&s) && keep.contains(&d)).then(|| (ei, e.weight.abs() * infl[d]))
        })
        .collect();
    cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let effects: Vec<f64> = cand.iter().map(|c| c.1).collect();
    let (e_keep, edge_share) = minimal_prefix(&effects, edge_keep);
    let mut kept_edges: Vec<usize> = cand[..e_keep].iter().map(|c| c.0).collect();
    kept_edges.sort_unstable();

    let unchanged = node_keep >= 1.0 && edge_keep >= 1.0;
    if !unchanged {
        let mut touched = HashSet::new();
        for &ei in &kept_edges {
            touched.insert(index[&graph.edges[ei].src]);
            touched.insert(index[&graph.edges[ei].dst]);
        }
        keep.retain(|&i| graph.nodes[i].kind == NodeKind::Logit || touched.contains(&i));
    }

    let total: f64 = masses.iter().sum();
    let kept_mass: f64 = order.iter().filter(|i| keep.contains(i)).map(|&i| infl[i]).sum();
    let mut nodes: Vec<_> = (0..graph.nodes.len())
        .filter(|i| keep.contains(i))
        .map(|i| {
            let mut n = graph.nodes[i].clone();
            n.influence = infl[i];
            n
        })
        .collect();
    nodes.sort_by_key(|n| n.id);
    let edges: Vec<_> = kept_edges.iter().map(|&ei| graph.edges[ei].clone()).collect();
    let report = PruningReport {
        node_keep,
        edge_keep,
        retained_mass: node_share,
        retained_mass_after_orphans: if total > 0.0 { kept_mass / total } else { 1.0 },
        retained_edge_effect: edge_share,
        edge_effect: "abs_weight_times_target_influence".into(),
        nodes_before: graph.nodes.len(),
        nodes_after: nodes.len(),
        edges_before: graph.edges.len(),
        edges_after: edges.len(),
    };
    AttributionGraph { nodes, edges, pruning: Some(report), ..graph.clone() }
}
