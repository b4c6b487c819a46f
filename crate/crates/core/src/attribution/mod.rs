//! Attribution graphs over a frozen, linearized forward pass: nodes are
//! embeddings, transcoder features, reconstruction errors and candidate
//! logits; edges carry direct linear effects between them.

mod graph;
mod influence;
mod linear;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{build_attribution_graph, GraphOptions};
pub use influence::{influence_scores, prune_graph, INFLUENCE_TOL};
pub use linear::{Adjoints, FrozenPass, ReadSite, WriteSite};

pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Embedding,
    Feature,
    Error,
    Logit,
}

/// Cross-language activation profile of a feature, attached by the analysis stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilingualBadge {
    pub distribution: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    /// Absent for embeddings and logits.
    pub layer: Option<usize>,
    pub position: usize,
    pub feature_index: Option<usize>,
    /// Input token for embeddings, candidate token for logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// `z` for features, the write norm for embeddings and errors, the raw
    /// logit for logit nodes.
    pub activation: f64,
    pub influence: f64,
    /// Softmax probability renormalized over the candidate set (logits only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// Encoder pre-activation or logit value reconstructed by incoming edges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_activation: Option<f64>,
    /// Part of `pre_activation` coming from biases rather than nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multilingual: Option<MultilingualBadge>,
}

impl GraphNode {
    /// Ordering key used to break influence ties: layer, position, index.
    /// Embeddings sort before layer 0 and errors after every feature.
    fn tie_key(&self) -> (i64, usize, usize, usize) {
        let layer = match self.kind {
            NodeKind::Embedding => -1,
            NodeKind::Logit => i64::MAX,
            _ => self.layer.unwrap_or(0) as i64,
        };
        let index = match self.kind {
            NodeKind::Error => usize::MAX,
            _ => self.feature_index.unwrap_or(0),
        };
        (layer, self.position, index, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    /// Attribution scaled by the source magnitude.
    pub weight: f64,
    /// The unscaled linear effect of a unit source.
    pub raw_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningReport {
    pub node_keep: f64,
    pub edge_keep: f64,
    /// Influence share of the retained node prefix.
    pub retained_mass: f64,
    /// Influence share left after orphaned nodes are removed.
    pub retained_mass_after_orphans: f64,
    /// Share of edge effect kept, where effect is `|weight| × influence(dst)`.
    pub retained_edge_effect: f64,
    pub edge_effect: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub edges_before: usize,
    pub edges_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionGraph {
    pub version: u32,
    pub prompt: String,
    pub tokens: Vec<u32>,
    pub target_position: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruningReport>,
}

impl AttributionGraph {
    pub fn node(&self, id: usize) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn logit_ids(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Logit).map(|n| n.id).collect()
    }

    pub fn incoming(&self, id: usize) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(move |e| e.dst == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    /// Checks that edges connect existing nodes and point forward in position.
    pub fn validate(&self) -> Result<()> {
        let pos: std::collections::HashMap<usize, usize> = self.nodes.iter().map(|n| (n.id, n.position)).collect();
        if pos.len() != self.nodes.len() {
            return Err(Error::Validation("duplicate node ids in graph".into()));
        }
        for e in &self.edges {
            match (pos.get(&e.src), pos.get(&e.dst)) {
                (Some(a), Some(b)) if a <= b => {}
                (Some(_), Some(_)) => {
                    return Err(Error::Validation(format!("edge {} -> {} points backwards in position", e.src, e.dst)))
                }
                _ => return Err(Error::Validation(format!("edge {} -> {} references a missing node", e.src, e.dst))),
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
