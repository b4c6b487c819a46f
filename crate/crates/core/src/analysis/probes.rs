use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationRecord;
use crate::clt::{CltParams, FeatureKey};
use crate::error::{bail, Result};
use crate::linalg::argsort_desc;
use crate::tinylm::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlignment {
    pub token: u32,
    pub similarity: f64,
    /// 1 is the most aligned token.
    pub rank: usize,
    /// `1 − (rank − 1)/(V − 1)`: 1.0 for the best token, 0.0 for the worst.
    pub normalized_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub feature: FeatureKey,
    /// Layer whose decoder column was compared with the unembedding.
    pub decoder_layer: usize,
    pub native: TokenAlignment,
    pub reference: TokenAlignment,
}

/// Cosine-style alignment of a feature's decoder direction with unembedding
/// columns. `decoder_layer` defaults to the last layer.
pub fn feature_token_alignment(
    clt: &CltParams<f64>,
    params: &ModelParams<f64>,
    key: FeatureKey,
    native: u32,
    reference: u32,
    decoder_layer: Option<usize>,
) -> Result<Alignment> {
    let v = params.config.vocab_size;
    if key.layer >= clt.n_layers || key.index >= clt.d_features() {
        bail!(Validation, "feature {key} is out of range");
    }
    if clt.d_model != params.config.d_model {
        bail!(Validation, "transcoder width {} does not match the model's {}", clt.d_model, params.config.d_model);
    }
    let dst = decoder_layer.unwrap_or(clt.n_layers - 1);
    if dst < key.layer || dst >= clt.n_layers {
        bail!(Validation, "feature {key} has no decoder into layer {dst}");
    }
    for t in [native, reference] {
        if t as usize >= v {
            bail!(Validation, "token {t} outside vocabulary of {v}");
        }
    }
    let d = clt.dec_block(key.layer, dst).column(key.index);
    let norm = d.dot(&d).sqrt();
    let dir: Array1<f64> = if norm > 0.0 { d.mapv(|x| x / norm) } else { d.to_owned() };
    let sims = dir.dot(&params.unembed).to_vec();
    let mut rank = vec![0; v];
    for (r, t) in argsort_desc(&sims).into_iter().enumerate() {
        rank[t] = r + 1;
    }
    let entry = |t: u32| {
        let r = rank[t as usize];
        TokenAlignment {
            token: t,
            similarity: sims[t as usize],
            rank: r,
            normalized_rank: if v > 1 { 1.0 - (r - 1) as f64 / (v - 1) as f64 } else { 1.0 },
        }
    };
    Ok(Alignment { feature: key, decoder_layer: dst, native: entry(native), reference: entry(reference) })
}

/// A user-defined group of features, optionally restricted to some positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub name: String,
    pub members: Vec<FeatureKey>,
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
}

impl Cluster {
    pub fn validate<T: crate::linalg::Scalar>(&self, clt: &CltParams<T>) -> Result<()> {
        if self.members.is_empty() {
            bail!(Validation, "cluster `{}` has no members", self.name);
        }
        if let Some(k) = self.members.iter().find(|k| k.layer >= clt.n_layers || k.index >= clt.d_features()) {
            bail!(Validation, "cluster `{}` member {k} is out of range", self.name);
        }
        Ok(())
    }

    fn scope(&self, len: usize) -> Vec<usize> {
        match &self.positions {
            Some(p) => p.iter().copied().filter(|&k| k < len).collect(),
            None => (0..len).collect(),
        }
    }
}

/// Sum of member activations over the cluster's positions.
pub fn cluster_activation_strength(record: &ActivationRecord, clt: &CltParams<f64>, cluster: &Cluster) -> Result<f64> {
    cluster.validate(clt)?;
    let scope = cluster.scope(record.len());
    let mut total = 0.0;
    for key in &cluster.members {
        let w = clt.enc_w[key.layer].row(key.index);
        let floor = clt.thresh.get(key.layer).map_or(0.0, |t| t[key.index]);
        for &k in &scope {
            let pre = w.dot(&record.h[key.layer].row(k)) + clt.enc_b[key.layer][key.index];
            if pre > floor {
                total += pre;
            }
        }
    }
    Ok(total)
}

/// Mean of the members' encoder rows.
pub fn cluster_direction(clt: &CltParams<f64>, cluster: &Cluster) -> Result<Array1<f64>> {
    cluster.validate(clt)?;
    let mut dir = Array1::zeros(clt.d_model);
    for key in &cluster.members {
        dir += &clt.enc_w[key.layer].row(key.index);
    }
    Ok(dir / cluster.members.len() as f64)
}

/// Dot product of the post-embedding residual with the cluster's input
/// direction, summed over the cluster's positions.
pub fn embedding_edge_strength(record: &ActivationRecord, clt: &CltParams<f64>, cluster: &Cluster) -> Result<f64> {
    let dir = cluster_direction(clt, cluster)?;
    Ok(cluster.scope(record.len()).iter().map(|&k| record.embed.row(k).dot(&dir)).sum())
}
