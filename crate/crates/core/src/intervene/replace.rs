use ndarray::Array2;

use super::{FeatureEdit, InterventionResult, InterventionSpec};
use crate::clt::{decode_batch, encode_batch, CltParams};
use crate::error::{bail, Result};
use crate::linalg::{rank_of, top_k};
use crate::tinylm::{forward_with_mlp, mlp_forward, ModelParams};

/// Outcome of one replacement forward pass.
#[derive(Debug, Clone)]
pub struct ReplacementPass {
    /// `[T × V]`.
    pub logits: Array2<f64>,
    /// Feature activations after edits, `[T × F]` per layer.
    pub z: Vec<Array2<f64>>,
    /// Error term added at each layer.
    pub errors: Vec<Array2<f64>>,
}

fn apply_edits(z: &mut Array2<f64>, layer: usize, edits: &[FeatureEdit]) {
    for e in edits.iter().filter(|e| e.feature.layer == layer) {
        let n = e.feature.index;
        match &e.positions {
            Some(ps) => {
                for &p in ps {
                    z[[p, n]] = e.mode.apply(z[[p, n]]);
                }
            }
            None => z.column_mut(n).mapv_inplace(|v| e.mode.apply(v)),
        }
    }
}

/// Run the model with every MLP replaced by the transcoder.
///
/// With `errors = None` this is the unedited pass: each layer's error term is
/// computed live as `MLP(h) − m̂` and `edits` must be empty. Otherwise the
/// given per-layer errors are added unchanged.
pub fn replacement_forward(
    params: &ModelParams<f64>,
    clt: &CltParams<f64>,
    tokens: &[u32],
    edits: &[FeatureEdit],
    errors: Option<&[Array2<f64>]>,
) -> Result<ReplacementPass> {
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
    if errors.is_none() && !edits.is_empty() {
        bail!(Validation, "edits need the error terms of an unedited pass");
    }
    if let Some(es) = errors {
        if es.len() != c.n_layers || es.iter().any(|e| e.dim() != (tokens.len(), c.d_model)) {
            bail!(Validation, "error terms do not match a {}-token prompt", tokens.len());
        }
    }
    let mut zs: Vec<Array2<f64>> = Vec::with_capacity(c.n_layers);
    let mut used: Vec<Array2<f64>> = Vec::with_capacity(c.n_layers);
    let logits = forward_with_mlp(params, tokens, |l, h| {
        let (_, mut z) = encode_batch(clt, h.view(), l);
        apply_edits(&mut z, l, edits);
        zs.push(z);
        let m_hat = decode_batch(clt, &zs, l);
        let err = match errors {
            Some(es) => es[l].clone(),
            None => mlp_forward(&params.blocks[l], h) - &m_hat,
        };
        let out = m_hat + &err;
        used.push(err);
        Ok(out)
    })?;
    Ok(ReplacementPass { logits, z: zs, errors: used })
}

fn top(logits: &[f64], k: usize) -> Vec<(u32, f64)> {
    top_k(logits, k).into_iter().map(|(t, v)| (t as u32, v)).collect()
}

/// Compare an edited replacement pass with the unedited one.
pub fn run_with_interventions(
    params: &ModelParams<f64>,
    clt: &CltParams<f64>,
    tokens: &[u32],
    spec: &InterventionSpec,
) -> Result<InterventionResult> {
    spec.validate(clt.n_layers, clt.d_features(), tokens.len())?;
    if let Some(t) = spec.target_token.filter(|&t| t as usize >= params.config.vocab_size) {
        bail!(Validation, "target token {t} outside vocabulary of {}", params.config.vocab_size);
    }
    let base = replacement_forward(params, clt, tokens, &[], None)?;
    let edited = replacement_forward(params, clt, tokens, &spec.edits, Some(&base.errors))?;
    let pos = spec.position.unwrap_or(tokens.len() - 1);
    let b = base.logits.row(pos).to_vec();
    let e = edited.logits.row(pos).to_vec();
    Ok(InterventionResult {
        position: pos,
        baseline_top: top(&b, spec.top_k),
        edited_top: top(&e, spec.top_k),
        target_token: spec.target_token,
        rank_before: spec.target_token.map(|t| rank_of(&b, t as usize)),
        rank_after: spec.target_token.map(|t| rank_of(&e, t as usize)),
        edits: spec.edits.clone(),
        baseline_logits: b,
        edited_logits: e,
    })
}
