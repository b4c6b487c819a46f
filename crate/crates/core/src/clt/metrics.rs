use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use super::loss::forward;
use super::CltParams;
use crate::activations::ActivationStore;
use crate::error::{bail, Result};
use crate::linalg::{cast2, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    /// `1 − Σ‖m̂ − m‖² / Σ‖m − mean(m)‖²`.
    pub explained_variance: f64,
    /// Features never active on the evaluation tokens.
    pub dead_features: usize,
    /// Mean active features per token.
    pub mean_l0: f64,
}

/// Metrics over the first `max_tokens` token rows of the store.
pub fn clt_metrics<T: Scalar>(
    p: &CltParams<T>,
    store: &ActivationStore,
    max_tokens: usize,
) -> Result<Vec<LayerMetrics>> {
    let n = store.n_tokens().min(max_tokens);
    if n == 0 {
        bail!(Validation, "cannot evaluate a transcoder on an empty store");
    }
    if store.n_layers() != p.n_layers {
        bail!(Validation, "store has {} layers, transcoder {}", store.n_layers(), p.n_layers);
    }
    let (nl, d, f) = (p.n_layers, p.d_model, p.d_features());
    let mut err = vec![0.0; nl];
    let mut sum = vec![Array1::<f64>::zeros(d); nl];
    let mut sum_sq = vec![0.0; nl];
    let mut active_ever = vec![vec![false; f]; nl];
    let mut active_total = vec![0usize; nl];
    const CHUNK: usize = 4096;
    for start in (0..n).step_by(CHUNK) {
        let rows = start..(start + CHUNK).min(n);
        let h: Vec<_> = store.h.iter().map(|a| cast2::<f32, T>(&a.slice(s![rows.clone(), ..]).to_owned())).collect();
        let fw = forward(p, &h);
        for l in 0..nl {
            let m = store.m[l].slice(s![rows.clone(), ..]);
            for (mh, mv) in fw.m_hat[l].iter().zip(m.iter()) {
                let e = mh.f64() - *mv as f64;
                err[l] += e * e;
            }
            for row in m.outer_iter() {
                for (s, &v) in sum[l].iter_mut().zip(row.iter()) {
                    *s += v as f64;
                }
            }
            sum_sq[l] += m.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            for row in fw.z[l].outer_iter() {
                for (k, &v) in row.iter().enumerate() {
                    if v > T::zero() {
                        active_ever[l][k] = true;
                        active_total[l] += 1;
                    }
                }
            }
        }
    }
    Ok((0..nl)
        .map(|l| {
            let centered = sum_sq[l] - sum[l].iter().map(|s| s * s).sum::<f64>() / n as f64;
            LayerMetrics {
                layer: l,
                explained_variance: 1.0 - err[l] / centered,
                dead_features: active_ever[l].iter().filter(|a| !**a).count(),
                mean_l0: active_total[l] as f64 / n as f64,
            }
        })
        .collect())
}
