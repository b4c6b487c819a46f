use std::path::Path;

use serde::{Deserialize, Serialize};

use super::replace::replacement_forward;
use super::{run_with_interventions, EditMode, FeatureEdit, InterventionResult, InterventionSpec};
use crate::analysis::{Cluster, LanguageFeature};
use crate::clt::CltParams;
use crate::corpus::LanguageId;
use crate::error::{bail, Error, Result};
use crate::linalg::rank_of;
use crate::tinylm::ModelParams;

/// The top quarter of the layers (at least one).
pub fn default_late_layers(n_layers: usize) -> Vec<usize> {
    let k = n_layers.div_ceil(4).max(1).min(n_layers);
    (n_layers - k..n_layers).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapOptions {
    /// Layers whose language features are edited; defaults to the top quarter.
    pub late_layers: Option<Vec<usize>>,
    /// Zero the source-language features before adding target ones.
    pub zero_source: bool,
    /// Multiplier on the activations borrowed from the translated prompt.
    pub add_coefficient: f64,
    /// Shift applied after aligning the two prompts at their last tokens.
    pub offset: isize,
    pub top_k: usize,
}

impl Default for SwapOptions {
    fn default() -> Self {
        Self { late_layers: None, zero_source: true, add_coefficient: 1.0, offset: 0, top_k: 5 }
    }
}

/// Replace source-language features with the target-language features that
/// the translated prompt activates, and report the target token's rank.
#[allow(clippy::too_many_arguments)]
pub fn language_swap(
    params: &ModelParams<f64>,
    clt: &CltParams<f64>,
    prompt: &[u32],
    translated: &[u32],
    src: LanguageId,
    tgt: LanguageId,
    features: &[LanguageFeature],
    target_token: u32,
    opts: &SwapOptions,
) -> Result<InterventionResult> {
    let layers = opts.late_layers.clone().unwrap_or_else(|| default_late_layers(clt.n_layers));
    let pick = |lang: LanguageId| -> Result<Vec<_>> {
        let keys: Vec<_> = features
            .iter()
            .filter(|f| f.top_language == lang && layers.contains(&f.feature.layer))
            .map(|f| f.feature)
            .collect();
        if keys.is_empty() {
            bail!(
                Validation,
                "no language features found for {lang} in layers {layers:?} ({} candidates overall)",
                features.len()
            );
        }
        Ok(keys)
    };
    let src_keys = pick(src)?;
    let tgt_keys = pick(tgt)?;

    let mut edits = Vec::new();
    if opts.zero_source {
        edits.extend(src_keys.iter().map(|&k| FeatureEdit::everywhere(k, EditMode::Zero)));
    }
    if opts.add_coefficient != 0.0 {
        let donor = replacement_forward(params, clt, translated, &[], None)?;
        let shift = translated.len() as isize - prompt.len() as isize + opts.offset;
        for &key in &tgt_keys {
            for p in 0..prompt.len() {
                let q = p as isize + shift;
                if q < 0 || q >= translated.len() as isize {
                    continue;
                }
                let v = opts.add_coefficient * donor.z[key.layer][[q as usize, key.index]];
                if v != 0.0 {
                    edits.push(FeatureEdit::at(key, p..p + 1, EditMode::Add(v)));
                }
            }
        }
    }
    let spec = InterventionSpec { edits, target_token: Some(target_token), position: None, top_k: opts.top_k };
    run_with_interventions(params, clt, prompt, &spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub c_up: f64,
    pub c_down: Option<f64>,
    pub target_rank: usize,
    pub top_token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub target_token: u32,
    pub baseline_rank: usize,
    /// Row-major over `up_range × down_range`.
    pub cells: Vec<SweepCell>,
    /// Index of the first cell with the best target rank.
    pub best: usize,
}

pub fn default_up_range() -> Vec<f64> {
    (1..=30).map(f64::from).collect()
}

pub fn default_down_range() -> Vec<f64> {
    (-30..=-1).map(f64::from).collect()
}

fn scale_edits(cluster: &Cluster, c: f64) -> impl Iterator<Item = FeatureEdit> + '_ {
    cluster.members.iter().map(move |&k| FeatureEdit { feature: k, positions: cluster.positions.clone(), mode: EditMode::Scale(c) })
}

/// Scale `up` by each `c_up` and `down` by each `c_down`, recording the
/// target token's rank at the last position.
#[allow(clippy::too_many_arguments)]
pub fn coefficient_sweep(
    params: &ModelParams<f64>,
    clt: &CltParams<f64>,
    tokens: &[u32],
    up: &Cluster,
    down: Option<&Cluster>,
    up_range: &[f64],
    down_range: &[f64],
    target_token: u32,
) -> Result<SweepReport> {
    up.validate(clt)?;
    if let Some(d) = down {
        d.validate(clt)?;
    }
    if up_range.is_empty() || (down.is_some() && down_range.is_empty()) {
        bail!(Validation, "coefficient ranges must be non-empty");
    }
    if target_token as usize >= params.config.vocab_size {
        bail!(Validation, "target token {target_token} outside vocabulary of {}", params.config.vocab_size);
    }
    let base = replacement_forward(params, clt, tokens, &[], None)?;
    let last = tokens.len() - 1;
    let baseline_rank = rank_of(&base.logits.row(last).to_vec(), target_token as usize);
    let downs: Vec<Option<f64>> = match down {
        Some(_) => down_range.iter().map(|&c| Some(c)).collect(),
        None => vec![None],
    };
    let mut cells = Vec::with_capacity(up_range.len() * downs.len());
    for &c_up in up_range {
        for &c_down in &downs {
            let mut edits: Vec<FeatureEdit> = scale_edits(up, c_up).collect();
            if let (Some(d), Some(c)) = (down, c_down) {
                edits.extend(scale_edits(d, c));
            }
            let spec = InterventionSpec { edits, ..Default::default() };
            spec.validate(clt.n_layers, clt.d_features(), tokens.len())?;
            let pass = replacement_forward(params, clt, tokens, &spec.edits, Some(&base.errors))?;
            let row = pass.logits.row(last).to_vec();
            let top_token = crate::linalg::argsort_desc(&row)[0] as u32;
            cells.push(SweepCell { c_up, c_down, target_rank: rank_of(&row, target_token as usize), top_token });
        }
    }
    let best = (0..cells.len()).min_by_key(|&i| (cells[i].target_rank, i)).expect("non-empty grid");
    Ok(SweepReport { target_token, baseline_rank, cells, best })
}

/// CSV with columns `c_up,c_down,target_rank,top_token`.
pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["c_up", "c_down", "target_rank", "top_token"]).map_err(io)?;
    for c in &report.cells {
        w.write_record([
            c.c_up.to_string(),
            c.c_down.map(|v| v.to_string()).unwrap_or_default(),
            c.target_rank.to_string(),
            c.top_token.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
