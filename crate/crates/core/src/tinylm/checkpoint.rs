use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::container;
use crate::error::{bail, Result};
use crate::linalg::Scalar;
use crate::params::ParamSet;

pub const CHECKPOINT_KIND: &str = "tinylm";

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    params.check_finite()?;
    let config = serde_json::to_value(&params.config)?;
    container::write(path, CHECKPOINT_KIND, &config, &params.to_entries())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let (header, entries) = container::read(path, CHECKPOINT_KIND)?;
    let config: ModelConfig = match serde_json::from_value(header.config) {
        Ok(c) => c,
        Err(e) => bail!(Format, "{}: bad model config in header: {e}", path.display()),
    };
    let mut params = ModelParams::<f32>::init(&config)?;
    params.load_entries(&entries)?;
    Ok(params)
}

/// Content digest over configuration and 32-bit weights.
pub fn model_digest<T: Scalar>(params: &ModelParams<T>) -> String {
    let config = serde_json::to_value(&params.config).expect("serializable config");
    container::sha256_hex(&container::encode(CHECKPOINT_KIND, &config, &params.to_entries()))
}
