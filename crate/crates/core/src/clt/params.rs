use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, CltConfig, FeatureKey};
use crate::container;
use crate::error::{bail, Result};
use crate::linalg::{cast1, cast2, randn, Scalar};
use crate::params::ParamSet;

pub const CLT_KIND: &str = "clt";

#[derive(Debug, Clone, PartialEq)]
pub struct CltParams<T: Scalar> {
    pub config: CltConfig,
    pub n_layers: usize,
    pub d_model: usize,
    /// `enc_w[ℓ]`: `d_features × d_model`.
    pub enc_w: Vec<Array2<T>>,
    pub enc_b: Vec<Array1<T>>,
    /// `dec[ℓ][k]` maps layer `ℓ` features into layer `ℓ + k`: `d_model × d_features`.
    pub dec: Vec<Vec<Array2<T>>>,
    pub dec_b: Vec<Array1<T>>,
    /// Per-feature JumpReLU thresholds; empty for ReLU.
    pub thresh: Vec<Array1<T>>,
    /// Current sparsity weight per layer. Starts at `config.lambda0` and
    /// moves only when the trainer's L0 controller is enabled.
    pub lambda0: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CltHeader {
    config: CltConfig,
    n_layers: usize,
    d_model: usize,
    lambda0: Vec<f64>,
}

impl<T: Scalar> CltParams<T> {
    /// Encoder rows ~ N(0, 1/√d_model), zero decoders and biases. Decoder
    /// biases start at zero; [`CltParams::warm_start_bias`] sets them to the
    /// mean MLP output.
    pub fn init(config: &CltConfig, n_layers: usize, d_model: usize) -> Result<Self> {
        config.validate(d_model)?;
        if n_layers == 0 {
            bail!(Config, "CLT needs at least one layer");
        }
        let f = config.d_features;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 1.0 / (d_model as f64).sqrt();
        let thresh = match config.activation {
            Activation::Relu => Vec::new(),
            Activation::JumpRelu { threshold, .. } => vec![Array1::from_elem(f, T::of(threshold)); n_layers],
        };
        Ok(Self {
            config: config.clone(),
            n_layers,
            d_model,
            enc_w: (0..n_layers).map(|_| randn(&mut rng, f, d_model, std)).collect(),
            enc_b: vec![Array1::zeros(f); n_layers],
            dec: (0..n_layers).map(|l| vec![Array2::zeros((d_model, f)); n_layers - l]).collect(),
            dec_b: vec![Array1::zeros(d_model); n_layers],
            thresh,
            lambda0: vec![config.lambda0; n_layers],
        })
    }

    pub fn d_features(&self) -> usize {
        self.config.d_features
    }

    /// Set each output bias to the mean of that layer's MLP output.
    pub fn warm_start_bias(&mut self, m: &[Array2<f32>]) {
        for (b, ml) in self.dec_b.iter_mut().zip(m) {
            let mean = ml.mapv(|v| v as f64).mean_axis(ndarray::Axis(0)).expect("non-empty sample");
            *b = mean.mapv(T::of);
        }
    }

    /// Decoder block from `src` into `dst` (requires `src ≤ dst`).
    pub fn dec_block(&self, src: usize, dst: usize) -> &Array2<T> {
        assert!(src <= dst, "no decoder from layer {src} back to layer {dst}");
        &self.dec[src][dst - src]
    }

    /// Norm of feature columns concatenated across all target layers.
    pub fn dec_norms(&self, layer: usize) -> Array1<T> {
        let mut sq = Array1::<T>::zeros(self.d_features());
        for w in &self.dec[layer] {
            for row in w.outer_iter() {
                sq.zip_mut_with(&row, |s, &v| *s += v * v);
            }
        }
        sq.mapv(|v| v.sqrt())
    }

    /// Decoder column of one feature into one target layer.
    pub fn dec_column(&self, key: FeatureKey, dst: usize) -> ArrayView1<'_, T> {
        self.dec_block(key.layer, dst).column(key.index)
    }

    pub fn encoder(&self, layer: usize) -> ArrayView2<'_, T> {
        self.enc_w[layer].view()
    }

    pub fn cast<U: Scalar>(&self) -> CltParams<U> {
        CltParams {
            config: self.config.clone(),
            n_layers: self.n_layers,
            d_model: self.d_model,
            enc_w: self.enc_w.iter().map(cast2).collect(),
            enc_b: self.enc_b.iter().map(cast1).collect(),
            dec: self.dec.iter().map(|v| v.iter().map(cast2).collect()).collect(),
            dec_b: self.dec_b.iter().map(cast1).collect(),
            thresh: self.thresh.iter().map(cast1).collect(),
            lambda0: self.lambda0.clone(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for CltParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for l in 0..self.n_layers {
            f(&format!("enc.{l}.W"), self.enc_w[l].shape(), self.enc_w[l].as_slice().unwrap());
            f(&format!("enc.{l}.b"), self.enc_b[l].shape(), self.enc_b[l].as_slice().unwrap());
        }
        for l in 0..self.n_layers {
            for (k, w) in self.dec[l].iter().enumerate() {
                f(&format!("dec.{l}.{}.W", l + k), w.shape(), w.as_slice().unwrap());
            }
        }
        for (l, b) in self.dec_b.iter().enumerate() {
            f(&format!("dec_bias.{l}"), b.shape(), b.as_slice().unwrap());
        }
        for (l, t) in self.thresh.iter().enumerate() {
            f(&format!("jthresh.{l}"), t.shape(), t.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for l in 0..self.n_layers {
            let s = self.enc_w[l].shape().to_vec();
            f(&format!("enc.{l}.W"), &s, self.enc_w[l].as_slice_mut().unwrap());
            let s = self.enc_b[l].shape().to_vec();
            f(&format!("enc.{l}.b"), &s, self.enc_b[l].as_slice_mut().unwrap());
        }
        for l in 0..self.n_layers {
            for (k, w) in self.dec[l].iter_mut().enumerate() {
                let s = w.shape().to_vec();
                f(&format!("dec.{l}.{}.W", l + k), &s, w.as_slice_mut().unwrap());
            }
        }
        for (l, b) in self.dec_b.iter_mut().enumerate() {
            let s = b.shape().to_vec();
            f(&format!("dec_bias.{l}"), &s, b.as_slice_mut().unwrap());
        }
        for (l, t) in self.thresh.iter_mut().enumerate() {
            let s = t.shape().to_vec();
            f(&format!("jthresh.{l}"), &s, t.as_slice_mut().unwrap());
        }
    }
}

/// Content digest over the header and 32-bit weights.
pub fn clt_digest<T: Scalar>(params: &CltParams<T>) -> String {
    let header = serde_json::to_value(CltHeader {
        config: params.config.clone(),
        n_layers: params.n_layers,
        d_model: params.d_model,
        lambda0: params.lambda0.clone(),
    })
    .expect("serializable header");
    container::sha256_hex(&container::encode(CLT_KIND, &header, &params.to_entries()))
}

pub fn save_clt<T: Scalar>(params: &CltParams<T>, path: &Path) -> Result<()> {
    params.check_finite()?;
    let header = serde_json::to_value(CltHeader {
        config: params.config.clone(),
        n_layers: params.n_layers,
        d_model: params.d_model,
        lambda0: params.lambda0.clone(),
    })?;
    container::write(path, CLT_KIND, &header, &params.to_entries())
}

pub fn load_clt(path: &Path) -> Result<CltParams<f32>> {
    let (header, entries) = container::read(path, CLT_KIND)?;
    let h: CltHeader = match serde_json::from_value(header.config) {
        Ok(h) => h,
        Err(e) => bail!(Format, "{}: bad CLT header: {e}", path.display()),
    };
    let mut params = CltParams::<f32>::init(&h.config, h.n_layers, h.d_model)?;
    params.load_entries(&entries)?;
    if h.lambda0.len() != h.n_layers {
        bail!(Format, "{}: expected {} sparsity weights", path.display(), h.n_layers);
    }
    params.lambda0 = h.lambda0;
    Ok(params)
}
