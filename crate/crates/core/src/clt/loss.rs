use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{Activation, CltParams};
use crate::error::{bail, Result};
use crate::linalg::Scalar;
use crate::params::ParamSet;

/// Per-layer pre-activations, feature activations and reconstructions.
#[derive(Debug, Clone)]
pub struct CltForward<T: Scalar> {
    pub pre: Vec<Array2<T>>,
    pub z: Vec<Array2<T>>,
    pub m_hat: Vec<Array2<T>>,
}

/// Weighted loss terms averaged over tokens; `total` is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub mse: f64,
    pub sparsity: f64,
    pub dead: f64,
    /// Mean active features per token, per layer.
    pub l0: Vec<f64>,
}

impl<T: Scalar> CltParams<T> {
    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            bail!(Validation, "layer {layer} out of range for a {}-layer transcoder", self.n_layers);
        }
        Ok(())
    }

    #[inline]
    fn act(&self, layer: usize, n: usize, pre: T) -> T {
        let floor = match self.config.activation {
            Activation::Relu => T::zero(),
            Activation::JumpRelu { .. } => self.thresh[layer][n],
        };
        if pre > floor {
            pre
        } else {
            T::zero()
        }
    }

    /// Apply the activation to a row-major `[tokens × d_features]` block.
    pub fn activate(&self, layer: usize, pre: &Array2<T>) -> Array2<T> {
        let mut z = pre.clone();
        for mut row in z.outer_iter_mut() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = self.act(layer, n, *v);
            }
        }
        z
    }

    /// Feature activations for one MLP input vector.
    pub fn encode(&self, h: ArrayView1<T>, layer: usize) -> Result<Array1<T>> {
        self.check_layer(layer)?;
        if h.len() != self.d_model {
            bail!(Validation, "input has {} dims, expected {}", h.len(), self.d_model);
        }
        let pre = self.enc_w[layer].dot(&h) + &self.enc_b[layer];
        Ok(pre.iter().enumerate().map(|(n, &p)| self.act(layer, n, p)).collect())
    }

    /// Reconstruction of the MLP output at `dst` from per-layer activations.
    pub fn decode(&self, z: &[Array1<T>], dst: usize) -> Result<Array1<T>> {
        self.check_layer(dst)?;
        if z.len() <= dst {
            bail!(Validation, "decoding layer {dst} needs activations for layers 0..={dst}, got {}", z.len());
        }
        let mut out = self.dec_b[dst].clone();
        for (src, zs) in z.iter().enumerate().take(dst + 1) {
            out += &self.dec_block(src, dst).dot(zs);
        }
        Ok(out)
    }
}

pub fn encode_batch<T: Scalar>(p: &CltParams<T>, h: ArrayView2<T>, layer: usize) -> (Array2<T>, Array2<T>) {
    let pre = h.dot(&p.enc_w[layer].t()) + &p.enc_b[layer];
    let z = p.activate(layer, &pre);
    (pre, z)
}

pub fn decode_batch<T: Scalar>(p: &CltParams<T>, z: &[Array2<T>], dst: usize) -> Array2<T> {
    let mut out = z[0].dot(&p.dec_block(0, dst).t());
    for (src, zs) in z.iter().enumerate().take(dst + 1).skip(1) {
        out += &zs.dot(&p.dec_block(src, dst).t());
    }
    out + &p.dec_b[dst]
}

pub fn forward<T: Scalar>(p: &CltParams<T>, h: &[Array2<T>]) -> CltForward<T> {
    let (pre, z): (Vec<_>, Vec<_>) = h.iter().enumerate().map(|(l, hl)| encode_batch(p, hl.view(), l)).unzip();
    let m_hat = (0..p.n_layers).map(|dst| decode_batch(p, &z, dst)).collect();
    CltForward { pre, z, m_hat }
}

fn check_batch<T: Scalar>(p: &CltParams<T>, h: &[Array2<T>], m: &[Array2<T>]) -> Result<usize> {
    if h.len() != p.n_layers || m.len() != p.n_layers {
        bail!(Validation, "batch must hold all {} layers of inputs and outputs", p.n_layers);
    }
    let b = h[0].nrows();
    if b == 0 || h.iter().chain(m).any(|a| a.nrows() != b || a.ncols() != p.d_model) {
        bail!(Validation, "inconsistent or empty batch shapes");
    }
    Ok(b)
}

fn finite(c: &LossComponents) -> Result<()> {
    for (name, v) in [("mse", c.mse), ("sparsity", c.sparsity), ("dead", c.dead)] {
        if !v.is_finite() {
            bail!(Numerical, "non-finite {name} term in transcoder loss");
        }
    }
    Ok(())
}

/// Token-averaged loss and its gradient with respect to every parameter.
/// `want_grads = false` skips the backward pass.
fn loss_impl<T: Scalar>(
    p: &CltParams<T>,
    h: &[Array2<T>],
    m: &[Array2<T>],
    want_grads: bool,
) -> Result<(LossComponents, Option<CltParams<T>>, CltForward<T>)> {
    let b = check_batch(p, h, m)?;
    let cfg = &p.config;
    let inv_b = 1.0 / b as f64;
    let (c, lambda_df) = (cfg.c, cfg.lambda_df);
    let e_tau = cfg.tau.exp();
    let fw = forward(p, h);
    let mut g = want_grads.then(|| p.zeros_like());

    let mut mse = 0.0;
    let mut dm = Vec::with_capacity(p.n_layers);
    for dst in 0..p.n_layers {
        let diff = &fw.m_hat[dst] - &m[dst];
        mse += diff.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        if let Some(g) = g.as_mut() {
            let d = diff * T::of(2.0 * inv_b);
            g.dec_b[dst] = d.sum_axis(Axis(0));
            dm.push(d);
        }
    }

    let mut sparsity = 0.0;
    let mut dead = 0.0;
    let mut l0 = Vec::with_capacity(p.n_layers);
    for src in 0..p.n_layers {
        let lambda0 = p.lambda0[src];
        let w = p.dec_norms(src);
        let (pre, z) = (&fw.pre[src], &fw.z[src]);
        l0.push(z.iter().filter(|&&v| v > T::zero()).count() as f64 * inv_b);
        let mut dz = Array2::<T>::zeros(z.raw_dim());
        let mut dpre_dead = Array2::<T>::zeros(z.raw_dim());
        let mut dw = Array1::<f64>::zeros(w.len());
        for ((zr, pr), (mut dzr, mut ddr)) in z
            .outer_iter()
            .zip(pre.outer_iter())
            .zip(dz.outer_iter_mut().zip(dpre_dead.outer_iter_mut()))
        {
            for n in 0..w.len() {
                let (zv, wn, pv) = (zr[n].f64(), w[n].f64(), pr[n].f64());
                let s = (c * zv * wn).tanh();
                sparsity += lambda0 * s;
                let sech2 = 1.0 - s * s;
                dzr[n] = T::of(lambda0 * inv_b * c * wn * sech2);
                dw[n] += lambda0 * inv_b * c * zv * sech2;
                let r = e_tau - pv;
                if r > 0.0 {
                    dead += r * wn;
                    ddr[n] = T::of(-lambda_df * inv_b * wn);
                    dw[n] += lambda_df * inv_b * r;
                }
            }
        }
        let Some(g) = g.as_mut() else { continue };

        for (k, dmk) in dm[src..].iter().enumerate() {
            let wk = &p.dec[src][k];
            dz += &dmk.dot(wk);
            let mut gw = dmk.t().dot(z);
            // Chain rule through the concatenated column norm.
            for (n, mut col) in gw.columns_mut().into_iter().enumerate() {
                let wn = w[n].f64();
                if wn > 0.0 {
                    let scale = T::of(dw[n] / wn);
                    col.zip_mut_with(&wk.column(n), |gv, &wv| *gv += scale * wv);
                }
            }
            g.dec[src][k] = gw;
        }

        let mut dpre = dpre_dead;
        match cfg.activation {
            Activation::Relu => {
                Zip::from(&mut dpre).and(&dz).and(pre).for_each(|d, &dzv, &pv| {
                    if pv > T::zero() {
                        *d += dzv;
                    }
                });
            }
            Activation::JumpRelu { bandwidth, .. } => {
                let theta = &p.thresh[src];
                let eps = T::of(bandwidth);
                let half = T::of(0.5);
                let gt = &mut g.thresh[src];
                for (mut dr, (dzr, pr)) in dpre.outer_iter_mut().zip(dz.outer_iter().zip(pre.outer_iter())) {
                    for n in 0..theta.len() {
                        let (pv, th) = (pr[n], theta[n]);
                        if pv > th {
                            dr[n] += dzr[n];
                        }
                        // Straight-through estimate of ∂z/∂θ = −(θ/ε)·K((pre − θ)/ε).
                        if ((pv - th) / eps).abs() < half {
                            gt[n] -= dzr[n] * th / eps;
                        }
                    }
                }
            }
        }
        g.enc_w[src] = dpre.t().dot(&h[src]);
        g.enc_b[src] = dpre.sum_axis(Axis(0));
    }

    let comps = LossComponents {
        total: 0.0,
        mse: mse * inv_b,
        sparsity: sparsity * inv_b,
        dead: lambda_df * dead * inv_b,
        l0,
    };
    let comps = LossComponents { total: comps.mse + comps.sparsity + comps.dead, ..comps };
    finite(&comps)?;
    Ok((comps, g, fw))
}

pub fn clt_loss<T: Scalar>(p: &CltParams<T>, h: &[Array2<T>], m: &[Array2<T>]) -> Result<LossComponents> {
    Ok(loss_impl(p, h, m, false)?.0)
}

pub fn clt_grads<T: Scalar>(
    p: &CltParams<T>,
    h: &[Array2<T>],
    m: &[Array2<T>],
) -> Result<(LossComponents, CltParams<T>)> {
    let (c, g, _) = loss_impl(p, h, m, true)?;
    Ok((c, g.expect("gradients requested")))
}
