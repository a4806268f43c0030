//! Clip encoder and the two Gaussian heads.
//!
//! A clip feature goes through a ReLU MLP encoder, then splits into
//!
//! * the mean head: affine, LayerNorm with learnable scale/shift, then
//!   projection onto the unit sphere;
//! * the variance head: affine output read as a log-variance, exponentiated
//!   and clamped from below at [`VAR_FLOOR`].
//!
//! Gradients are hand-derived; [`head_backward`] consumes the activations
//! recorded by [`forward_clip`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{all_finite, dot, softplus, softplus_inv, Rng};

pub const VAR_FLOOR: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

/// Dense layer `y = W x + b` with `W` stored row-major (`out_dim x in_dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| (2.0 * rng.uniform() - 1.0) * limit)
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates `dW += dy x^T`, `db += dy` into `grad` and returns `W^T dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Affine) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Layer sizes of the embedding network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Clip feature length F.
    pub input_dim: usize,
    /// Encoder widths; the last entry is the head input width.
    pub hidden_dims: Vec<usize>,
    /// Embedding dimension D.
    pub embed_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidDimension(
                "input and embedding dimensions must be positive".into(),
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidDimension(
                "encoder needs at least one non-empty layer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Affine>,
    pub mu_head: Affine,
    pub ln_scale: Vec<f64>,
    pub ln_shift: Vec<f64>,
    pub sigma_head: Affine,
    /// Match-probability slope before softplus.
    pub a_raw: f64,
    /// Match-probability offset.
    pub b: f64,
}

impl ModelParams {
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut encoder = Vec::with_capacity(arch.hidden_dims.len());
        let mut fan_in = arch.input_dim;
        for &width in &arch.hidden_dims {
            encoder.push(Affine::glorot(fan_in, width, rng));
            fan_in = width;
        }
        let mu_head = Affine::glorot(fan_in, arch.embed_dim, rng);
        let sigma_head = Affine::glorot(fan_in, arch.embed_dim, rng);
        Ok(Self {
            encoder,
            mu_head,
            ln_scale: vec![1.0; arch.embed_dim],
            ln_shift: vec![0.0; arch.embed_dim],
            sigma_head,
            a_raw: softplus_inv(1.0),
            b: 0.0,
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self
                .encoder
                .iter()
                .map(|l| Affine::zeros(l.in_dim, l.out_dim))
                .collect(),
            mu_head: Affine::zeros(self.mu_head.in_dim, self.mu_head.out_dim),
            ln_scale: vec![0.0; self.ln_scale.len()],
            ln_shift: vec![0.0; self.ln_shift.len()],
            sigma_head: Affine::zeros(self.sigma_head.in_dim, self.sigma_head.out_dim),
            a_raw: 0.0,
            b: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.mu_head.out_dim
    }

    /// Match-probability slope `a = softplus(a_raw)`.
    pub fn a(&self) -> f64 {
        softplus(self.a_raw)
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.encoder {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.mu_head.weight);
        out.push(&self.mu_head.bias);
        out.push(&self.ln_scale);
        out.push(&self.ln_shift);
        out.push(&self.sigma_head.weight);
        out.push(&self.sigma_head.bias);
        out.push(std::slice::from_ref(&self.a_raw));
        out.push(std::slice::from_ref(&self.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.mu_head.weight);
        out.push(&mut self.mu_head.bias);
        out.push(&mut self.ln_scale);
        out.push(&mut self.ln_shift);
        out.push(&mut self.sigma_head.weight);
        out.push(&mut self.sigma_head.bias);
        out.push(std::slice::from_mut(&mut self.a_raw));
        out.push(std::slice::from_mut(&mut self.b));
        out
    }

    /// Names matching [`ModelParams::tensors`], for diagnostics.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.encoder.len() {
            out.push(format!("encoder.{i}.weight"));
            out.push(format!("encoder.{i}.bias"));
        }
        for name in [
            "mu_head.weight",
            "mu_head.bias",
            "ln_scale",
            "ln_shift",
            "sigma_head.weight",
            "sigma_head.bias",
            "a_raw",
            "b",
        ] {
            out.push(name.to_string());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: n,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| all_finite(t))
    }
}

/// One clip's diagonal Gaussian: unit-norm mean, per-dimension variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbed {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianEmbed {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(x - mean(x)) / sqrt(var(x) + eps) * scale + shift`, biased variance.
pub fn layer_norm(x: &[f64], scale: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if scale.len() != x.len() || shift.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "layer_norm affine",
            expected: x.len(),
            got: scale.len().min(shift.len()),
        });
    }
    let (xhat, _) = normalize(x);
    Ok(xhat
        .iter()
        .zip(scale)
        .zip(shift)
        .map(|((h, g), s)| h * g + s)
        .collect())
}

fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - m) * inv_std).collect(), inv_std)
}

/// Activations of one clip's forward pass.
#[derive(Debug, Clone)]
pub struct ClipCache {
    /// Input to each encoder layer (the clip feature first).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of every encoder layer except the last.
    pre_relu: Vec<Vec<f64>>,
    /// Encoder output, shared by both heads.
    hidden: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
    ln_out_norm: f64,
    mean: Vec<f64>,
    /// `exp(log_var)` where unclamped, `None` where the floor is active.
    var_raw: Vec<Option<f64>>,
}

pub fn forward_clip(params: &ModelParams, clip: &[f64]) -> Result<(GaussianEmbed, ClipCache)> {
    if clip.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "clip feature",
            expected: params.input_dim(),
            got: clip.len(),
        });
    }
    let n_layers = params.encoder.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre_relu = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut x = clip.to_vec();
    for (i, layer) in params.encoder.iter().enumerate() {
        let h = layer.forward(&x);
        layer_inputs.push(x);
        if i + 1 < n_layers {
            x = h.iter().map(|v| v.max(0.0)).collect();
            pre_relu.push(h);
        } else {
            x = h;
        }
    }
    let hidden = x;

    let m = params.mu_head.forward(&hidden);
    let (xhat, inv_std) = normalize(&m);
    let y: Vec<f64> = xhat
        .iter()
        .zip(&params.ln_scale)
        .zip(&params.ln_shift)
        .map(|((h, g), s)| h * g + s)
        .collect();
    let ln_out_norm = dot(&y, &y).sqrt().max(1e-12);
    let mean: Vec<f64> = y.iter().map(|v| v / ln_out_norm).collect();

    let log_var = params.sigma_head.forward(&hidden);
    let var_raw: Vec<Option<f64>> = log_var
        .iter()
        .map(|s| {
            let v = s.exp();
            (v >= VAR_FLOOR).then_some(v)
        })
        .collect();
    let var: Vec<f64> = var_raw.iter().map(|v| v.unwrap_or(VAR_FLOOR)).collect();
    if !all_finite(&mean) || !all_finite(&var) {
        return Err(Error::NonFinite("clip embedding".into()));
    }

    let embed = GaussianEmbed {
        mean: mean.clone(),
        var,
    };
    let cache = ClipCache {
        layer_inputs,
        pre_relu,
        hidden,
        xhat,
        inv_std,
        ln_out_norm,
        mean,
        var_raw,
    };
    Ok((embed, cache))
}

pub fn embed_clip(params: &ModelParams, clip: &[f64]) -> Result<GaussianEmbed> {
    forward_clip(params, clip).map(|(e, _)| e)
}

/// Backpropagates `d_mean`, `d_var` (gradients w.r.t. one clip's Gaussian)
/// into `grad`.
pub fn clip_backward(
    params: &ModelParams,
    cache: &ClipCache,
    d_mean: &[f64],
    d_var: &[f64],
    grad: &mut ModelParams,
) {
    let d = params.embed_dim();

    // unit-sphere projection
    let proj = dot(&cache.mean, d_mean);
    let d_y: Vec<f64> = (0..d)
        .map(|k| (d_mean[k] - cache.mean[k] * proj) / cache.ln_out_norm)
        .collect();

    // LayerNorm affine and normalization
    let mut d_xhat = vec![0.0; d];
    for k in 0..d {
        grad.ln_scale[k] += d_y[k] * cache.xhat[k];
        grad.ln_shift[k] += d_y[k];
        d_xhat[k] = d_y[k] * params.ln_scale[k];
    }
    let mean_dx = d_xhat.iter().sum::<f64>() / d as f64;
    let mean_dx_x = dot(&d_xhat, &cache.xhat) / d as f64;
    let d_m: Vec<f64> = (0..d)
        .map(|k| cache.inv_std * (d_xhat[k] - mean_dx - cache.xhat[k] * mean_dx_x))
        .collect();

    // exp + clamp: zero gradient where the floor is active
    let d_log_var: Vec<f64> = cache
        .var_raw
        .iter()
        .zip(d_var)
        .map(|(v, g)| v.map_or(0.0, |v| g * v))
        .collect();

    let mut d_hidden = params
        .mu_head
        .backward(&cache.hidden, &d_m, &mut grad.mu_head);
    let d_hidden_sigma = params
        .sigma_head
        .backward(&cache.hidden, &d_log_var, &mut grad.sigma_head);
    for (a, b) in d_hidden.iter_mut().zip(&d_hidden_sigma) {
        *a += b;
    }

    let mut dx = d_hidden;
    for i in (0..params.encoder.len()).rev() {
        if i + 1 < params.encoder.len() {
            for (g, h) in dx.iter_mut().zip(&cache.pre_relu[i]) {
                if *h <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        dx = params.encoder[i].backward(&cache.layer_inputs[i], &dx, &mut grad.encoder[i]);
    }
}

/// Upstream gradient for one clip: `(d mean, d var)`.
pub type ClipUpstream = (Vec<f64>, Vec<f64>);

/// Parameter gradients for a set of clips given their recorded forward
/// caches and the upstream gradients, one per clip.
pub fn head_backward(
    params: &ModelParams,
    caches: &[ClipCache],
    upstream: &[ClipUpstream],
) -> Result<ModelParams> {
    if caches.len() != upstream.len() {
        return Err(Error::MissingCache(format!(
            "{} upstream gradients for {} recorded clips",
            upstream.len(),
            caches.len()
        )));
    }
    let mut grad = params.zeros_like();
    for (cache, (dm, dv)) in caches.iter().zip(upstream) {
        if dm.len() != params.embed_dim() || dv.len() != params.embed_dim() {
            return Err(Error::DimensionMismatch {
                what: "upstream clip gradient",
                expected: params.embed_dim(),
                got: dm.len().min(dv.len()),
            });
        }
        clip_backward(params, cache, dm, dv, &mut grad);
    }
    Ok(grad)
}
