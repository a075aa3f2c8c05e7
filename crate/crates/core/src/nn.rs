//! Small tensor building blocks shared by the encoder, RFaM and MRaF heads.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{VarBuilder, VarMap};

pub use crate::conv::Conv;
use crate::ops::{affine_norm, NormSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-interpolation matrix (`dst × src`) for bilinear resizing with half-pixel
/// centres (`align_corners = false`).
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[o * src + i0] += 1.0 - frac;
        m[o * src + i1] += frac;
    }
    m
}

/// Bilinear resize of a `(B, C, H, W)` tensor, expressed as two matrix products so
/// gradients flow through it.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let x = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&x)?)
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get(dim, "weight")?,
            bias: vb.get(dim, "bias")?,
            eps: 1e-6,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let spec = NormSpec {
            block: x.dim(D::Minus1)?,
            groups: 1,
            inner: 1,
            eps: self.eps,
        };
        affine_norm(x, &self.weight, &self.bias, spec)
    }
}

/// Group normalisation of a `(B, C, H, W)` tensor with per-channel affine map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            weight: vb.get(channels, "weight")?,
            bias: vb.get(channels, "bias")?,
            groups,
            eps,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let spec = NormSpec {
            block: c / self.groups * h * w,
            groups: self.groups,
            inner: h * w,
            eps: self.eps,
        };
        affine_norm(x, &self.weight, &self.bias, spec)
    }
}

/// Per-channel 3×3 convolution with zero padding 1.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get((channels, 1, 3, 3), "weight")?,
            bias: vb.get(channels, "bias")?,
        })
    }
}

impl Module for DepthwiseConv3x3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        crate::ops::depthwise3x3(x, &self.weight, &self.bias)
    }
}

pub fn conv(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    vb: VarBuilder,
) -> Result<Conv> {
    Conv::new(in_c, out_c, kernel, stride, padding, vb)
}

/// Pointwise (1×1) convolution.
pub fn pointwise(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Conv> {
    conv(in_c, out_c, 1, 1, 0, vb)
}

/// Overwrites every variable of `varmap` with seeded values so that model
/// construction is reproducible: multi-dimensional weights are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, 1-D `weight`s (norm scales) are one,
/// biases and modulation logits (`raw`) are zero.
pub fn reseed(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let values: Vec<f32> = if leaf == "raw" || leaf == "bias" {
            vec![0.0; n]
        } else if dims.len() == 1 {
            vec![1.0; n]
        } else {
            let fan_in: usize = dims[1..].iter().product();
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Errors unless every element of `t` is finite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let ok = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Stacks planes into a `(B, 1, H, W)` f32 tensor.
pub fn planes_to_tensor(planes: &[&crate::data::Plane], device: &Device) -> Result<Tensor> {
    let first = planes
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} with {}x{}",
                p.height, p.width
            )));
        }
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(data, (planes.len(), 1, h, w), device)?)
}

/// First image of a `(B, 1, H, W)` tensor as a plane.
pub fn tensor_to_plane(t: &Tensor, index: usize) -> Result<crate::data::Plane> {
    let (_, _, h, w) = t.dims4()?;
    let data = t
        .get(index)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    crate::data::Plane::new(h, w, data)
}
