//! Per-modality dual-stream encoder: a self-attention (global) stream and a
//! convolutional (local) stream, each emitting a 4-level feature pyramid at
//! strides 2, 4, 8 and 16, plus the channel max/mean refinement.

use candle_core::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, DepthwiseConv3x3, LayerNorm};

/// Number of pyramid levels per stream.
pub const LEVELS: usize = 4;
/// Spatial dimensions fed to the encoder must be multiples of this.
pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ir,
    Vi,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Ir, Modality::Vi];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ir => "ir",
            Modality::Vi => "vi",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir" => Ok(Modality::Ir),
            "vi" => Ok(Modality::Vi),
            other => Err(Error::Invalid(format!(
                "unknown modality {other:?} (expected ir or vi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Global,
    Local,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::Global, Stream::Local];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Global => "global",
            Stream::Local => "local",
        }
    }

    /// One-letter tag used in feature names (`g`/`l`).
    pub fn letter(self) -> char {
        match self {
            Stream::Global => 'g',
            Stream::Local => 'l',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: [usize; LEVELS],
    /// Transformer layers per global-stream block.
    pub depth: usize,
    pub heads: [usize; LEVELS],
    /// Key/value spatial reduction of the efficient attention, per block.
    pub reduction: [usize; LEVELS],
    pub mlp_ratio: usize,
    /// Group count of the local stream's group normalisation.
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 160, 256],
            depth: 2,
            heads: [1, 2, 5, 8],
            reduction: [8, 4, 2, 1],
            mlp_ratio: 4,
            norm_groups: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..LEVELS {
            let c = self.channels[i];
            if c == 0 || self.heads[i] == 0 || c % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "block {}: {c} channels not divisible into {} heads",
                    i + 1,
                    self.heads[i]
                )));
            }
            if c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "block {}: {c} channels not divisible into {} norm groups",
                    i + 1,
                    self.norm_groups
                )));
            }
            if self.reduction[i] == 0 {
                return Err(Error::Config("attention reduction must be >= 1".into()));
            }
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// One level of a stream's pyramid. `values` is `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub modality: Modality,
    pub stream: Stream,
    /// 1-based pyramid level; spatial stride is `2^scale`.
    pub scale: usize,
}

impl FeatureMap {
    pub fn tag(&self) -> String {
        format!("{}_{}{}", self.modality, self.stream.letter(), self.scale)
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub modality: Modality,
    pub stream: Stream,
    pub maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn level(&self, scale: usize) -> &FeatureMap {
        &self.maps[scale - 1]
    }
}

/// Channel-max and channel-mean planes of one feature map, `(B, 2, H, W)`.
#[derive(Debug, Clone)]
pub struct RefinedMap {
    pub values: Tensor,
    pub modality: Modality,
    pub stream: Stream,
    pub scale: usize,
}

/// Collapses a feature map to its elementwise channel maximum (channel 0) and
/// channel mean (channel 1).
pub fn refine(map: &FeatureMap) -> Result<RefinedMap> {
    let max = map.values.max_keepdim(1)?;
    let mean = map.values.mean_keepdim(1)?;
    Ok(RefinedMap {
        values: Tensor::cat(&[&max, &mean], 1)?,
        modality: map.modality,
        stream: map.stream,
        scale: map.scale,
    })
}

fn check_input(x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("encoder expects 1 channel, got {c}")));
    }
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not a multiple of {DOWNSAMPLE}; pad the image first"
        )));
    }
    nn::ensure_finite(x, "encoder input")
}

#[derive(Debug)]
struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(nn::Conv, LayerNorm)>,
    heads: usize,
}

impl Attention {
    fn new(dim: usize, heads: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let reduce = if reduction > 1 {
            Some((
                nn::conv(dim, dim, reduction, reduction, 0, vb.pp("sr"))?,
                LayerNorm::new(dim, vb.pp("sr_norm"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: candle_nn::linear(dim, dim, vb.pp("q"))?,
            kv: candle_nn::linear(dim, dim * 2, vb.pp("kv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            reduce,
            heads,
        })
    }

    /// `x` is `(B, N, C)` with `N = h·w`.
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let source = match &self.reduce {
            Some((conv, norm)) => {
                let grid = x.transpose(1, 2)?.reshape((b, c, h, w))?;
                let reduced = conv.forward(&grid)?.flatten_from(2)?.transpose(1, 2)?;
                norm.forward(&reduced)?
            }
            None => x.clone(),
        };
        let m = source.dim(1)?;
        let kv = self
            .kv
            .forward(&source)?
            .reshape((b, m, 2, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let k = kv.get(0)?.contiguous()?;
        let v = kv.get(1)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, candle_core::D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, c))?;
        Ok(self.proj.forward(&out)?)
    }
}

#[derive(Debug)]
struct MixFfn {
    fc1: Linear,
    dw: DepthwiseConv3x3,
    fc2: Linear,
}

impl MixFfn {
    fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(dim, hidden, vb.pp("fc1"))?,
            dw: DepthwiseConv3x3::new(hidden, vb.pp("dw"))?,
            fc2: candle_nn::linear(hidden, dim, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, _) = x.dims3()?;
        let hidden = self.fc1.forward(x)?;
        let ch = hidden.dim(2)?;
        let grid = hidden.transpose(1, 2)?.reshape((b, ch, h, w))?;
        let mixed = self.dw.forward(&grid)?.flatten_from(2)?.transpose(1, 2)?;
        Ok(self.fc2.forward(&crate::ops::gelu(&mixed)?)?)
    }
}

#[derive(Debug)]
struct TransformerLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl TransformerLayer {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok((x + y)?)
    }
}

#[derive(Debug)]
struct GlobalBlock {
    embed: nn::Conv,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    out_norm: LayerNorm,
}

/// Self-attention stream: overlapping patch embedding (stride 2) followed by
/// efficient self-attention and mix-FFN layers in every block.
#[derive(Debug)]
pub struct GlobalStream {
    blocks: Vec<GlobalBlock>,
    modality: Modality,
}

impl GlobalStream {
    pub fn new(cfg: &EncoderConfig, modality: Modality, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut in_c = 1;
        for i in 0..LEVELS {
            let vb = vb.pp(format!("block{}", i + 1));
            let c = cfg.channels[i];
            let k = if i == 0 { 7 } else { 3 };
            let embed = nn::conv(in_c, c, k, 2, k / 2, vb.pp("embed"))?;
            let embed_norm = LayerNorm::new(c, vb.pp("embed_norm"))?;
            let layers = (0..cfg.depth)
                .map(|j| {
                    let vb = vb.pp(format!("layer{j}"));
                    Ok(TransformerLayer {
                        norm1: LayerNorm::new(c, vb.pp("norm1"))?,
                        attn: Attention::new(c, cfg.heads[i], cfg.reduction[i], vb.pp("attn"))?,
                        norm2: LayerNorm::new(c, vb.pp("norm2"))?,
                        ffn: MixFfn::new(c, c * cfg.mlp_ratio, vb.pp("ffn"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out_norm = LayerNorm::new(c, vb.pp("out_norm"))?;
            blocks.push(GlobalBlock {
                embed,
                embed_norm,
                layers,
                out_norm,
            });
            in_c = c;
        }
        Ok(Self { blocks, modality })
    }

    /// `x` is `(B, 1, H, W)` with `H`, `W` multiples of 16.
    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        check_input(x)?;
        let mut maps = Vec::with_capacity(LEVELS);
        let mut cur = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let grid = block.embed.forward(&cur)?;
            let (b, c, h, w) = grid.dims4()?;
            let mut tokens = block
                .embed_norm
                .forward(&grid.flatten_from(2)?.transpose(1, 2)?)?;
            for layer in &block.layers {
                tokens = layer.forward(&tokens, h, w)?;
            }
            let tokens = block.out_norm.forward(&tokens)?;
            cur = tokens.transpose(1, 2)?.reshape((b, c, h, w))?;
            maps.push(FeatureMap {
                values: cur.clone(),
                modality: self.modality,
                stream: Stream::Global,
                scale: i + 1,
            });
        }
        Ok(FeaturePyramid {
            modality: self.modality,
            stream: Stream::Global,
            maps,
        })
    }
}

#[derive(Debug)]
struct ConvUnit {
    conv: nn::Conv,
    norm: nn::GroupNorm,
}

impl ConvUnit {
    fn new(in_c: usize, out_c: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: nn::conv(in_c, out_c, 3, 1, 1, vb.pp("conv"))?,
            norm: nn::GroupNorm::new(groups, out_c, 1e-5, vb.pp("norm"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Convolutional stream: per block two 3×3 conv + norm + ReLU units followed by
/// 2× max-pool downsampling.
#[derive(Debug)]
pub struct LocalStream {
    blocks: Vec<[ConvUnit; 2]>,
    modality: Modality,
}

impl LocalStream {
    pub fn new(cfg: &EncoderConfig, modality: Modality, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut in_c = 1;
        for i in 0..LEVELS {
            let vb = vb.pp(format!("block{}", i + 1));
            let c = cfg.channels[i];
            blocks.push([
                ConvUnit::new(in_c, c, cfg.norm_groups, vb.pp("unit1"))?,
                ConvUnit::new(c, c, cfg.norm_groups, vb.pp("unit2"))?,
            ]);
            in_c = c;
        }
        Ok(Self { blocks, modality })
    }

    /// Output of the very first convolution before normalisation.
    pub fn first_preactivation(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x)?;
        Ok(self.blocks[0][0].conv.forward(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        check_input(x)?;
        let mut maps = Vec::with_capacity(LEVELS);
        let mut cur = x.clone();
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            cur = b.forward(&a.forward(&cur)?)?.max_pool2d(2)?;
            maps.push(FeatureMap {
                values: cur.clone(),
                modality: self.modality,
                stream: Stream::Local,
                scale: i + 1,
            });
        }
        Ok(FeaturePyramid {
            modality: self.modality,
            stream: Stream::Local,
            maps,
        })
    }
}

/// Both streams of one modality branch.
#[derive(Debug)]
pub struct DualStreamEncoder {
    pub global: GlobalStream,
    pub local: LocalStream,
}

impl DualStreamEncoder {
    pub fn new(cfg: &EncoderConfig, modality: Modality, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            global: GlobalStream::new(cfg, modality, vb.pp("global"))?,
            local: LocalStream::new(cfg, modality, vb.pp("local"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(FeaturePyramid, FeaturePyramid)> {
        Ok((self.global.forward(x)?, self.local.forward(x)?))
    }
}
