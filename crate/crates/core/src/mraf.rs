//! Multi-level representation-adaptive fusion: a softmax-weighted sum of the
//! significant semantic features (deep, selected by the pilots) and the shallow
//! high-frequency details, decoded into the fused luminance image.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureMap, FeaturePyramid, Modality, Stream};
use crate::error::{Error, Result};
use crate::nn;
use crate::rfam::{ModulationWeights, EMBED_WIDTH};

/// Shallow-detail tags in their fixed order.
pub const HFD_TAGS: [&str; 4] = ["Hfd_ic", "Hfd_vc", "Hfd_it", "Hfd_vt"];

/// Identity of one fusion input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub modality: Modality,
    pub stream: Stream,
    pub scale: usize,
    pub channels: usize,
}

impl FusionEntry {
    pub fn key(&self) -> String {
        format!("{}_{}{}", self.modality, self.stream.letter(), self.scale)
    }
}

/// The block-1 maps of both streams of both modalities, ordered
/// (ir-local, vi-local, ir-global, vi-global).
pub fn extract_hfd(
    ir: (&FeaturePyramid, &FeaturePyramid),
    vi: (&FeaturePyramid, &FeaturePyramid),
) -> Result<[FeatureMap; 4]> {
    let pick = |pair: (&FeaturePyramid, &FeaturePyramid), stream: Stream, modality: Modality| {
        let p = if pair.0.stream == stream { pair.0 } else { pair.1 };
        if p.stream != stream || p.modality != modality {
            return Err(Error::Invalid(format!(
                "expected {} {} pyramid",
                modality,
                stream.as_str()
            )));
        }
        Ok(p.level(1).clone())
    };
    Ok([
        pick(ir, Stream::Local, Modality::Ir)?,
        pick(vi, Stream::Local, Modality::Vi)?,
        pick(ir, Stream::Global, Modality::Ir)?,
        pick(vi, Stream::Global, Modality::Vi)?,
    ])
}

/// SsF maps (infrared entries first, each modality in selection order) and the
/// four Hfd maps.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub ssf: Vec<FeatureMap>,
    pub hfd: [FeatureMap; 4],
}

impl FusionInputs {
    pub fn entries(&self) -> impl Iterator<Item = &FeatureMap> {
        self.ssf.iter().chain(self.hfd.iter())
    }

    pub fn count(&self) -> usize {
        self.ssf.len() + self.hfd.len()
    }

    /// Tag per entry: `SsF_<modality>_<stream><scale>` then the Hfd tags.
    pub fn tags(&self) -> Vec<String> {
        self.ssf
            .iter()
            .map(|m| format!("SsF_{}", m.tag()))
            .chain(HFD_TAGS.iter().map(|t| t.to_string()))
            .collect()
    }
}

/// Fused luminance `(B, 1, H, W)` in `[0, 1]` plus the weighted pre-head sum.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub y: Tensor,
    pub pre_head: Tensor,
}

#[derive(Debug)]
pub struct Mraf {
    pub weights: ModulationWeights,
    entries: Vec<FusionEntry>,
    projections: Vec<nn::Conv>,
    conv1: nn::Conv,
    conv2: nn::Conv,
}

pub const RECON_HIDDEN: usize = 32;

impl Mraf {
    /// `entries` lists the SsF entries followed by the four Hfd entries.
    pub fn new(entries: Vec<FusionEntry>, vb: VarBuilder) -> Result<Self> {
        if entries.len() <= 4 {
            return Err(Error::Config(
                "fusion needs at least one significant feature besides the 4 shallow maps".into(),
            ));
        }
        let weights = ModulationWeights::new(entries.len(), &vb)?;
        let n_ssf = entries.len() - 4;
        let projections = entries
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let name = if k < n_ssf {
                    format!("proj_ssf_{}", e.key())
                } else {
                    format!("proj_{}", HFD_TAGS[k - n_ssf].to_lowercase())
                };
                nn::pointwise(e.channels, EMBED_WIDTH, vb.pp(name))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            entries,
            projections,
            conv1: nn::conv(EMBED_WIDTH, RECON_HIDDEN, 3, 1, 1, vb.pp("recon1"))?,
            conv2: nn::conv(RECON_HIDDEN, 1, 3, 1, 1, vb.pp("recon2"))?,
        })
    }

    pub fn entries(&self) -> &[FusionEntry] {
        &self.entries
    }

    fn check(&self, inputs: &FusionInputs) -> Result<()> {
        if inputs.count() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "fusion expects {} entries, got {}",
                self.entries.len(),
                inputs.count()
            )));
        }
        for (map, spec) in inputs.entries().zip(&self.entries) {
            let c = map.values.dim(1)?;
            if c != spec.channels {
                return Err(Error::Shape(format!(
                    "fusion entry {} has {c} channels, expected {}",
                    map.tag(),
                    spec.channels
                )));
            }
            nn::ensure_finite(&map.values, "fusion features")?;
        }
        Ok(())
    }

    /// Projected entries upsampled to the stride-2 grid and weighted by
    /// `effective`, summed.
    pub fn weighted_sum(&self, inputs: &FusionInputs, effective: &Tensor) -> Result<Tensor> {
        self.check(inputs)?;
        let (_, _, h, w) = inputs.hfd[0].values.dims4()?;
        let mut acc: Option<Tensor> = None;
        for (k, (map, proj)) in inputs.entries().zip(&self.projections).enumerate() {
            let projected = nn::upsample_bilinear(&proj.forward(&map.values)?, h, w)?;
            let term = projected.broadcast_mul(&effective.get(k)?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("non-empty entries"))
    }

    /// Two 3×3 convolutions, ×2 bilinear upsampling and a sigmoid.
    pub fn reconstruct(&self, pre_head: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = pre_head.dims4()?;
        let hidden = self.conv1.forward(pre_head)?.relu()?;
        let out = nn::upsample_bilinear(&self.conv2.forward(&hidden)?, 2 * h, 2 * w)?;
        Ok(candle_nn::ops::sigmoid(&out)?)
    }

    pub fn fuse_with(&self, inputs: &FusionInputs, effective: &Tensor) -> Result<FusionOutput> {
        let pre_head = self.weighted_sum(inputs, effective)?;
        Ok(FusionOutput {
            y: self.reconstruct(&pre_head)?,
            pre_head,
        })
    }

    pub fn fuse(&self, inputs: &FusionInputs) -> Result<FusionOutput> {
        self.fuse_with(inputs, &self.weights.effective()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn map(modality: Modality, stream: Stream, scale: usize, c: usize, side: usize, seed: f32) -> FeatureMap {
        let v: Vec<f32> = (0..c * side * side)
            .map(|i| (i as f32 * 0.731 + seed).sin())
            .collect();
        FeatureMap {
            values: Tensor::from_vec(v, (1, c, side, side), &Device::Cpu).unwrap(),
            modality,
            stream,
            scale,
        }
    }

    fn pyramid(modality: Modality, stream: Stream, seed: f32) -> FeaturePyramid {
        FeaturePyramid {
            modality,
            stream,
            maps: (1..=4)
                .map(|i| map(modality, stream, i, 4 * i, 16 >> (i - 1), seed + i as f32))
                .collect(),
        }
    }

    fn setup(seed: u64) -> (VarMap, Mraf, FusionInputs) {
        let ir_g = pyramid(Modality::Ir, Stream::Global, 0.0);
        let ir_l = pyramid(Modality::Ir, Stream::Local, 1.0);
        let vi_g = pyramid(Modality::Vi, Stream::Global, 2.0);
        let vi_l = pyramid(Modality::Vi, Stream::Local, 3.0);
        let hfd = extract_hfd((&ir_g, &ir_l), (&vi_l, &vi_g)).unwrap();
        let ssf = vec![ir_g.level(3).clone(), vi_l.level(4).clone()];
        let inputs = FusionInputs { ssf, hfd };
        let entries = inputs
            .entries()
            .map(|m| FusionEntry {
                modality: m.modality,
                stream: m.stream,
                scale: m.scale,
                channels: m.values.dim(1).unwrap(),
            })
            .collect();
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let mraf = Mraf::new(entries, vb.pp("mraf")).unwrap();
        nn::reseed(&varmap, seed).unwrap();
        (varmap, mraf, inputs)
    }

    fn vec_of(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn hfd_order_is_fixed() {
        let (_, _, inputs) = setup(0);
        let tags: Vec<_> = inputs.hfd.iter().map(|m| m.tag()).collect();
        assert_eq!(tags, vec!["ir_l1", "vi_l1", "ir_g1", "vi_g1"]);
        assert!(inputs.hfd.iter().all(|m| m.values.dims()[2] == 16));
        assert_eq!(inputs.tags()[0], "SsF_ir_g3");
        assert_eq!(inputs.tags()[5], "Hfd_vt");
    }

    #[test]
    fn output_is_bounded_and_full_size() {
        let (_, mraf, inputs) = setup(1);
        let out = mraf.fuse(&inputs).unwrap();
        assert_eq!(out.y.dims(), &[1, 1, 32, 32]);
        assert!(vec_of(&out.y).iter().all(|v| (0.0..=1.0).contains(v)));
        let w = mraf.weights.effective_values().unwrap();
        assert_eq!(w.len(), 6);
        crate::rfam::check_simplex(&w, "mraf").unwrap();
    }

    #[test]
    fn one_hot_weight_isolates_entry() {
        let (_, mraf, inputs) = setup(2);
        let k = 1;
        let mut w = vec![0f32; 6];
        w[k] = 1.0;
        let w = Tensor::from_vec(w, 6, &Device::Cpu).unwrap();
        let sum = mraf.weighted_sum(&inputs, &w).unwrap();
        let alone = nn::upsample_bilinear(&mraf.projections[k].forward(&inputs.ssf[1].values).unwrap(), 16, 16).unwrap();
        let d = vec_of(&sum).iter().zip(vec_of(&alone)).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(d < 1e-6);
    }

    #[test]
    fn zero_features_give_constant_image() {
        let (_, mraf, mut inputs) = setup(3);
        for m in inputs.ssf.iter_mut().chain(inputs.hfd.iter_mut()) {
            m.values = m.values.zeros_like().unwrap();
        }
        let y = vec_of(&mraf.fuse(&inputs).unwrap().y);
        // zero padding in the 3×3 convs only touches the border ring
        let interior: Vec<f32> = (4..28).flat_map(|r| y[r * 32 + 4..r * 32 + 28].to_vec()).collect();
        assert!(interior.iter().all(|v| (v - interior[0]).abs() < 1e-6));
    }

    #[test]
    fn logit_shift_leaves_output_unchanged() {
        let (varmap, mraf, inputs) = setup(4);
        let raw = Tensor::new(&[0.2f32, -0.4, 1.0, 0.0, 0.3, -1.2], &Device::Cpu).unwrap();
        let var = varmap.data().lock().unwrap()["mraf.raw"].clone();
        var.set(&raw).unwrap();
        let a = vec_of(&mraf.fuse(&inputs).unwrap().y);
        var.set(&(raw + 3.0).unwrap()).unwrap();
        let b = vec_of(&mraf.fuse(&inputs).unwrap().y);
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(d < 1e-6);
    }

    #[test]
    fn pre_head_is_linear_in_weights() {
        let (_, mraf, inputs) = setup(5);
        let w1 = [0.1f32, 0.2, 0.3, 0.1, 0.2, 0.1];
        let w2 = [0.5f32, 0.1, 0.1, 0.1, 0.1, 0.1];
        let alpha = 0.25f32;
        let t = |w: &[f32]| Tensor::from_vec(w.to_vec(), 6, &Device::Cpu).unwrap();
        let mix: Vec<f32> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let s1 = vec_of(&mraf.weighted_sum(&inputs, &t(&w1)).unwrap());
        let s2 = vec_of(&mraf.weighted_sum(&inputs, &t(&w2)).unwrap());
        let sm = vec_of(&mraf.weighted_sum(&inputs, &t(&mix)).unwrap());
        for ((a, b), m) in s1.iter().zip(&s2).zip(&sm) {
            assert!((alpha * a + (1.0 - alpha) * b - m).abs() < 1e-5);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (_, mraf, mut inputs) = setup(6);
        inputs.ssf.pop();
        assert!(mraf.fuse(&inputs).is_err());
        let (_, mraf, mut inputs) = setup(6);
        let v = inputs.ssf[0].values.dims().to_vec();
        let mut nan = vec![0f32; v.iter().product()];
        nan[0] = f32::NAN;
        inputs.ssf[0].values = Tensor::from_vec(nan, v, &Device::Cpu).unwrap();
        assert!(mraf.fuse(&inputs).is_err());
    }
}
