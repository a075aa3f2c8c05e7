//! Refined-feature adaptive modulation: a learnable, softmax-normalised weight per
//! refined feature map, a weighted sum on the stride-2 grid and an MLP
//! segmentation head.

use std::io::Write as _;
use std::path::Path;

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use crate::encoder::{Modality, RefinedMap, Stream, LEVELS};
use crate::error::{Error, Result};
use crate::nn;

/// Number of modulated entries: 2 streams × 4 levels.
pub const ENTRIES: usize = 2 * LEVELS;

/// Stacking order of the modulated entries: global levels 1..4 then local 1..4.
pub fn stacking_order() -> [(Stream, usize); ENTRIES] {
    let mut out = [(Stream::Global, 1); ENTRIES];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (
            if k < LEVELS {
                Stream::Global
            } else {
                Stream::Local
            },
            k % LEVELS + 1,
        );
    }
    out
}

pub fn entry_name(stream: Stream, scale: usize) -> String {
    format!("w_{}{}", stream.letter(), scale)
}

/// Softmax of `raw`; errors on non-finite input.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Invalid("empty weight vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("modulation logits".into()));
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// Checks the simplex constraint on an effective weight vector.
pub fn check_simplex(weights: &[f64], what: &str) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Invariant(format!(
            "{what} weights {weights:?} sum to {sum}"
        )));
    }
    Ok(())
}

/// Unconstrained logits plus their softmax.
#[derive(Debug, Clone)]
pub struct ModulationWeights {
    /// Shares storage with the var-map entry `<prefix>.raw`.
    pub raw: Tensor,
}

impl ModulationWeights {
    pub fn new(len: usize, vb: &VarBuilder) -> Result<Self> {
        Ok(Self {
            raw: vb.get(len, "raw")?,
        })
    }

    /// Softmax over the logits, inside the autograd graph.
    pub fn effective(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.raw, 0)?)
    }

    pub fn effective_values(&self) -> Result<Vec<f64>> {
        Ok(self
            .effective()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?)
    }

    pub fn raw_values(&self) -> Result<Vec<f64>> {
        Ok(self
            .raw
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?)
    }
}

/// Segmentation logits at input resolution plus the weighted pre-head sum.
#[derive(Debug, Clone)]
pub struct RfamOutput {
    pub logits: Tensor,
    pub pre_head: Tensor,
}

#[derive(Debug)]
pub struct Rfam {
    pub weights: ModulationWeights,
    projections: Vec<nn::Conv>,
    hidden: nn::Conv,
    classifier: nn::Conv,
}

pub const EMBED_WIDTH: usize = 64;
pub const HEAD_HIDDEN: usize = 128;

impl Rfam {
    pub fn new(num_classes: usize, vb: VarBuilder) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let weights = ModulationWeights::new(ENTRIES, &vb)?;
        let projections = stacking_order()
            .iter()
            .map(|&(s, i)| nn::pointwise(2, EMBED_WIDTH, vb.pp(format!("proj_{}{i}", s.letter()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            projections,
            hidden: nn::pointwise(EMBED_WIDTH, HEAD_HIDDEN, vb.pp("head_hidden"))?,
            classifier: nn::pointwise(HEAD_HIDDEN, num_classes, vb.pp("head_out"))?,
        })
    }

    /// Orders `refined` by the stacking order, rejecting missing, duplicate or
    /// foreign entries.
    fn ordered<'a>(refined: &'a [RefinedMap]) -> Result<Vec<&'a RefinedMap>> {
        if refined.len() != ENTRIES {
            return Err(Error::Invalid(format!(
                "expected {ENTRIES} refined maps, got {}",
                refined.len()
            )));
        }
        let modality = refined[0].modality;
        stacking_order()
            .iter()
            .map(|&(stream, scale)| {
                let mut hits = refined
                    .iter()
                    .filter(|r| r.stream == stream && r.scale == scale);
                let first = hits.next().ok_or_else(|| {
                    Error::Invalid(format!("missing refined map {}", entry_name(stream, scale)))
                })?;
                if hits.next().is_some() {
                    return Err(Error::Invalid(format!(
                        "duplicate refined map {}",
                        entry_name(stream, scale)
                    )));
                }
                if first.modality != modality {
                    return Err(Error::Invalid("refined maps mix modalities".into()));
                }
                Ok(first)
            })
            .collect()
    }

    /// Weighted sum of the projected, upsampled entries on the stride-2 grid.
    pub fn weighted_sum(&self, refined: &[RefinedMap], effective: &Tensor) -> Result<Tensor> {
        let ordered = Self::ordered(refined)?;
        let (_, _, h, w) = ordered[0].values.dims4()?;
        let mut acc: Option<Tensor> = None;
        for (k, (entry, proj)) in ordered.iter().zip(&self.projections).enumerate() {
            let up = nn::upsample_bilinear(&entry.values, h, w)?;
            let term = proj.forward(&up)?.broadcast_mul(&effective.get(k)?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("ENTRIES > 0"))
    }

    pub fn head(&self, pre_head: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(pre_head)?.relu()?;
        Ok(self.classifier.forward(&h)?)
    }

    /// Logits at twice the stride-2 grid, i.e. input resolution.
    pub fn aggregate_with(&self, refined: &[RefinedMap], effective: &Tensor) -> Result<RfamOutput> {
        let pre_head = self.weighted_sum(refined, effective)?;
        let (_, _, h, w) = pre_head.dims4()?;
        let logits = nn::upsample_bilinear(&self.head(&pre_head)?, 2 * h, 2 * w)?;
        Ok(RfamOutput { logits, pre_head })
    }

    pub fn aggregate(&self, refined: &[RefinedMap]) -> Result<RfamOutput> {
        self.aggregate_with(refined, &self.weights.effective()?)
    }
}

/// Effective modulation weights per epoch for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrajectory {
    pub modality: Modality,
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl WeightTrajectory {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            entries: Vec::new(),
        }
    }

    pub fn record(&mut self, epoch: usize, weights: &[f64]) -> Result<()> {
        if weights.len() != ENTRIES {
            return Err(Error::Invalid(format!(
                "expected {ENTRIES} weights, got {}",
                weights.len()
            )));
        }
        check_simplex(weights, "trajectory")?;
        if let Some(&(last, _)) = self.entries.last() {
            if epoch <= last {
                return Err(Error::Invalid(format!(
                    "epoch {epoch} does not follow recorded epoch {last}"
                )));
            }
        }
        self.entries.push((epoch, weights.to_vec()));
        Ok(())
    }

    pub fn last(&self) -> Option<&(usize, Vec<f64>)> {
        self.entries.last()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["epoch".to_string()];
        cols.extend(stacking_order().iter().map(|&(s, i)| entry_name(s, i)));
        cols.join(",")
    }

    /// Weights are written with 17 significant digits so reading the file back
    /// reproduces them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for (epoch, w) in &self.entries {
            out.push_str(&epoch.to_string());
            for v in w {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str, modality: Modality) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty trajectory csv".into()))?;
        if header.trim() != Self::csv_header() {
            return Err(Error::Invalid(format!(
                "unexpected trajectory header {header:?}"
            )));
        }
        let mut traj = Self::new(modality);
        for line in lines {
            let mut fields = line.split(',');
            let epoch = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Invalid(format!("bad epoch in {line:?}")))?;
            let weights = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("bad weight in {line:?}: {e}")))?;
            traj.record(epoch, &weights)?;
        }
        Ok(traj)
    }

    pub fn read_csv(path: &Path, modality: Modality) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, modality)
    }
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum()
}
