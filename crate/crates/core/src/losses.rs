//! Training objectives: intensity loss, Sobel texture loss, OHEM cross-entropy
//! and their weighted combination.
//!
//! All image tensors are `(B, 1, H, W)`; logits are `(B, C, H, W)`. Every loss
//! works in the dtype of its inputs so gradient checks can run in f64.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared residual between the fused image and the infrared image.
pub fn intensity_loss(fused: &Tensor, infrared: &Tensor) -> Result<Tensor> {
    same_shape(fused, infrared, "intensity loss")?;
    Ok((fused - infrared)?.sqr()?.mean_all()?)
}

/// `|Gx * img| + |Gy * img|` with replicate padding; output has the input size.
pub fn sobel_magnitude(img: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = img.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("sobel expects 1 channel, got {c}")));
    }
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "sobel needs at least 3x3, got {h}x{w}"
        )));
    }
    // Separable form: a central difference along one axis smoothed by
    // [1, 2, 1] along the other. Differences of equal neighbours are exactly
    // zero, so constant regions give exact zeros.
    let padded = img.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let dx = (padded.narrow(3, 2, w)? - padded.narrow(3, 0, w)?)?;
    let gx = ((dx.narrow(2, 0, h)? + dx.narrow(2, 2, h)?)? + (dx.narrow(2, 1, h)? * 2.0)?)?;
    let dy = (padded.narrow(2, 2, h)? - padded.narrow(2, 0, h)?)?;
    let gy = ((dy.narrow(3, 0, w)? + dy.narrow(3, 2, w)?)? + (dy.narrow(3, 1, w)? * 2.0)?)?;
    Ok((gx.abs()? + gy.abs()?)?)
}

/// Mean absolute deviation of the fused gradient magnitude from the
/// elementwise maximum of the source gradient magnitudes.
pub fn texture_loss(fused: &Tensor, infrared: &Tensor, visible: &Tensor) -> Result<Tensor> {
    same_shape(fused, infrared, "texture loss")?;
    same_shape(fused, visible, "texture loss")?;
    let target = sobel_magnitude(infrared)?.maximum(&sobel_magnitude(visible)?)?;
    Ok((sobel_magnitude(fused)? - target)?.abs()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemParams {
    /// Pixels whose true-class probability is below this are "hard".
    pub thresh: f64,
    /// Lower bound on kept pixels, as a fraction of valid pixels.
    pub min_kept_fraction: f64,
}

impl Default for OhemParams {
    fn default() -> Self {
        Self {
            thresh: 0.7,
            min_kept_fraction: 1.0 / 16.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OhemLoss {
    pub loss: Tensor,
    pub kept: usize,
    pub valid: usize,
}

impl OhemLoss {
    /// Set when every pixel carried the ignore label.
    pub fn is_vacuous(&self) -> bool {
        self.valid == 0
    }
}

/// Indices of the pixels OHEM keeps, given per-pixel losses and validity.
pub fn ohem_selection(losses: &[f64], valid: &[bool], params: &OhemParams) -> Vec<usize> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Vec::new();
    }
    let min_kept = ((params.min_kept_fraction * n_valid as f64).ceil() as usize).clamp(1, n_valid);
    let hard: Vec<usize> = (0..losses.len())
        .filter(|&i| valid[i] && (-losses[i]).exp() < params.thresh)
        .collect();
    if hard.len() >= min_kept {
        return hard;
    }
    let mut order: Vec<usize> = (0..losses.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(min_kept);
    order.sort_unstable();
    order
}

/// Cross-entropy averaged over hard pixels (true-class probability below
/// `thresh`), topped up with the highest-loss pixels to at least
/// `ceil(min_kept_fraction · valid)`. `labels` holds `B·H·W` class indices in
/// row-major order; [`IGNORE_LABEL`] pixels are excluded.
pub fn ohem_ce(logits: &Tensor, labels: &[u8], params: &OhemParams) -> Result<OhemLoss> {
    let (b, c, h, w) = logits.dims4()?;
    let n = b * h * w;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "logits {b}x{c}x{h}x{w} vs {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= c)
    {
        return Err(Error::Invalid(format!("label {bad} outside 0..{c}")));
    }
    let valid: Vec<bool> = labels.iter().map(|&l| l != IGNORE_LABEL).collect();
    let targets: Vec<u32> = labels
        .iter()
        .map(|&l| if l == IGNORE_LABEL { 0 } else { l as u32 })
        .collect();
    let log_probs = candle_nn::ops::log_softmax(logits, 1)?
        .permute((0, 2, 3, 1))?
        .reshape((n, c))?;
    let index = Tensor::from_vec(targets, (n, 1), logits.device())?;
    let per_pixel = log_probs.gather(&index, 1)?.squeeze(1)?.neg()?;
    let values = per_pixel.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let keep = ohem_selection(&values, &valid, params);
    let n_valid = valid.iter().filter(|&&v| v).count();
    if keep.is_empty() {
        log::warn!("ohem: no valid pixels, loss defined as 0");
        return Ok(OhemLoss {
            loss: per_pixel.zeros_like()?.sum_all()?,
            kept: 0,
            valid: n_valid,
        });
    }
    let mut mask = vec![0.0f64; n];
    for &i in &keep {
        mask[i] = 1.0;
    }
    let mask = Tensor::from_vec(mask, n, logits.device())?.to_dtype(logits.dtype())?;
    let loss = ((per_pixel * mask)?.sum_all()? / keep.len() as f64)?;
    Ok(OhemLoss {
        loss,
        kept: keep.len(),
        valid: n_valid,
    })
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_int: f64,
    pub l_tex: f64,
    pub l_visual: f64,
    pub l_seg_ir: f64,
    pub l_seg_vi: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Assembles the breakdown from its independent terms.
    pub fn from_terms(l_int: f64, l_tex: f64, l_seg_ir: f64, l_seg_vi: f64, lambda: f64) -> Self {
        let l_visual = lambda * l_int + l_tex;
        let l_seg = l_seg_ir + l_seg_vi;
        Self {
            l_int,
            l_tex,
            l_visual,
            l_seg_ir,
            l_seg_vi,
            l_seg,
            l_total: l_visual + l_seg,
            lambda,
        }
    }

    pub const CSV_HEADER: &'static str = "step,l_int,l_tex,l_visual,l_seg_ir,l_seg_vi,l_total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.l_int, self.l_tex, self.l_visual, self.l_seg_ir, self.l_seg_vi, self.l_total
        )
    }
}

/// Graph-connected total loss plus its scalar breakdown.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ·L_int + L_tex + OHEM(ir branch) + OHEM(vi branch)`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    fused: &Tensor,
    infrared: &Tensor,
    visible: &Tensor,
    logits_ir: &Tensor,
    logits_vi: &Tensor,
    labels: &[u8],
    lambda: f64,
    ohem: &OhemParams,
) -> Result<TotalLoss> {
    let l_int = intensity_loss(fused, infrared)?;
    let l_tex = texture_loss(fused, infrared, visible)?;
    let seg_ir = ohem_ce(logits_ir, labels, ohem)?.loss;
    let seg_vi = ohem_ce(logits_vi, labels, ohem)?.loss;
    let total = (((&l_int * lambda)? + &l_tex)? + (&seg_ir + &seg_vi)?)?;
    let breakdown = LossBreakdown::from_terms(
        scalar(&l_int)?,
        scalar(&l_tex)?,
        scalar(&seg_ir)?,
        scalar(&seg_vi)?,
        lambda,
    );
    Ok(TotalLoss { total, breakdown })
}

/// Per-pixel argmax of `(B, C, H, W)` logits, row-major `B·H·W`.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u8>> {
    Ok(logits
        .argmax(1)?
        .flatten_all()?
        .to_dtype(DType::U32)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as u8)
        .collect())
}
