//! Fusion-quality metrics (MI, SSIM, PSNR, SCD), each taken against both source
//! images, and segmentation scores (per-class IoU, mIoU).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Plane, IGNORE_LABEL};
use crate::error::{Error, Result};

fn same_dims(planes: &[&Plane], what: &str) -> Result<()> {
    let d = planes[0].dims();
    if planes.iter().any(|p| p.dims() != d) {
        let dims: Vec<_> = planes.iter().map(|p| p.dims()).collect();
        return Err(Error::Shape(format!("{what}: {dims:?}")));
    }
    Ok(())
}

#[inline]
fn quantize(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Mutual information (bits) from a 256×256 joint histogram of 8-bit values.
pub fn mutual_information(x: &Plane, y: &Plane) -> Result<f64> {
    same_dims(&[x, y], "mutual information")?;
    let mut joint = vec![0u64; 256 * 256];
    let mut px = [0u64; 256];
    let mut py = [0u64; 256];
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (i, j) = (quantize(a), quantize(b));
        joint[i * 256 + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.data.len() as f64;
    let mut mi = 0.0;
    for i in 0..256 {
        if px[i] == 0 {
            continue;
        }
        for j in 0..256 {
            let c = joint[i * 256 + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy / ((px[i] as f64 / n) * (py[j] as f64 / n))).log2();
        }
    }
    Ok(mi.max(0.0))
}

/// Entropy (bits) of the 8-bit histogram of `x`.
pub fn entropy_bits(x: &Plane) -> f64 {
    let mut hist = [0u64; 256];
    for &v in &x.data {
        hist[quantize(v)] += 1;
    }
    let n = x.data.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// `MI(F, A) + MI(F, B)`.
pub fn mi(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    Ok(mutual_information(fused, a)? + mutual_information(fused, b)?)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Separable Gaussian filtering over every position where the window fits.
fn filter_valid(values: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * values[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5, dynamic range 1).
pub fn ssim(x: &Plane, y: &Plane) -> Result<f64> {
    same_dims(&[x, y], "ssim")?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let xv: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let yv: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xv.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = yv.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xv.iter().zip(&yv).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&xv, h, w, &g);
    let my = filter_valid(&yv, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

/// `SSIM(F, A) + SSIM(F, B)`.
pub fn ssim_sum(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    Ok(ssim(fused, a)? + ssim(fused, b)?)
}

fn mse(x: &Plane, y: &Plane) -> f64 {
    x.data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.data.len() as f64
}

/// `10·log10(1 / MSE_avg)` with `MSE_avg` the mean of the MSEs against both
/// sources; `+inf` when the fused image equals both.
pub fn psnr(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    same_dims(&[fused, a, b], "psnr")?;
    let m = 0.5 * (mse(fused, a) + mse(fused, b));
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Pearson correlation; 0 when either argument has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Sum of correlations of differences: `r(F − B, A) + r(F − A, B)`.
pub fn scd(fused: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    same_dims(&[fused, a, b], "scd")?;
    let f: Vec<f64> = fused.data.iter().map(|&v| v as f64).collect();
    let av: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let f_minus_b: Vec<f64> = f.iter().zip(&bv).map(|(x, y)| x - y).collect();
    let f_minus_a: Vec<f64> = f.iter().zip(&av).map(|(x, y)| x - y).collect();
    Ok(pearson(&f_minus_b, &av) + pearson(&f_minus_a, &bv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub mi: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub scd: f64,
}

pub fn evaluate_fusion(id: &str, fused: &Plane, a: &Plane, b: &Plane) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        id: id.to_string(),
        mi: mi(fused, a, b)?,
        ssim: ssim_sum(fused, a, b)?,
        psnr: psnr(fused, a, b)?,
        scd: scd(fused, a, b)?,
    })
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

/// `id,mi,ssim,psnr,scd` rows in the given order plus a `mean` row.
pub fn fusion_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("id,mi,ssim,psnr,scd\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.id,
            fmt_value(r.mi),
            fmt_value(r.ssim),
            fmt_value(r.psnr),
            fmt_value(r.scd)
        );
    }
    if !records.is_empty() {
        let n = records.len() as f64;
        let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "mean,{},{},{},{}",
            fmt_value(mean(|r| r.mi)),
            fmt_value(mean(|r| r.ssim)),
            fmt_value(mean(|r| r.psnr)),
            fmt_value(mean(|r| r.scd))
        );
    }
    out
}

/// Per-class IoU (`None` for classes absent from both prediction and ground
/// truth) and their mean over defined classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Confusion counts accumulated over any number of images.
#[derive(Debug, Clone, PartialEq)]
pub struct SegAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    valid: u64,
}

impl SegAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            valid: 0,
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.tp.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c || p >= c {
                return Err(Error::Invalid(format!(
                    "class index {} outside 0..{c}",
                    p.max(g)
                )));
            }
            self.valid += 1;
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    pub fn score(&self) -> Result<SegScore> {
        if self.valid == 0 {
            return Err(Error::Invalid("no labeled pixels to score".into()));
        }
        let iou: Vec<Option<f64>> = (0..self.tp.len())
            .map(|k| {
                let denom = self.tp[k] + self.fp[k] + self.fn_[k];
                (denom > 0).then(|| self.tp[k] as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(SegScore { iou, miou })
    }
}

pub fn seg_scores(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<SegScore> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut acc = SegAccumulator::new(num_classes);
    acc.add(&pred.data, &gt.data)?;
    acc.score()
}

/// `class,iou` rows plus a `miou` row; undefined classes are written as `nan`.
pub fn seg_csv(score: &SegScore) -> String {
    let mut out = String::from("class,iou\n");
    for (k, v) in score.iou.iter().enumerate() {
        let _ = match v {
            Some(v) => writeln!(out, "{k},{v:.6}"),
            None => writeln!(out, "{k},nan"),
        };
    }
    let _ = writeln!(out, "miou,{:.6}", score.miou);
    out
}
