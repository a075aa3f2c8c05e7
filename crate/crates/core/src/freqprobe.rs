//! Frequency-response analysis of feature maps: radially averaged log-amplitude
//! spectra and low-frequency energy ratios.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::mraf::FusionInputs;

pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_CUTOFF: f64 = 0.1;

/// Channel-averaged radial spectrum. Frequencies are bin centres normalised so
/// that 1 is the Nyquist frequency; bins no frequency falls into are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub tag: String,
    pub frequencies: Vec<f64>,
    pub log_amplitude: Vec<f64>,
}

/// Mean-subtracted channels of one map, each `height × width`, row-major.
#[derive(Debug, Clone)]
pub struct Channels {
    pub height: usize,
    pub width: usize,
    pub planes: Vec<Vec<f64>>,
}

impl Channels {
    pub fn new(height: usize, width: usize, mut planes: Vec<Vec<f64>>) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::Shape(format!(
                "spectral analysis needs at least 4x4, got {height}x{width}"
            )));
        }
        if planes.is_empty() || planes.iter().any(|p| p.len() != height * width) {
            return Err(Error::Shape("channel planes do not match the map size".into()));
        }
        for p in &mut planes {
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            p.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(Self {
            height,
            width,
            planes,
        })
    }

    /// Every channel of every batch item of a `(B, C, H, W)` or `(C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4, got {r}"))),
        };
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let planes = flat.chunks(h * w).map(|p| p.to_vec()).collect::<Vec<_>>();
        debug_assert_eq!(planes.len(), b * c);
        Self::new(h, w, planes)
    }
}

/// Radial frequency (1 = Nyquist) of every DFT cell, row-major.
fn radial_frequencies(h: usize, w: usize) -> Vec<f64> {
    let signed = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / (n as f64 / 2.0)
    };
    let mut out = Vec::with_capacity(h * w);
    for ky in 0..h {
        for kx in 0..w {
            let (fy, fx) = (signed(ky, h), signed(kx, w));
            out.push((fy * fy + fx * fx).sqrt());
        }
    }
    out
}

fn bin_of(r: f64, bins: usize) -> usize {
    ((r.min(1.0) * bins as f64) as usize).min(bins - 1)
}

/// Unnormalised 2-D DFT of a real plane.
fn dft2(plane: &[f64], h: usize, w: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    data
}

/// Power `|X|² / (H·W)` per radial bin summed over channels; by Parseval the
/// total equals the sum of squared mean-subtracted values.
pub fn binned_energy(channels: &Channels, bins: usize) -> Vec<f64> {
    let (h, w) = (channels.height, channels.width);
    let radii = radial_frequencies(h, w);
    let mut planner = FftPlanner::new();
    let mut energy = vec![0.0; bins];
    for plane in &channels.planes {
        let spec = dft2(plane, h, w, &mut planner);
        for (z, &r) in spec.iter().zip(&radii) {
            energy[bin_of(r, bins)] += z.norm_sqr() / (h * w) as f64;
        }
    }
    energy
}

/// Radially binned `log(1 + |X|/sqrt(H·W))`, averaged within each bin and then
/// over channels.
pub fn spectral_profile(channels: &Channels, bins: usize, tag: &str) -> Result<SpectralProfile> {
    if bins == 0 {
        return Err(Error::Invalid("bins must be positive".into()));
    }
    let (h, w) = (channels.height, channels.width);
    let radii = radial_frequencies(h, w);
    let mut counts = vec![0usize; bins];
    for &r in &radii {
        counts[bin_of(r, bins)] += 1;
    }
    let mut planner = FftPlanner::new();
    let norm = ((h * w) as f64).sqrt();
    let mut acc = vec![0.0; bins];
    for plane in &channels.planes {
        let spec = dft2(plane, h, w, &mut planner);
        let mut sums = vec![0.0; bins];
        for (z, &r) in spec.iter().zip(&radii) {
            sums[bin_of(r, bins)] += (1.0 + z.norm() / norm).ln();
        }
        for b in 0..bins {
            if counts[b] > 0 {
                acc[b] += sums[b] / counts[b] as f64;
            }
        }
    }
    let n = channels.planes.len() as f64;
    let (frequencies, log_amplitude) = (0..bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| ((b as f64 + 0.5) / bins as f64, acc[b] / n))
        .unzip();
    Ok(SpectralProfile {
        tag: tag.to_string(),
        frequencies,
        log_amplitude,
    })
}

/// Share of spectral energy at radial frequency `<= cutoff`. A map with no
/// energy after mean subtraction counts as entirely low-frequency (ratio 1).
pub fn low_freq_ratio(channels: &Channels, cutoff: f64) -> f64 {
    let (h, w) = (channels.height, channels.width);
    let radii = radial_frequencies(h, w);
    let mut planner = FftPlanner::new();
    let (mut low, mut total) = (0.0, 0.0);
    for plane in &channels.planes {
        let spec = dft2(plane, h, w, &mut planner);
        for (z, &r) in spec.iter().zip(&radii) {
            let p = z.norm_sqr();
            total += p;
            if r <= cutoff {
                low += p;
            }
        }
    }
    // residue of mean subtraction on a flat map is not signal
    let values = (channels.planes.len() * h * w) as f64;
    if total / (h * w) as f64 <= 1e-20 * values {
        return 1.0;
    }
    low / total
}

/// Profile and low-frequency ratio of every fusion input in entry order, tagged
/// as in [`FusionInputs::tags`]. Maps smaller than 4×4 are skipped.
pub fn probe_fusion_inputs(
    inputs: &FusionInputs,
    bins: usize,
    cutoff: f64,
) -> Result<(Vec<SpectralProfile>, Vec<(String, f64)>)> {
    let mut profiles = Vec::new();
    let mut ratios = Vec::new();
    for (map, tag) in inputs.entries().zip(inputs.tags()) {
        let (_, _, h, w) = map.values.dims4()?;
        if h < 4 || w < 4 {
            log::warn!("skipping {tag}: {h}x{w} is too small for spectral analysis");
            continue;
        }
        let channels = Channels::from_tensor(&map.values)?;
        profiles.push(spectral_profile(&channels, bins, &tag)?);
        ratios.push((tag, low_freq_ratio(&channels, cutoff)));
    }
    Ok((profiles, ratios))
}

/// `tag,bin_center,log_amplitude` rows.
pub fn profiles_csv(profiles: &[SpectralProfile]) -> String {
    let mut out = String::from("tag,bin_center,log_amplitude\n");
    for p in profiles {
        for (f, a) in p.frequencies.iter().zip(&p.log_amplitude) {
            let _ = writeln!(out, "{},{f:.6},{a:.9}", p.tag);
        }
    }
    out
}

/// `tag,low_freq_ratio` rows.
pub fn ratios_csv(ratios: &[(String, f64)]) -> String {
    let mut out = String::from("tag,low_freq_ratio\n");
    for (tag, r) in ratios {
        let _ = writeln!(out, "{tag},{r:.9}");
    }
    out
}
