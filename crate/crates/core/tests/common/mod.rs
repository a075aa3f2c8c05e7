//! Independent reference implementations and gradient checkers shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use candle_core::{Device, Tensor, Var};
use priorfuse_core::data::Plane;
use priorfuse_core::losses::{intensity_loss, ohem_ce, texture_loss, OhemParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane {
    Plane::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn image(values: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_vec(values.to_vec(), (1, 1, h, w), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Elementwise relative error `|a − n| / max(|a|, |n|)`; pairs where both are
/// below `floor` are compared absolutely against `floor`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        (a - n).abs() / floor
    } else {
        (a - n).abs() / scale
    }
}

/// Analytic gradient of `loss` at `x` and its central finite-difference
/// estimate, restricted to the indices in `check`.
pub fn gradient_pair(
    x: &[f64],
    dims: &[usize],
    check: &[usize],
    loss: &dyn Fn(&Tensor) -> Tensor,
) -> Vec<(f64, f64)> {
    let var = Var::from_tensor(&Tensor::from_vec(x.to_vec(), dims, &Device::Cpu).unwrap()).unwrap();
    let grads = loss(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eval = |v: &[f64]| scalar(&loss(&Tensor::from_vec(v.to_vec(), dims, &Device::Cpu).unwrap()));
    check
        .iter()
        .map(|&i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            (analytic[i], (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Central differences with step 1e-4 resolve about 1e-12 in f64, so entries
/// that cancel to zero are compared absolutely below 1e-6.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(a, n)| relative_error(a, n, GRAD_FLOOR)).fold(0.0, f64::max)
}

/// Worst relative error of the intensity-loss gradient over `instances` random
/// 8×8 problems.
pub fn intensity_gradient_error(instances: u64) -> f64 {
    let (h, w) = (8, 8);
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(100 + seed);
        let f: Vec<f64> = (0..h * w).map(|_| r.random()).collect();
        let ir = image(&(0..h * w).map(|_| r.random()).collect::<Vec<f64>>(), h, w);
        let all: Vec<usize> = (0..h * w).collect();
        let pairs = gradient_pair(&f, &[1, 1, h, w], &all, &|t| intensity_loss(t, &ir).unwrap());
        worst = worst.max(max_relative_error(&pairs));
    }
    worst
}

/// Direct 3×3 Sobel responses `(gx, gy)` with replicate padding.
pub fn sobel_direct(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = at(y + dy as isize - 1, x + dx as isize - 1);
                    gx[y as usize * w + x as usize] += KX[dy][dx] * v;
                    gy[y as usize * w + x as usize] += KX[dx][dy] * v;
                }
            }
        }
    }
    (gx, gy)
}

pub fn sobel_magnitude_direct(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (gx, gy) = sobel_direct(img, h, w);
    gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect()
}

/// Fused pixels whose 3×3 neighbourhood contains no kink of the texture loss
/// (residual or Sobel component within `margin` of zero).
pub fn smooth_texture_pixels(f: &[f64], target: &[f64], h: usize, w: usize, margin: f64) -> Vec<usize> {
    let (gx, gy) = sobel_direct(f, h, w);
    let kink: Vec<bool> = (0..h * w)
        .map(|i| {
            let residual = gx[i].abs() + gy[i].abs() - target[i];
            residual.abs() < margin || gx[i].abs() < margin || gy[i].abs() < margin
        })
        .collect();
    (0..h * w)
        .filter(|&i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    !(0..h as isize).contains(&yy)
                        || !(0..w as isize).contains(&xx)
                        || !kink[yy as usize * w + xx as usize]
                })
            })
        })
        .collect()
}

/// Worst relative error of the texture-loss gradient, and the smallest number
/// of pixels checked in any instance.
pub fn texture_gradient_error(instances: u64) -> (f64, usize) {
    let (h, w) = (8, 8);
    let mut worst: f64 = 0.0;
    let mut fewest = usize::MAX;
    for seed in 0..instances {
        let mut r = rng(200 + seed);
        let mut draw = || (0..h * w).map(|_| r.random::<f64>()).collect::<Vec<f64>>();
        let (f, ir, vi) = (draw(), draw(), draw());
        let target: Vec<f64> = sobel_magnitude_direct(&ir, h, w)
            .iter()
            .zip(&sobel_magnitude_direct(&vi, h, w))
            .map(|(a, b)| a.max(*b))
            .collect();
        let check = smooth_texture_pixels(&f, &target, h, w, 1e-3);
        fewest = fewest.min(check.len());
        let (ir, vi) = (image(&ir, h, w), image(&vi, h, w));
        let pairs = gradient_pair(&f, &[1, 1, h, w], &check, &|t| texture_loss(t, &ir, &vi).unwrap());
        worst = worst.max(max_relative_error(&pairs));
    }
    (worst, fewest)
}

/// Worst relative error of the OHEM cross-entropy gradient with respect to the
/// logits on random 3-class 8×8 problems. Instances with a true-class
/// probability within 1e-3 of the threshold are redrawn so the hard set is
/// stable under the finite-difference step.
pub fn ohem_gradient_error(instances: u64) -> f64 {
    let (c, h, w) = (3, 8, 8);
    let params = OhemParams::default();
    let mut worst: f64 = 0.0;
    let mut seed = 300;
    let mut done = 0;
    while done < instances {
        seed += 1;
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..c * h * w).map(|_| r.random_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..h * w)
            .map(|_| if r.random_bool(0.1) { 255 } else { r.random_range(0..c as u8) })
            .collect();
        let near_threshold = (0..h * w).any(|p| {
            if labels[p] == 255 {
                return false;
            }
            let z: Vec<f64> = (0..c).map(|k| logits[k * h * w + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let prob = (z[labels[p] as usize] - m).exp() / total;
            (prob - params.thresh).abs() < 1e-3
        });
        if near_threshold {
            continue;
        }
        let all: Vec<usize> = (0..c * h * w).collect();
        let pairs = gradient_pair(&logits, &[1, c, h, w], &all, &|t| {
            ohem_ce(t, &labels, &params).unwrap().loss
        });
        worst = worst.max(max_relative_error(&pairs));
        done += 1;
    }
    worst
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn entropy_of<K: std::hash::Hash + Eq>(counts: &HashMap<K, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// `H(X) + H(Y) − H(X, Y)` from hashed 8-bit histograms.
pub fn mi_pair_ref(x: &Plane, y: &Plane) -> f64 {
    let n = x.data.len() as f64;
    let mut hx = HashMap::new();
    let mut hy = HashMap::new();
    let mut hxy = HashMap::new();
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (qa, qb) = (quantize(a), quantize(b));
        *hx.entry(qa).or_insert(0) += 1;
        *hy.entry(qb).or_insert(0) += 1;
        *hxy.entry((qa, qb)).or_insert(0) += 1;
    }
    entropy_of(&hx, n) + entropy_of(&hy, n) - entropy_of(&hxy, n)
}

pub fn mi_ref(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    mi_pair_ref(f, a) + mi_pair_ref(f, b)
}

/// SSIM by direct summation over each 11×11 window with a 2-D Gaussian.
pub fn ssim_pair_ref(x: &Plane, y: &Plane) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut wts = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            wts[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (x.height, x.width);
    let mut sum = 0.0;
    let mut count = 0;
    for top in 0..=h - k {
        for left in 0..=w - k {
            let px = |p: &Plane, i: usize, j: usize| p.data[(top + i) * w + left + j] as f64;
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    mx += wts[i * k + j] * px(x, i, j);
                    my += wts[i * k + j] * px(y, i, j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (dx, dy) = (px(x, i, j) - mx, px(y, i, j) - my);
                    vx += wts[i * k + j] * dx * dx;
                    vy += wts[i * k + j] * dy * dy;
                    cov += wts[i * k + j] * dx * dy;
                }
            }
            sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn ssim_sum_ref(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    ssim_pair_ref(f, a) + ssim_pair_ref(f, b)
}

pub fn psnr_ref(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let mut total = 0.0;
    for (i, &v) in f.data.iter().enumerate() {
        total += (v as f64 - a.data[i] as f64).powi(2) + (v as f64 - b.data[i] as f64).powi(2);
    }
    let mse = total / (2.0 * f.data.len() as f64);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Pearson correlation in the single-pass moment form; 0 for a constant input.
pub fn pearson_ref(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 1e-12 * n * sxx.max(1e-300) || vy <= 1e-12 * n * syy.max(1e-300) {
        return 0.0;
    }
    (n * sxy - sx * sy) / (vx.sqrt() * vy.sqrt())
}

pub fn scd_ref(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let fv: Vec<f64> = f.data.iter().map(|&v| v as f64).collect();
    let av: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = fv.iter().zip(&bv).map(|(x, y)| x - y).collect();
    let fa: Vec<f64> = fv.iter().zip(&av).map(|(x, y)| x - y).collect();
    pearson_ref(&fb, &av) + pearson_ref(&fa, &bv)
}
