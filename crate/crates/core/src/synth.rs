//! Synthetic two-class shapes pairs (discs and squares on background) for
//! smoke tests and toy-scale experiments.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_pair, ImagePair, LabelMap, Plane, RgbRaster};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Square { cy: f32, cx: f32, half: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Square { cy, cx, half } => (y - cy).abs() <= half && (x - cx).abs() <= half,
        }
    }
}

/// One pair of side `size`: the infrared image shows the shapes as warm, smooth
/// blobs over a dim gradient; the visible image shows them dark over a striped
/// texture. Label 1 marks shape pixels, 0 background.
pub fn shapes_pair(id: &str, size: usize, rng: &mut impl Rng) -> Result<ImagePair> {
    let s = size as f32;
    let n_shapes = rng.random_range(1..=3);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let cy = rng.random_range(0.15 * s..0.85 * s);
            let cx = rng.random_range(0.15 * s..0.85 * s);
            let r = rng.random_range(s / 10.0..s / 5.0);
            if rng.random_bool(0.5) {
                Shape::Disc { cy, cx, r }
            } else {
                Shape::Square { cy, cx, half: r * 0.85 }
            }
        })
        .collect();
    let heat: Vec<f32> = (0..n_shapes).map(|_| rng.random_range(0.7..0.95)).collect();
    let freq = rng.random_range(0.25..0.6);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let tilt = rng.random_range(-0.1..0.1);
    let mut noise = |amp: f32| rng.random_range(-amp..amp);

    let mut labels = vec![0u8; size * size];
    let mut ir = vec![0f32; size * size];
    let mut vi = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let hit = shapes.iter().position(|sh| sh.contains(fy, fx));
            let i = y * size + x;
            let stripes = (freq * (fx * ca + fy * sa)).sin();
            let base_ir = 0.2 + tilt * (fy / s - 0.5);
            let base_vi = 0.55 + 0.25 * stripes;
            match hit {
                Some(k) => {
                    labels[i] = 1;
                    ir[i] = heat[k] + noise(0.02);
                    vi[i] = 0.2 + 0.05 * stripes + noise(0.02);
                }
                None => {
                    ir[i] = base_ir + noise(0.03);
                    vi[i] = base_vi + noise(0.03);
                }
            }
            ir[i] = ir[i].clamp(0.0, 1.0);
            vi[i] = vi[i].clamp(0.0, 1.0);
        }
    }
    let rgb: Vec<f32> = vi
        .iter()
        .flat_map(|&g| [g, (g * 0.95).min(1.0), (g * 0.85 + 0.05).min(1.0)])
        .collect();
    ImagePair::new(
        id,
        Plane::new(size, size, ir)?,
        RgbRaster::new(size, size, rgb)?,
        Some(LabelMap::new(size, size, labels)?),
    )
}

/// `count` pairs with ids `shape_0000`, `shape_0001`, ...
pub fn shapes_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| shapes_pair(&format!("shape_{k:04}"), size, &mut rng))
        .collect()
}

/// Writes the pairs in the on-disk dataset layout (`ir/`, `vi/`, `labels/`).
pub fn write_dataset(pairs: &[ImagePair], dir: &Path) -> Result<()> {
    for pair in pairs {
        save_pair(pair, dir)?;
    }
    Ok(())
}
