//! Paired infrared/visible datasets: discovery, loading, patch cropping and
//! colour handling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss and score.
pub const IGNORE_LABEL: u8 = 255;

/// Single-channel raster, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Plane {
        Plane::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    pub fn transpose(&self) -> Plane {
        Plane::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Interleaved RGB raster (H×W×3), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbRaster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb raster {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_gray(plane: &Plane) -> Self {
        let data = plane.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            height: plane.height,
            width: plane.width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> RgbRaster {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&self.pixel(top + y, left + x));
            }
        }
        RgbRaster {
            height,
            width,
            data,
        }
    }
}

/// Per-pixel class indices; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let row = (top + y) * self.width + left;
            data.extend_from_slice(&self.data[row..row + width]);
        }
        LabelMap {
            height,
            width,
            data,
        }
    }

    /// Checks every label is a class index below `num_classes` or the ignore value.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(bad) = self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes)
        {
            return Err(Error::Dataset(format!(
                "label value {bad} outside 0..{num_classes} and not {IGNORE_LABEL}"
            )));
        }
        Ok(())
    }
}

/// An aligned infrared/visible pair with optional segmentation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub infrared: Plane,
    pub visible: RgbRaster,
    pub label: Option<LabelMap>,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        infrared: Plane,
        visible: RgbRaster,
        label: Option<LabelMap>,
    ) -> Result<Self> {
        let pair = Self {
            id: id.into(),
            infrared,
            visible,
            label,
        };
        pair.check_shapes()?;
        Ok(pair)
    }

    fn check_shapes(&self) -> Result<()> {
        let ir = self.infrared.dims();
        let vi = self.visible.dims();
        if ir != vi {
            return Err(Error::Shape(format!(
                "{}: infrared {}x{} vs visible {}x{}",
                self.id, ir.0, ir.1, vi.0, vi.1
            )));
        }
        if let Some(label) = &self.label {
            let lb = label.dims();
            if lb != ir {
                return Err(Error::Shape(format!(
                    "{}: infrared {}x{} vs label {}x{}",
                    self.id, ir.0, ir.1, lb.0, lb.1
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.infrared.dims()
    }

    /// Luminance of the visible image, the channel the fusion operates on.
    pub fn visible_luma(&self) -> Plane {
        to_luma_chroma(&self.visible).y
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> ImagePair {
        ImagePair {
            id: format!("{}@{top}_{left}", self.id),
            infrared: self.infrared.crop(top, left, size, size),
            visible: self.visible.crop(top, left, size, size),
            label: self.label.as_ref().map(|l| l.crop(top, left, size, size)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// File locations of one pair on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRef {
    pub id: String,
    pub infrared: PathBuf,
    pub visible: PathBuf,
    pub label: Option<PathBuf>,
}

fn list_by_stem(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Directory holding `ir/`, `vi/` and `labels/` for a split: `root/<split>` when it
/// exists, otherwise `root` itself.
pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    let nested = root.join(split.dir_name());
    if nested.join("ir").is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Lists the pairs of a split, sorted by id.
pub fn scan_dataset(root: &Path, split: Split) -> Result<Vec<PairRef>> {
    let dir = split_dir(root, split);
    let ir = list_by_stem(&dir.join("ir"))?;
    let vi = list_by_stem(&dir.join("vi"))?;
    let labels = list_by_stem(&dir.join("labels"))?;
    if ir.is_empty() && vi.is_empty() {
        return Err(Error::Dataset(format!(
            "no images under {}",
            dir.display()
        )));
    }
    let vi_map: std::collections::BTreeMap<_, _> = vi.into_iter().collect();
    let label_map: std::collections::BTreeMap<_, _> = labels.into_iter().collect();
    let ir_ids: std::collections::BTreeSet<_> = ir.iter().map(|(id, _)| id.clone()).collect();
    if let Some(orphan) = vi_map.keys().find(|id| !ir_ids.contains(*id)) {
        return Err(Error::Dataset(format!("missing infrared for {orphan}")));
    }
    let mut refs = Vec::with_capacity(ir.len());
    for (id, ir_path) in ir {
        let Some(vi_path) = vi_map.get(&id) else {
            return Err(Error::Dataset(format!("missing visible for {id}")));
        };
        refs.push(PairRef {
            label: label_map.get(&id).cloned(),
            visible: vi_path.clone(),
            infrared: ir_path,
            id,
        });
    }
    Ok(refs)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a grayscale (or 3-channel grayscale, channel 0) image into `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Plane> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(to_unit).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| to_unit(p.0[0]))
            .collect(),
    };
    Plane::new(h, w, data)
}

pub fn load_rgb(path: &Path) -> Result<RgbRaster> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    RgbRaster::new(h, w, img.into_raw().into_iter().map(to_unit).collect())
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw())
}

#[inline]
fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

#[inline]
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_pair(pair: &PairRef) -> Result<ImagePair> {
    let infrared = load_gray(&pair.infrared)?;
    let visible = load_rgb(&pair.visible)?;
    let label = pair.label.as_deref().map(load_labels).transpose()?;
    ImagePair::new(pair.id.clone(), infrared, visible, label)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn save_gray(plane: &Plane, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf: GrayImage = ImageBuffer::from_fn(plane.width as u32, plane.height as u32, |x, y| {
        Luma([to_byte(plane.get(y as usize, x as usize))])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb(raster: &RgbRaster, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf: RgbImage = ImageBuffer::from_fn(raster.width as u32, raster.height as u32, |x, y| {
        let p = raster.pixel(y as usize, x as usize);
        Rgb([to_byte(p[0]), to_byte(p[1]), to_byte(p[2])])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let buf = GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.data.clone())
        .ok_or_else(|| Error::Shape("label buffer size".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a pair in the `{ir,vi,labels}/<id>.png` layout under `dir`.
pub fn save_pair(pair: &ImagePair, dir: &Path) -> Result<()> {
    let name = format!("{}.png", pair.id);
    save_gray(&pair.infrared, &dir.join("ir").join(&name))?;
    save_rgb(&pair.visible, &dir.join("vi").join(&name))?;
    if let Some(label) = &pair.label {
        save_labels(label, &dir.join("labels").join(&name))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Append the start `dim - patch_size` when the stride grid misses the border.
    #[default]
    ClampLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridSpec {
    pub patch_size: usize,
    pub stride: usize,
    #[serde(default)]
    pub edge_policy: EdgePolicy,
}

impl Default for PatchGridSpec {
    fn default() -> Self {
        Self {
            patch_size: 256,
            stride: 100,
            edge_policy: EdgePolicy::ClampLast,
        }
    }
}

impl PatchGridSpec {
    pub fn new(patch_size: usize, stride: usize) -> Self {
        Self {
            patch_size,
            stride,
            edge_policy: EdgePolicy::ClampLast,
        }
    }

    /// Window starts along one axis of length `dim`.
    pub fn starts(&self, dim: usize) -> Result<Vec<usize>> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={}",
                self.stride, self.patch_size
            )));
        }
        if dim < self.patch_size {
            return Err(Error::Shape(format!(
                "image dimension {dim} smaller than patch size {}",
                self.patch_size
            )));
        }
        let last = dim - self.patch_size;
        let mut starts: Vec<usize> = (0..=last).step_by(self.stride).collect();
        match self.edge_policy {
            EdgePolicy::ClampLast => {
                if *starts.last().expect("non-empty") != last {
                    starts.push(last);
                }
            }
        }
        Ok(starts)
    }
}

/// Cuts a pair into square patches on the stride grid.
pub fn crop_patches(pair: &ImagePair, spec: &PatchGridSpec) -> Result<Vec<ImagePair>> {
    let (h, w) = pair.dims();
    let rows = spec.starts(h)?;
    let cols = spec.starts(w)?;
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &top in &rows {
        for &left in &cols {
            patches.push(pair.crop(top, left, spec.patch_size));
        }
    }
    Ok(patches)
}

/// Full-range BT.601 luma/chroma planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaChroma {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
}

pub fn to_luma_chroma(visible: &RgbRaster) -> LumaChroma {
    let n = visible.height * visible.width;
    let (mut y, mut cb, mut cr) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for px in visible.data.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        y.push(0.299 * r + 0.587 * g + 0.114 * b);
        cb.push(0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b);
        cr.push(0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b);
    }
    let (h, w) = visible.dims();
    LumaChroma {
        y: Plane::new(h, w, y).expect("sized"),
        cb: Plane::new(h, w, cb).expect("sized"),
        cr: Plane::new(h, w, cr).expect("sized"),
    }
}

/// Inverse of [`to_luma_chroma`], clamped to `[0, 1]`.
pub fn recombine(y: &Plane, cb: &Plane, cr: &Plane) -> Result<RgbRaster> {
    if y.dims() != cb.dims() || y.dims() != cr.dims() {
        return Err(Error::Shape(format!(
            "luma {:?} vs chroma {:?}/{:?}",
            y.dims(),
            cb.dims(),
            cr.dims()
        )));
    }
    let mut data = Vec::with_capacity(y.data.len() * 3);
    for ((&l, &u), &v) in y.data.iter().zip(&cb.data).zip(&cr.data) {
        let (u, v) = (u - 0.5, v - 0.5);
        data.push((l + 1.402 * v).clamp(0.0, 1.0));
        data.push((l - 0.344_136 * u - 0.714_136 * v).clamp(0.0, 1.0));
        data.push((l + 1.772 * u).clamp(0.0, 1.0));
    }
    RgbRaster::new(y.height, y.width, data)
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect-pads bottom/right so both dimensions are multiples of `multiple`.
pub fn pad_reflect(plane: &Plane, multiple: usize) -> Plane {
    let h = plane.height.div_ceil(multiple) * multiple;
    let w = plane.width.div_ceil(multiple) * multiple;
    if (h, w) == plane.dims() {
        return plane.clone();
    }
    Plane::from_fn(h, w, |y, x| {
        plane.get(
            reflect_index(y as isize, plane.height),
            reflect_index(x as isize, plane.width),
        )
    })
}

/// Holds out `fraction` of `items` (at least one when there are two or more)
/// after a seeded shuffle; returns `(train, validation)`.
pub fn split_validation<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (items.len() as f64 * fraction).round() as usize;
    if n_val == 0 && items.len() >= 2 && fraction > 0.0 {
        n_val = 1;
    }
    let (val, train) = idx.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| items[i].clone()).collect()
    };
    (pick(train), pick(val))
}
