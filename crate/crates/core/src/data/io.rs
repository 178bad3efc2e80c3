//! 8-bit PNG import/export and dataset ingestion.
//!
//! Quantization is `round(255·v)` after clamping to `[0, 1]`, so 0.5 is
//! stored as 128. Reading divides by 255.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::metrics::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::SamplePair;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes item 0 of a `1×H×W×C` tensor, `C ∈ {1, 3}`, as PNG.
pub fn write_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    let (h, w) = (s.height() as u32, s.width() as u32);
    let px = |i: u32, j: u32, c: usize| quantize(t.at(0, i as usize, j as usize, c).as_f64());
    match s.channels() {
        1 => GrayImage::from_fn(w, h, |x, y| Luma([px(y, x, 0)])).save(path).map_err(|e| image_err(path, e)),
        3 => RgbImage::from_fn(w, h, |x, y| Rgb([px(y, x, 0), px(y, x, 1), px(y, x, 2)]))
            .save(path)
            .map_err(|e| image_err(path, e)),
        c => Err(Error::Usage(format!("cannot write a {c}-channel image"))),
    }
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_image(&mask.to_tensor::<f64>(), path)
}

/// Channel `c` of item 0, rescaled so its minimum maps to 0 and maximum to 255.
/// A constant map is written as all zeros.
pub fn write_feature_map<T: Scalar>(t: &Tensor<T>, c: usize, path: impl AsRef<Path>) -> Result<()> {
    let ch = t.batch_item(0).channel(c);
    let (lo, hi) = ch.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let v = v.as_f64();
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let norm = ch.map(|v| if span > 0.0 { T::of((v.as_f64() - lo) / span) } else { T::zero() });
    write_image(&norm, path)
}

fn to_tensor(img: &DynamicImage, gray: bool) -> Tensor<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if gray {
        let g = img.to_luma8();
        Tensor::from_fn(Shape::new(1, h, w, 1), |_, i, j, _| g.get_pixel(j as u32, i as u32)[0] as f64 / 255.0)
    } else {
        let rgb = img.to_rgb8();
        Tensor::from_fn(Shape::new(1, h, w, 3), |_, i, j, c| rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0)
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| image_err(path, e))
}

/// Reads an image as `1×H×W×C`: one channel for grayscale files, else RGB.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let img = open(path)?;
    let gray = matches!(img.color().channel_count(), 1 | 2);
    Ok(to_tensor(&img, gray))
}

/// Reads a mask, binarizing 8-bit luminance with `value > 127`.
pub fn read_mask(path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let mut g = open(path)?.to_luma8();
    if let Some((h, w)) = size {
        g = image::imageops::resize(&g, w as u32, h as u32, FilterType::Nearest);
    }
    let (w, h) = (g.width() as usize, g.height() as usize);
    BinaryMask::new(h, w, g.pixels().map(|p| p[0] > 127).collect())
}

fn read_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<f64>> {
    let mut img = open(path)?;
    if let Some((h, w)) = size {
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = image::imageops::resize(&img.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
        img = DynamicImage::ImageRgb8(rgb);
    }
    Ok(to_tensor(&img, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    /// Target `(height, width)`; `None` keeps the file size.
    pub size: Option<(usize, usize)>,
    /// Fraction of pairs assigned to training.
    pub split_ratio: f64,
    pub seed: u64,
    /// Suffix removed from mask stems before pairing, e.g. `_1stHO`.
    pub mask_suffix: Option<String>,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig { size: Some((256, 256)), split_ratio: 0.86, seed: 0, mask_suffix: None }
    }
}

fn stems(dir: &Path, suffix: Option<&str>) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let stem = suffix.and_then(|s| stem.strip_suffix(s)).unwrap_or(stem).to_string();
        out.insert(stem, path);
    }
    Ok(out)
}

/// Training and test sizes for `n` pairs.
pub fn split_sizes(n: usize, ratio: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&ratio) {
        return config_err(format!("split ratio {ratio} is outside [0, 1]"));
    }
    let train = (ratio * n as f64).round() as usize;
    let test = n - train;
    if train == 0 || test == 0 {
        return config_err(format!("split of {n} pairs at ratio {ratio} leaves an empty set ({train} train, {test} test)"));
    }
    Ok((train, test))
}

/// Every pair under `root/images/*` and `root/masks/*`, matched by file stem
/// and sorted by stem.
pub fn load_pairs(root: impl AsRef<Path>, size: Option<(usize, usize)>, mask_suffix: Option<&str>) -> Result<Vec<SamplePair>> {
    let root = root.as_ref();
    let images = stems(&root.join("images"), None)?;
    let masks = stems(&root.join("masks"), mask_suffix)?;
    if images.is_empty() && masks.is_empty() {
        return config_err(format!("no images or masks under {}", root.display()));
    }
    let unpaired: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("images/{k}"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("masks/{k}")))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let image = read_rgb(ipath, size)?;
        let mask = read_mask(&masks[stem], size)?;
        if (mask.height(), mask.width()) != (image.shape().height(), image.shape().width()) {
            return Err(Error::Shape(format!("{stem}: image and mask extents differ")));
        }
        pairs.push(SamplePair { id: stem.clone(), image, mask });
    }
    Ok(pairs)
}

/// [`load_pairs`], then a seeded shuffle and a (train, test) split.
pub fn load_dataset(root: impl AsRef<Path>, cfg: &LoadConfig) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let mut pairs = load_pairs(root, cfg.size, cfg.mask_suffix.as_deref())?;
    let (n_train, _) = split_sizes(pairs.len(), cfg.split_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pairs.shuffle(&mut rng);
    let test = pairs.split_off(n_train);
    Ok((pairs, test))
}

/// Writes pairs as `root/images/<id>.png` and `root/masks/<id>.png`.
pub fn write_dataset(root: impl AsRef<Path>, pairs: &[SamplePair]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for p in pairs {
        write_image(&p.image, root.join("images").join(format!("{}.png", p.id)))?;
        write_mask(&p.mask, root.join("masks").join(format!("{}.png", p.id)))?;
    }
    Ok(())
}
