//! Group-structured datasets, three-group batch sampling, preprocessing and a
//! synthetic shape dataset.

mod toy;

pub use toy::{render_sample, synthesize_toy_dataset, ToyConfig, ToySample, SHAPES};

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{data_err, Result, VcpError};

/// Per-channel mean of ImageNet in RGB order.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// Per-channel standard deviation of ImageNet in RGB order.
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Groups drawn per training batch.
pub const GROUPS_PER_BATCH: usize = 3;

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub name: String,
    pub images: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    pub label_index: usize,
}

impl ImageGroup {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn files_by_stem(dir: &Path, extensions: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| data_err(dir, e.to_string()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// One group per sub-directory of `img_root`, labelled by sorted name.
pub fn scan_dataset(img_root: &Path, gt_root: &Path) -> Result<Vec<ImageGroup>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(img_root).map_err(|e| data_err(img_root, e.to_string()))? {
        let path = entry?.path();
        if path.is_dir() {
            names.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut groups = Vec::with_capacity(names.len());
    for (label_index, name) in names.into_iter().enumerate() {
        let images = files_by_stem(&img_root.join(&name), &IMAGE_EXTENSIONS)?;
        let gt_dir = gt_root.join(&name);
        if !gt_dir.is_dir() {
            return Err(data_err(&gt_dir, format!("no mask directory for group `{name}`")));
        }
        let masks = files_by_stem(&gt_dir, &["png"])?;
        if images.is_empty() {
            return Err(data_err(img_root.join(&name), format!("group `{name}` is empty")));
        }
        for (stem, path) in &images {
            if !masks.iter().any(|(m, _)| m == stem) {
                return Err(data_err(path, format!("image `{stem}` in group `{name}` has no mask")));
            }
        }
        for (stem, path) in &masks {
            if !images.iter().any(|(i, _)| i == stem) {
                return Err(data_err(path, format!("mask `{stem}` in group `{name}` has no image")));
            }
        }
        let (images, masks) = images
            .into_iter()
            .map(|(stem, img)| {
                let mask = masks.iter().find(|(m, _)| *m == stem).unwrap().1.clone();
                (img, mask)
            })
            .unzip();
        groups.push(ImageGroup {
            name,
            images,
            masks,
            label_index,
        });
    }
    if groups.is_empty() {
        return Err(data_err(img_root, "no groups found"));
    }
    Ok(groups)
}

/// Per-group sample count: the smallest of the group sizes, capped.
pub fn group_sample_count(sizes: &[usize], cap: usize) -> usize {
    sizes.iter().copied().chain(std::iter::once(cap)).min().unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    /// Indices into the group list.
    pub groups: [usize; GROUPS_PER_BATCH],
    pub n: usize,
    /// Image indices within each group, drawn without replacement.
    pub members: [Vec<usize>; GROUPS_PER_BATCH],
}

/// Draws three distinct groups uniformly and `n` images from each.
pub fn sample_batch<R: Rng + ?Sized>(sizes: &[usize], cap: usize, rng: &mut R) -> Result<BatchSpec> {
    if sizes.len() < GROUPS_PER_BATCH {
        return Err(VcpError::InvalidInput(format!(
            "batch sampling needs at least {GROUPS_PER_BATCH} groups, got {}",
            sizes.len()
        )));
    }
    let picked = sample(rng, sizes.len(), GROUPS_PER_BATCH).into_vec();
    let groups = [picked[0], picked[1], picked[2]];
    let n = group_sample_count(&groups.map(|g| sizes[g]), cap);
    let members = groups.map(|g| sample(rng, sizes[g], n).into_vec());
    Ok(BatchSpec { groups, n, members })
}

/// Bilinear resize to `size x size` and ImageNet standardisation, `[3, size, size]` in CHW order.
pub fn preprocess_rgb(img: &image::RgbImage, size: usize) -> Vec<f32> {
    let resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = ((px.0[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32;
        }
    }
    out
}

/// Nearest resize and binarisation at one half, `[1, size, size]`.
pub fn preprocess_gray_mask(mask: &image::GrayImage, size: usize) -> Vec<f32> {
    let resized = image::imageops::resize(mask, size as u32, size as u32, FilterType::Nearest);
    resized.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect()
}

pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|e| data_err(path, format!("cannot decode image: {e}")))?
        .to_rgb8())
}

pub fn load_mask(path: &Path) -> Result<image::GrayImage> {
    Ok(image::open(path)
        .map_err(|e| data_err(path, format!("cannot decode mask: {e}")))?
        .to_luma8())
}

pub fn preprocess_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    Ok(preprocess_rgb(&load_rgb(path)?, size))
}

pub fn preprocess_mask(path: &Path, size: usize) -> Result<Vec<f32>> {
    Ok(preprocess_gray_mask(&load_mask(path)?, size))
}

/// Decodes images (and masks) in parallel into `[N, 3, S, S]` and `[N, 1, S, S]` tensors.
pub fn load_batch(
    images: &[PathBuf],
    masks: Option<&[PathBuf]>,
    size: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Option<Tensor>)> {
    let n = images.len();
    let decoded = images
        .par_iter()
        .map(|p| preprocess_image(p, size))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::from_vec(decoded.concat(), (n, 3, size, size), device)?.to_dtype(dtype)?;
    let y = match masks {
        Some(m) => {
            let decoded = m
                .par_iter()
                .map(|p| preprocess_mask(p, size))
                .collect::<Vec<_>>()
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::from_vec(decoded.concat(), (n, 1, size, size), device)?.to_dtype(dtype)?)
        }
        None => None,
    };
    Ok((x, y))
}
