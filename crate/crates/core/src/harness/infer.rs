//! Group inference: every image of a group is processed together.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::GrayImage;

use crate::backbone::MixTransformer;
use crate::data;
use crate::error::{data_err, Result};
use crate::model::VcpModel;
use crate::ops;

/// Image files of a group directory, sorted by name.
pub fn group_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| data_err(dir, e.to_string()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| ["jpg", "jpeg", "png", "bmp"].contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(data_err(dir, "no images in group directory"));
    }
    Ok(out)
}

/// Co-saliency maps at each image's original resolution.
pub fn predict_group(
    model: &VcpModel,
    backbone: &MixTransformer,
    images: &[PathBuf],
    input_size: usize,
    chunk: usize,
) -> Result<Vec<GrayImage>> {
    let originals = images.iter().map(|p| data::load_rgb(p)).collect::<Result<Vec<_>>>()?;
    let n = originals.len();
    let flat: Vec<f32> = originals
        .iter()
        .flat_map(|img| data::preprocess_rgb(img, input_size))
        .collect();
    let device = model.store.device().clone();
    let x = Tensor::from_vec(flat, (n, 3, input_size, input_size), &device)?.to_dtype(model.dtype())?;
    let out = model.forward_chunked(backbone, &x, chunk, false)?;
    let mut maps = Vec::with_capacity(n);
    for (i, img) in originals.iter().enumerate() {
        let (w, h) = img.dimensions();
        let logits = out.logits.narrow(0, i, 1)?;
        let resized = ops::resize_bilinear(&logits, h as usize, w as usize)?;
        let probs = ops::to_vec_f64(&ops::sigmoid(&resized)?)?;
        let pixels: Vec<u8> = probs.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        maps.push(GrayImage::from_raw(w, h, pixels).expect("buffer matches dimensions"));
    }
    Ok(maps)
}

/// Writes `<out>/<stem>.png` for every image in `group_dir`.
pub fn infer_group(
    model: &VcpModel,
    backbone: &MixTransformer,
    group_dir: &Path,
    out: &Path,
    input_size: usize,
    chunk: usize,
) -> Result<Vec<PathBuf>> {
    let images = group_images(group_dir)?;
    let maps = predict_group(model, backbone, &images, input_size, chunk)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(maps.len());
    for (path, map) in images.iter().zip(maps) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pred");
        let target = out.join(format!("{stem}.png"));
        map.save(&target)?;
        written.push(target);
    }
    Ok(written)
}
