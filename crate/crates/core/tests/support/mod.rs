//! Straight-line reference implementations and test helpers.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcp_core::ops::to_vec_f64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    tensor(uniform(rng, n, -scale, scale), shape)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    to_vec_f64(t).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Bitwise equality of two tensors of any dtype.
pub fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return false;
    }
    match a.dtype() {
        DType::F32 => {
            let (x, y) = (
                a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            );
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        DType::F64 => {
            let (x, y) = (
                a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            );
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        other => panic!("unsupported dtype {other:?}"),
    }
}

/// Random binary mask with at least one pixel of each class when `n >= 2`.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, fg: f64) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n).map(|_| if rng.random_bool(fg) { 1.0 } else { 0.0 }).collect();
    if n >= 2 {
        m[0] = 1.0;
        m[n - 1] = 0.0;
    }
    m
}

/// Prediction map quantised like an 8-bit PNG, so thresholds see exact values.
pub fn random_pred(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..=255u32) as f64 / 255.0).collect()
}
