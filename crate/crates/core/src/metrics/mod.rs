//! Saliency evaluation: MAE, S-measure, E-measure and F-measure with
//! precision-recall and F-threshold curves.
//!
//! Predictions are real maps in `[0, 1]`, ground truth is binary. A pixel is
//! foreground at threshold `t` (one of `0..=255`) when `255 * pred > t`.

mod dataset;

pub use dataset::{evaluate_dataset, write_reports, DatasetEval};

use crate::error::{Result, VcpError};

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(VcpError::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(VcpError::InvalidInput("empty map".into()));
    }
    Ok(())
}

fn is_fg(g: f64) -> bool {
    g >= 0.5
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Per-threshold confusion counts. Entry `t` counts pixels with `255 * pred > t`.
#[derive(Clone, Debug)]
pub struct Confusion {
    pub tp: Vec<f64>,
    pub fp: Vec<f64>,
    pub positives: f64,
    pub pixels: f64,
}

impl Confusion {
    pub fn new(pred: &[f64], gt: &[f64]) -> Result<Self> {
        check(pred, gt)?;
        // ceil(255 p) thresholds are exceeded by a pixel; bucket by that count.
        let mut fg_hist = [0.0f64; THRESHOLDS + 1];
        let mut bg_hist = [0.0f64; THRESHOLDS + 1];
        let mut positives = 0.0;
        for (&p, &g) in pred.iter().zip(gt) {
            let bucket = (255.0 * p).ceil().clamp(0.0, THRESHOLDS as f64) as usize;
            if is_fg(g) {
                fg_hist[bucket] += 1.0;
                positives += 1.0;
            } else {
                bg_hist[bucket] += 1.0;
            }
        }
        let mut tp = vec![0.0; THRESHOLDS];
        let mut fp = vec![0.0; THRESHOLDS];
        let (mut acc_fg, mut acc_bg) = (0.0, 0.0);
        for t in (0..THRESHOLDS).rev() {
            acc_fg += fg_hist[t + 1];
            acc_bg += bg_hist[t + 1];
            tp[t] = acc_fg;
            fp[t] = acc_bg;
        }
        Ok(Self {
            tp,
            fp,
            positives,
            pixels: pred.len() as f64,
        })
    }
}

/// Curve over the 256 thresholds with its mean and maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub values: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

impl Curve {
    pub fn from_values(values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(0.0, f64::max);
        Self { values, mean, max }
    }
}

#[derive(Clone, Debug)]
pub struct FMeasure {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub curve: Curve,
}

pub fn f_from_pr(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den > 0.0 {
        (1.0 + beta2) * p * r / den
    } else {
        0.0
    }
}

pub fn f_measure_from(c: &Confusion, beta2: f64) -> FMeasure {
    let mut precision = Vec::with_capacity(THRESHOLDS);
    let mut recall = Vec::with_capacity(THRESHOLDS);
    let mut f = Vec::with_capacity(THRESHOLDS);
    for t in 0..THRESHOLDS {
        let predicted = c.tp[t] + c.fp[t];
        let p = if predicted > 0.0 { c.tp[t] / predicted } else { 0.0 };
        let r = if c.positives > 0.0 { c.tp[t] / c.positives } else { 0.0 };
        precision.push(p);
        recall.push(r);
        f.push(f_from_pr(p, r, beta2));
    }
    FMeasure {
        precision,
        recall,
        curve: Curve::from_values(f),
    }
}

pub fn f_measure(pred: &[f64], gt: &[f64], beta2: f64) -> Result<FMeasure> {
    Ok(f_measure_from(&Confusion::new(pred, gt)?, beta2))
}

/// Enhanced alignment of one pixel given mean-centred binary prediction and mask.
fn enhanced(a: f64, b: f64) -> f64 {
    let align = 2.0 * a * b / (a * a + b * b + EPS);
    (align + 1.0) * (align + 1.0) / 4.0
}

pub fn e_measure_from(c: &Confusion) -> Curve {
    let n = c.pixels;
    let mu_g = c.positives / n;
    let values = (0..THRESHOLDS)
        .map(|t| {
            let (tp, fp) = (c.tp[t], c.fp[t]);
            let predicted = tp + fp;
            if c.positives == 0.0 {
                return (n - predicted) / n;
            }
            if c.positives == n {
                return predicted / n;
            }
            let fn_ = c.positives - tp;
            let tn = n - c.positives - fp;
            let mu_p = predicted / n;
            let (p1, p0) = (1.0 - mu_p, -mu_p);
            let (g1, g0) = (1.0 - mu_g, -mu_g);
            let sum = tp * enhanced(p1, g1)
                + fp * enhanced(p1, g0)
                + fn_ * enhanced(p0, g1)
                + tn * enhanced(p0, g0);
            sum / n
        })
        .collect();
    Curve::from_values(values)
}

pub fn e_measure(pred: &[f64], gt: &[f64]) -> Result<Curve> {
    Ok(e_measure_from(&Confusion::new(pred, gt)?))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    (mean, std, n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, n) = mean_std(values);
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// Structural similarity of a rectangular block.
fn block_ssim(pred: &[f64], gt: &[f64], w: usize, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let count = (rows.1 - rows.0) * (cols.1 - cols.0);
    if count == 0 {
        return 0.0;
    }
    let cells = || (rows.0..rows.1).flat_map(move |i| (cols.0..cols.1).map(move |j| i * w + j));
    let nf = count as f64;
    let x = cells().map(|k| pred[k]).sum::<f64>() / nf;
    let y = cells().map(|k| gt[k]).sum::<f64>() / nf;
    let div = (count.max(2) - 1) as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for k in cells() {
        let (dx, dy) = (pred[k] - x, gt[k] - y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / div, syy / div, sxy / div);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point used by the region term: rounded foreground centroid, plus one.
pub fn region_split(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut count, mut sr, mut sc) = (0usize, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if is_fg(gt[i * w + j]) {
                count += 1;
                sr += i as f64;
                sc += j as f64;
            }
        }
    }
    let (x, y) = if count == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        (
            (sc / count as f64).round_ties_even(),
            (sr / count as f64).round_ties_even(),
        )
    };
    ((x as usize + 1).min(w), (y as usize + 1).min(h))
}

pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    if pred.len() != h * w {
        return Err(VcpError::Shape(format!("{} pixels for a {h}x{w} map", pred.len())));
    }
    let gt: Vec<f64> = gt.iter().map(|&g| if is_fg(g) { 1.0 } else { 0.0 }).collect();
    let n = pred.len() as f64;
    let y = gt.iter().sum::<f64>() / n;
    if y == 0.0 {
        return Ok(1.0 - pred.iter().sum::<f64>() / n);
    }
    if y == 1.0 {
        return Ok(pred.iter().sum::<f64>() / n);
    }
    let pairs = || pred.iter().zip(gt.iter());
    let fg = object_score(pairs().filter(|(_, &g)| g == 1.0).map(|(&p, _)| p));
    let bg = object_score(pairs().filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p));
    let object = y * fg + (1.0 - y) * bg;

    let (x, yc) = region_split(&gt, h, w);
    let area = n;
    let w1 = (x * yc) as f64 / area;
    let w2 = (yc * (w - x)) as f64 / area;
    let w3 = ((h - yc) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * block_ssim(pred, &gt, w, (0, yc), (0, x))
        + w2 * block_ssim(pred, &gt, w, (0, yc), (x, w))
        + w3 * block_ssim(pred, &gt, w, (yc, h), (0, x))
        + w4 * block_ssim(pred, &gt, w, (yc, h), (x, w));
    Ok((alpha * object + (1.0 - alpha) * region).max(0.0))
}

/// Every per-image quantity needed for dataset aggregation.
#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub mae: f64,
    pub s_measure: f64,
    pub e: Curve,
    pub f: FMeasure,
}

pub fn evaluate_image(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<ImageMetrics> {
    let conf = Confusion::new(pred, gt)?;
    Ok(ImageMetrics {
        mae: mae(pred, gt)?,
        s_measure: s_measure(pred, gt, h, w, S_ALPHA)?,
        e: e_measure_from(&conf),
        f: f_measure_from(&conf, BETA2),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub images: usize,
    pub s_m: f64,
    pub e_m: f64,
    pub e_m_max: f64,
    pub f_m: f64,
    pub f_m_max: f64,
    pub mae: f64,
    /// `(precision, recall)` per threshold.
    pub pr_curve: Vec<(f64, f64)>,
    pub fm_curve: Vec<f64>,
    pub em_curve: Vec<f64>,
}

/// Averages per-image scores and curves in input order.
pub fn aggregate(items: &[ImageMetrics]) -> Result<EvalRecord> {
    if items.is_empty() {
        return Err(VcpError::InvalidInput("no images to aggregate".into()));
    }
    let n = items.len() as f64;
    let mut fm = vec![0.0; THRESHOLDS];
    let mut em = vec![0.0; THRESHOLDS];
    let mut pr = vec![(0.0, 0.0); THRESHOLDS];
    let (mut s, mut m) = (0.0, 0.0);
    for it in items {
        s += it.s_measure;
        m += it.mae;
        for t in 0..THRESHOLDS {
            fm[t] += it.f.curve.values[t];
            em[t] += it.e.values[t];
            pr[t].0 += it.f.precision[t];
            pr[t].1 += it.f.recall[t];
        }
    }
    for t in 0..THRESHOLDS {
        fm[t] /= n;
        em[t] /= n;
        pr[t].0 /= n;
        pr[t].1 /= n;
    }
    let f = Curve::from_values(fm);
    let e = Curve::from_values(em);
    Ok(EvalRecord {
        images: items.len(),
        s_m: s / n,
        e_m: e.mean,
        e_m_max: e.max,
        f_m: f.mean,
        f_m_max: f.max,
        mae: m / n,
        pr_curve: pr,
        fm_curve: f.values,
        em_curve: e.values,
    })
}
