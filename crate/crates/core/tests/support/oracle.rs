//! Scalar-loop reference implementations. Nothing here calls into the tensor
//! code paths under test; parameters are only read out of the modules.

use std::f64::consts::PI;

use vcp_core::config::{Fusion, MlpSharing};
use vcp_core::cpd::StageDisperser;
use vcp_core::cpg::StageCpg;
use vcp_core::ops::{Conv2d, Linear};

use super::values;

pub type Mat = Vec<Vec<f64>>;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn l2n(x: &[f64]) -> Vec<f64> {
    let norm = (x.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
    x.iter().map(|v| v / norm).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense layer read out of a module.
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn of(l: &Linear) -> Self {
        let (out, inp) = l.weight.dims2().unwrap();
        let flat = values(&l.weight);
        let w = (0..out).map(|o| flat[o * inp..(o + 1) * inp].to_vec()).collect();
        let b = l.bias.as_ref().map(values).unwrap_or_else(|| vec![0.0; out]);
        Self { w, b }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.w[0].len());
        self.w.iter().zip(&self.b).map(|(row, b)| dot(row, x) + b).collect()
    }
}

/// Direct zero-padded stride-1 convolution of `[C][H*W]` planes.
pub fn conv_same(planes: &[Vec<f64>], h: usize, w: usize, conv: &Conv2d) -> Vec<Vec<f64>> {
    let s = &conv.spec;
    let (k, p) = (s.kernel, s.padding);
    let wt = values(&conv.weight);
    let bias = conv.bias.as_ref().map(values).unwrap_or_else(|| vec![0.0; s.out_channels]);
    let at = |o: usize, c: usize, a: usize, b: usize| wt[((o * s.in_channels + c) * k + a) * k + b];
    (0..s.out_channels)
        .map(|o| {
            let mut out = vec![bias[o]; h * w];
            for y in 0..h {
                for x in 0..w {
                    for (c, plane) in planes.iter().enumerate() {
                        for a in 0..k {
                            for b in 0..k {
                                let (yy, xx) = (y as isize + a as isize - p as isize, x as isize + b as isize - p as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    out[y * w + x] += at(o, c, a, b) * plane[yy as usize * w + xx as usize];
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Every intermediate of one stage's consensus prompt generator.
pub struct CpgTrace {
    /// `[n][l][c_r]`
    pub p_em: Vec<Mat>,
    /// `[n][j][l]`
    pub s_soft: Vec<Mat>,
    /// `[n][l]`
    pub logits: Mat,
    pub map: Mat,
    pub query: Vec<f64>,
    pub indices: Vec<usize>,
    /// `[n][l][k]`
    pub correlation: Vec<Mat>,
    /// `[n][l][c_s]`
    pub features: Vec<Mat>,
    /// `[n][l]`
    pub attention: Mat,
    /// `[n][l][c_r]`
    pub prompt: Vec<Mat>,
}

/// Rows sorted by descending score, lower index first on ties; first `k` kept.
pub fn brute_top_k(score: &[f64], k: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; score.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..score.len() {
            if used[i] {
                continue;
            }
            best = match best {
                Some(b) if score[b] >= score[i] => Some(b),
                _ => Some(i),
            };
        }
        let b = best.unwrap();
        used[b] = true;
        chosen.push(b);
    }
    chosen
}

/// Runs the generator on `tokens[n][l][c_s]` for an `h x w` stage.
pub fn cpg(m: &StageCpg, tokens: &[Mat], h: usize, w: usize) -> CpgTrace {
    let n = tokens.len();
    let l = h * w;
    let (c, j) = (m.reduced, m.num_seeds);
    let embed = Dense::of(&m.embed);
    let assign = Dense::of(&m.assign);
    let fc1 = Dense::of(&m.seed_fc1);
    let fc2 = Dense::of(&m.seed_fc2);
    let sal = Dense::of(&m.saliency);
    let lift1 = Dense::of(&m.lift1);
    let lift2 = Dense::of(&m.lift2);
    let fuse = Dense::of(&m.fuse);
    let seeds_flat = values(&m.seeds);
    let seed = |a: usize, b: usize| seeds_flat[a * c + b];

    let p_em: Vec<Mat> = tokens.iter().map(|img| img.iter().map(|t| embed.apply(t)).collect()).collect();

    let mut s_soft = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    let mut map = Vec::with_capacity(n);
    for img in &p_em {
        let mut s = vec![vec![0.0; l]; j];
        for (li, x) in img.iter().enumerate() {
            let a = assign.apply(&l2n(x));
            let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a.iter().map(|v| (v - mx).exp()).sum();
            for jj in 0..j {
                s[jj][li] = (a[jj] - mx).exp() / z;
            }
        }
        let mut desc = Vec::with_capacity(j * c);
        for jj in 0..j {
            let mut u = vec![0.0; c];
            for (li, x) in img.iter().enumerate() {
                for cc in 0..c {
                    u[cc] += s[jj][li] * (x[cc] - seed(jj, cc));
                }
            }
            desc.extend(l2n(&u));
        }
        let desc = l2n(&desc);
        let g = fc2.apply(&fc1.apply(&desc).into_iter().map(gelu).collect::<Vec<_>>());
        let mut lg = Vec::with_capacity(l);
        for x in img {
            let joint: Vec<f64> = x.iter().chain(g.iter()).cloned().collect();
            lg.push(sal.apply(&joint)[0]);
        }
        map.push(lg.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>());
        logits.push(lg);
        s_soft.push(s);
    }

    let mut query = vec![0.0; c];
    for (img, m_s) in p_em.iter().zip(&map) {
        for (x, &mv) in img.iter().zip(m_s) {
            for cc in 0..c {
                query[cc] += x[cc] * mv / (l as f64 * n as f64);
            }
        }
    }
    let rows: Mat = p_em.iter().flat_map(|img| img.iter().cloned()).collect();
    let score: Vec<f64> = rows.iter().map(|r| dot(r, &query)).collect();
    let indices = brute_top_k(&score, m.top_k);
    let rep: Mat = indices.iter().map(|&i| rows[i].clone()).collect();

    let mut correlation = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    let mut prompt = Vec::with_capacity(n);
    for img in &p_em {
        let corr: Mat = img
            .iter()
            .map(|x| {
                let xn = l2n(x);
                rep.iter().map(|r| dot(&xn, r)).collect()
            })
            .collect();
        let feat: Mat = corr
            .iter()
            .map(|v| lift2.apply(&lift1.apply(v).into_iter().map(gelu).collect::<Vec<_>>()))
            .collect();
        let avg: Vec<f64> = feat.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect();
        let max: Vec<f64> = feat.iter().map(|f| f.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let att: Vec<f64> = conv_same(&[avg, max], h, w, &m.spatial)[0].iter().map(|&v| sigmoid(v)).collect();
        let pr: Mat = feat
            .iter()
            .zip(&att)
            .map(|(f, &a)| fuse.apply(&f.iter().map(|v| v * a).collect::<Vec<_>>()))
            .collect();
        correlation.push(corr);
        features.push(feat);
        attention.push(att);
        prompt.push(pr);
    }
    CpgTrace {
        p_em,
        s_soft,
        logits,
        map,
        query,
        indices,
        correlation,
        features,
        attention,
        prompt,
    }
}

/// Visual consensus prompt for one token.
pub fn fuse(p_em: &[f64], p_hand: &[f64], p_co: &[f64], fusion: Fusion) -> Vec<f64> {
    let a: Vec<f64> = p_em.iter().zip(p_co).map(|(x, y)| x + y).collect();
    let b: Vec<f64> = p_hand.iter().zip(p_co).map(|(x, y)| x + y).collect();
    match fusion {
        Fusion::Concat => a.into_iter().chain(b).collect(),
        Fusion::Add => a.iter().zip(&b).map(|(x, y)| x + y).collect(),
    }
}

/// Layer-`n` prompt for one token.
pub fn disperse(d: &StageDisperser, v: &[f64], n: usize) -> Vec<f64> {
    let (down_i, up_i) = match d.sharing {
        MlpSharing::Adaptive => (n, 0),
        MlpSharing::Share => (0, 0),
        MlpSharing::Unshare => (n, n),
    };
    let hidden: Vec<f64> = Dense::of(&d.down[down_i]).apply(v).into_iter().map(gelu).collect();
    Dense::of(&d.up[up_i]).apply(&hidden)
}

/// High-frequency image by explicit O(n^4) DFT, shifted-spectrum square mask
/// and inverse DFT.
pub fn high_frequency(img: &[f64], h: usize, w: usize, tau: f64) -> Vec<f64> {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for a in 0..h {
                for b in 0..w {
                    let ang = -2.0 * PI * ((u * a) as f64 / h as f64 + (v * b) as f64 / w as f64);
                    re[u * w + v] += img[a * w + b] * ang.cos();
                    im[u * w + v] += img[a * w + b] * ang.sin();
                }
            }
        }
    }
    // Shifted layout: frequency u sits at row (u + h/2) mod h.
    let line = (((h * w) as f64 * tau).sqrt() / 2.0).floor() as usize;
    let (ch, cw) = (h / 2, w / 2);
    for u in 0..h {
        for v in 0..w {
            let (su, sv) = ((u + ch) % h, (v + cw) % w);
            let rows = su + line >= ch && su < ch + line;
            let cols = sv + line >= cw && sv < cw + line;
            if rows && cols {
                re[u * w + v] = 0.0;
                im[u * w + v] = 0.0;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for a in 0..h {
        for b in 0..w {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let ang = 2.0 * PI * ((u * a) as f64 / h as f64 + (v * b) as f64 / w as f64);
                    acc += re[u * w + v] * ang.cos() - im[u * w + v] * ang.sin();
                }
            }
            out[a * w + b] = acc / (h * w) as f64;
        }
    }
    out
}

/// BCE + soft IoU for each image of a batch of equally sized maps, averaged.
pub fn map_loss(logits: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
    let pixels: usize = logits.iter().map(|l| l.len()).sum();
    let mut bce = 0.0;
    let mut iou = 0.0;
    for (lg, g) in logits.iter().zip(gt) {
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (&x, &y) in lg.iter().zip(g) {
            let p = sigmoid(x);
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            inter += p * y;
            sp += p;
            sg += y;
        }
        iou += 1.0 - (inter + 1e-6) / (sp + sg - inter + 1e-6);
    }
    bce / pixels as f64 + iou / logits.len() as f64
}

pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

/// `(precision, recall, f)` at every threshold `t`, counting `255 * p > t`.
pub fn f_curve(pred: &[f64], gt: &[f64]) -> Vec<(f64, f64, f64)> {
    (0..256)
        .map(|t| {
            let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
            for i in 0..pred.len() {
                let fg = pred[i] * 255.0 > t as f64;
                if fg {
                    pp += 1.0;
                }
                if gt[i] > 0.5 {
                    gp += 1.0;
                    if fg {
                        tp += 1.0;
                    }
                }
            }
            let p = if pp > 0.0 { tp / pp } else { 0.0 };
            let r = if gp > 0.0 { tp / gp } else { 0.0 };
            let f = if p + r > 0.0 { 1.3 * p * r / (0.3 * p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect()
}

/// Enhanced-alignment score at every threshold, evaluated pixel by pixel.
pub fn e_curve(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let eps = f64::EPSILON;
    let n = pred.len() as f64;
    let g: Vec<f64> = gt.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let gsum: f64 = g.iter().sum();
    (0..256)
        .map(|t| {
            let fm: Vec<f64> = pred.iter().map(|&p| if p * 255.0 > t as f64 { 1.0 } else { 0.0 }).collect();
            let psum: f64 = fm.iter().sum();
            if gsum == 0.0 {
                return 1.0 - psum / n;
            }
            if gsum == n {
                return psum / n;
            }
            let mp = psum / n;
            let mg = gsum / n;
            let mut total = 0.0;
            for i in 0..pred.len() {
                let a = fm[i] - mp;
                let b = g[i] - mg;
                let align = 2.0 * a * b / (a * a + b * b + eps);
                total += (align + 1.0).powi(2) / 4.0;
            }
            total / n
        })
        .collect()
}

fn ssim(x: &[f64], y: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let d = if n > 1 { nf - 1.0 } else { 1.0 };
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / d;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / d;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / d;
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + eps)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

/// Structure measure with alpha = 0.5, laid out as in the reference
/// pseudocode: object term on fg/bg, region term on four centroid quadrants.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let g: Vec<f64> = gt.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let n = (h * w) as f64;
    let y = g.iter().sum::<f64>() / n;
    if y == 0.0 {
        return 1.0 - pred.iter().sum::<f64>() / n;
    }
    if y == 1.0 {
        return pred.iter().sum::<f64>() / n;
    }
    let fg: Vec<f64> = (0..pred.len()).filter(|&i| g[i] == 1.0).map(|i| pred[i]).collect();
    let bg: Vec<f64> = (0..pred.len()).filter(|&i| g[i] == 0.0).map(|i| 1.0 - pred[i]).collect();
    let object = y * s_object(&fg) + (1.0 - y) * s_object(&bg);

    let (mut cnt, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if g[r * w + c] == 1.0 {
                cnt += 1.0;
                sx += c as f64;
                sy += r as f64;
            }
        }
    }
    let cx = ((sx / cnt).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / cnt).round_ties_even() as usize + 1).min(h);
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut p = Vec::new();
        let mut q = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[r * w + c]);
                q.push(g[r * w + c]);
            }
        }
        (p, q)
    };
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut region = 0.0;
    for (r0, r1, c0, c1) in quads {
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / n;
        let (p, q) = block(r0, r1, c0, c1);
        region += weight * ssim(&p, &q);
    }
    (0.5 * object + 0.5 * region).max(0.0)
}
