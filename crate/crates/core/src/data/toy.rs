use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VcpError};

/// Shape classes in group order. Each class has its own base hue.
pub const SHAPES: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub groups: usize,
    pub images_per_group: usize,
    pub size: usize,
    pub distractors: bool,
    /// Index of the first group; lets a second call produce unseen groups.
    pub first_group: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            groups: 6,
            images_per_group: 12,
            size: 96,
            distractors: true,
            first_group: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn inside(class: usize, pose: &Pose, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - pose.cx, y - pose.cy);
    let (s, c) = pose.angle.sin_cos();
    let u = (c * dx + s * dy) / pose.radius;
    let v = (-s * dx + c * dy) / pose.radius;
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.75 && v.abs() <= 0.75,
        2 => (0..3).all(|k| {
            let t = 2.0 * PI * k as f64 / 3.0;
            u * t.cos() + v * t.sin() <= 0.5
        }),
        3 => (u.abs() <= 1.0 && v.abs() <= 0.33) || (u.abs() <= 0.33 && v.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        _ => u.abs() <= 1.0 && v.abs() <= 0.3,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn class_hue<R: Rng>(class: usize, rng: &mut R) -> f64 {
    360.0 * class as f64 / SHAPES.len() as f64 + rng.random_range(-12.0..12.0)
}

/// Saturated colour of the group's object.
fn target_colour<R: Rng>(class: usize, rng: &mut R) -> [u8; 3] {
    let hue = class_hue(class, rng);
    hsv_to_rgb(hue, rng.random_range(0.7..0.95), rng.random_range(0.8..1.0))
}

/// Dim, moderately saturated colour of a distractor.
fn distractor_colour<R: Rng>(class: usize, rng: &mut R) -> [u8; 3] {
    let hue = class_hue(class, rng);
    hsv_to_rgb(hue, rng.random_range(0.3..0.6), rng.random_range(0.4..0.55))
}

/// One rendered image with its mask.
pub struct ToySample {
    pub image: RgbImage,
    pub mask: GrayImage,
}

/// Renders one image whose target is `class`, plus 1-2 smaller, dim
/// distractors of other classes drawn underneath it.
pub fn render_sample<R: Rng>(class: usize, size: usize, distractors: bool, rng: &mut R) -> ToySample {
    let s = size as f64;
    let mut image = RgbImage::new(size as u32, size as u32);
    let base: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(20.0..90.0));
    let tilt = (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
    for (x, y, px) in image.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
        let shade = tilt.0 * fx + tilt.1 * fy;
        *px = Rgb(base.map(|b| (b + shade + rng.random_range(-8.0..8.0)).clamp(0.0, 255.0) as u8));
    }
    let pose = |rng: &mut R, scale: (f64, f64)| Pose {
        cx: rng.random_range(0.25 * s..0.75 * s),
        cy: rng.random_range(0.25 * s..0.75 * s),
        radius: rng.random_range(scale.0 * s..scale.1 * s),
        angle: rng.random_range(0.0..2.0 * PI),
    };
    let target = pose(rng, (0.14, 0.2));
    let mut shapes = Vec::new();
    if distractors {
        let count = rng.random_range(1..=2);
        for _ in 0..count {
            let other = (class + rng.random_range(1..SHAPES.len())) % SHAPES.len();
            let mut p = pose(rng, (0.09, 0.14));
            for _ in 0..32 {
                let d = ((p.cx - target.cx).powi(2) + (p.cy - target.cy).powi(2)).sqrt();
                if d > p.radius + target.radius {
                    break;
                }
                p = pose(rng, (0.09, 0.14));
            }
            shapes.push((other, p, distractor_colour(other, rng)));
        }
    }
    shapes.push((class, target, target_colour(class, rng)));
    let mut mask = GrayImage::new(size as u32, size as u32);
    for (k, (cls, p, colour)) in shapes.iter().enumerate() {
        let is_target = k + 1 == shapes.len();
        for y in 0..size {
            for x in 0..size {
                if inside(*cls, p, x as f64 + 0.5, y as f64 + 0.5) {
                    image.put_pixel(x as u32, y as u32, Rgb(*colour));
                    if is_target {
                        mask.put_pixel(x as u32, y as u32, Luma([255]));
                    }
                }
            }
        }
    }
    ToySample { image, mask }
}

/// Writes `<out>/images/<group>/<stem>.png` and `<out>/gt/<group>/<stem>.png`.
///
/// Group `g` holds shape class `g mod 6`; its name is the class name, suffixed
/// with the group index from the second cycle on.
pub fn synthesize_toy_dataset(out: &Path, cfg: &ToyConfig) -> Result<()> {
    if cfg.size < 64 {
        return Err(VcpError::InvalidInput(format!("toy canvas {} is below 64", cfg.size)));
    }
    for g in cfg.first_group..cfg.first_group + cfg.groups {
        let class = g % SHAPES.len();
        let name = if g < SHAPES.len() {
            SHAPES[class].to_string()
        } else {
            format!("{}_{g}", SHAPES[class])
        };
        let img_dir = out.join("images").join(&name);
        let gt_dir = out.join("gt").join(&name);
        std::fs::create_dir_all(&img_dir)?;
        std::fs::create_dir_all(&gt_dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ g as u64);
        for i in 0..cfg.images_per_group {
            let sample = render_sample(class, cfg.size, cfg.distractors, &mut rng);
            let stem = format!("{name}_{i:03}");
            sample.image.save(img_dir.join(format!("{stem}.png")))?;
            sample.mask.save(gt_dir.join(format!("{stem}.png")))?;
        }
    }
    Ok(())
}
