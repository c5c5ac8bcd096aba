//! Synthetic shape segmentation dataset.
//!
//! Each image has a noisy grey background and 1-4 shapes painted in order
//! (later shapes occlude earlier ones). Shape sizes span a 4x range in
//! length, so object areas vary by roughly 16x. The ring is the rare,
//! finely structured class.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{LabelMap, Manifest, ManifestEntry};
use crate::error::{config_err, Result};
use crate::pnm::Pnm;

pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "disk", "square", "triangle", "ring", "stripe"];
pub const BACKGROUND: u8 = 0;
pub const DISK: u8 = 1;
pub const SQUARE: u8 = 2;
pub const TRIANGLE: u8 = 3;
pub const RING: u8 = 4;
pub const STRIPE: u8 = 5;

const BACKGROUND_COLOR: [f64; 3] = [0.5, 0.5, 0.5];
const SHAPE_COLORS: [[f64; 3]; 5] =
    [[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.3, 0.85], [0.9, 0.8, 0.2], [0.7, 0.25, 0.75]];
const COLOR_JITTER: f64 = 0.06;
/// Characteristic shape length range in pixels at image size 65.
const MIN_LEN: f64 = 16.0;
const MAX_LEN: f64 = 64.0;
const RING_THICKNESS: (f64, f64) = (6.0, 10.0);
const STRIPE_HALF_WIDTH: (f64, f64) = (4.0, 8.0);
const PIXEL_NOISE: f64 = 0.04;

/// Relative frequency with which each shape class (disk, square, triangle,
/// ring, stripe) is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMenu {
    pub weights: [f64; 5],
}

impl Default for ClassMenu {
    fn default() -> Self {
        ClassMenu { weights: [1.0, 1.0, 1.0, 0.4, 1.0] }
    }
}

impl ClassMenu {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        let total: f64 = self.weights.iter().sum();
        let mut t = rng.random::<f64>() * total;
        for (i, w) in self.weights.iter().enumerate() {
            if t < *w {
                return i as u8 + 1;
            }
            t -= w;
        }
        STRIPE
    }
}

enum Shape {
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    /// Rotated square: `half` is half the side length.
    Square {
        cx: f64,
        cy: f64,
        half: f64,
        cos: f64,
        sin: f64,
    },
    Triangle {
        v: [[f64; 2]; 3],
    },
    Ring {
        cx: f64,
        cy: f64,
        inner: f64,
        outer: f64,
    },
    /// Infinite band of the given half width through (cx, cy) with unit normal n.
    Stripe {
        cx: f64,
        cy: f64,
        nx: f64,
        ny: f64,
        half: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= half && (-dx * sin + dy * cos).abs() <= half
            }
            Shape::Triangle { v } => {
                let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Ring { cx, cy, inner, outer } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 >= inner * inner && d2 <= outer * outer
            }
            Shape::Stripe { cx, cy, nx, ny, half } => ((x - cx) * nx + (y - cy) * ny).abs() <= half,
        }
    }

    fn random<R: Rng + ?Sized>(class: u8, size: usize, rng: &mut R) -> Shape {
        let s = size as f64;
        let (cx, cy) = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
        let len = s / 65.0 * MIN_LEN * (MAX_LEN / MIN_LEN).powf(rng.random::<f64>());
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        match class {
            DISK => Shape::Disk { cx, cy, r: len / 2.0 },
            SQUARE => Shape::Square { cx, cy, half: 0.4 * len, cos: theta.cos(), sin: theta.sin() },
            TRIANGLE => {
                let r = 0.55 * len;
                let v = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = theta + k * std::f64::consts::TAU / 3.0;
                    [cx + r * a.cos(), cy + r * a.sin()]
                });
                Shape::Triangle { v }
            }
            RING => {
                let outer = (len / 2.0).max(RING_THICKNESS.1 + 2.0);
                let thickness = rng.random_range(RING_THICKNESS.0..RING_THICKNESS.1);
                Shape::Ring { cx, cy, inner: outer - thickness, outer }
            }
            _ => {
                let half = rng.random_range(STRIPE_HALF_WIDTH.0..STRIPE_HALF_WIDTH.1);
                Shape::Stripe { cx, cy, nx: theta.cos(), ny: theta.sin(), half }
            }
        }
    }
}

/// One image (RGB raster) and its exact label map.
pub fn generate_sample<R: Rng + ?Sized>(size: usize, menu: &ClassMenu, rng: &mut R) -> (Pnm, LabelMap) {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let mut label = LabelMap::filled(size, size, BACKGROUND);
    let bg = BACKGROUND_COLOR.map(|c| c + rng.random_range(-COLOR_JITTER..COLOR_JITTER));
    let mut color = vec![bg; size * size];
    let count = rng.random_range(1..=4);
    for _ in 0..count {
        let class = menu.draw(rng);
        let shape = Shape::random(class, size, rng);
        let base = SHAPE_COLORS[class as usize - 1].map(|c| c + rng.random_range(-COLOR_JITTER..COLOR_JITTER));
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64, y as f64) {
                    label.set(y, x, class);
                    color[y * size + x] = base;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for px in &color {
        for c in px {
            let v = (c + noise.sample(rng)).clamp(0.0, 1.0);
            data.push((v * 255.0).round() as u8);
        }
    }
    (Pnm { width: size, height: size, channels: 3, data }, label)
}

/// Generates `count` samples from a single stream seeded with `seed`.
pub fn generate(seed: u64, count: usize, size: usize, menu: &ClassMenu) -> Vec<(Pnm, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_sample(size, menu, &mut rng)).collect()
}

/// Number of training samples in the deterministic 80/20 split.
pub fn train_split(count: usize) -> usize {
    count * 4 / 5
}

#[derive(Debug)]
pub struct GeneratedDataset {
    pub all: Manifest,
    pub train: Manifest,
    pub val: Manifest,
}

/// Writes `images/NNNNN.ppm`, `labels/NNNNN.pgm` and the manifests
/// `all.txt`, `train.txt` (first 80%) and `val.txt` under `out`.
pub fn write_dataset(out: &Path, seed: u64, count: usize, size: usize, menu: &ClassMenu) -> Result<GeneratedDataset> {
    if size == 0 {
        return config_err("image size must be positive");
    }
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("labels"))?;
    let mut entries = Vec::with_capacity(count);
    for (i, (image, label)) in generate(seed, count, size, menu).into_iter().enumerate() {
        let image_rel = format!("images/{i:05}.ppm");
        let label_rel = format!("labels/{i:05}.pgm");
        image.write(out.join(&image_rel))?;
        label.to_pnm().write(out.join(&label_rel))?;
        entries.push(ManifestEntry {
            image: image_rel.into(),
            label: label_rel.into(),
            classes: label.present_classes(),
        });
    }
    let split = train_split(count);
    let manifest = |entries: &[ManifestEntry]| Manifest { root: out.to_path_buf(), entries: entries.to_vec() };
    let ds = GeneratedDataset {
        train: manifest(&entries[..split]),
        val: manifest(&entries[split..]),
        all: manifest(&entries),
    };
    ds.all.save(out.join("all.txt"))?;
    ds.train.save(out.join("train.txt"))?;
    ds.val.save(out.join("val.txt"))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let menu = ClassMenu::default();
        assert_eq!(generate(3, 4, 33, &menu), generate(3, 4, 33, &menu));
        assert_ne!(generate(3, 4, 33, &menu), generate(4, 4, 33, &menu));
        assert!(generate(3, 0, 33, &menu).is_empty());
    }

    #[test]
    fn shape_colors_separate_from_background() {
        let (image, label) = generate(11, 1, 65, &ClassMenu::default()).pop().unwrap();
        for (i, &l) in label.data.iter().enumerate() {
            let px = &image.data[i * 3..i * 3 + 3];
            let dist: f64 = px.iter().zip(BACKGROUND_COLOR).map(|(&p, b)| (p as f64 / 255.0 - b).powi(2)).sum();
            if l == BACKGROUND {
                assert!(dist.sqrt() < 0.1 + 5.0 * PIXEL_NOISE);
            }
        }
    }

    #[test]
    fn split_is_floor_of_eighty_percent() {
        assert_eq!(train_split(500), 400);
        assert_eq!(train_split(7), 5);
        assert_eq!(train_split(0), 0);
    }
}
