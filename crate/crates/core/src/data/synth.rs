//! Seeded synthetic shapes dataset.
//!
//! Each image is a noisy grey background with a few coloured, textured
//! shapes. A class is one (colour, shape, texture) combination, and all
//! shapes of a given size parameter cover the same area so that pixel
//! frequency follows appearance frequency. Later shapes occlude earlier ones.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{image_from_bytes, write_dataset, Dataset, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::scenario::ClassSet;
use crate::segnet::DOWNSAMPLE;

const COLOURS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.15]),
    ("magenta", [0.85, 0.2, 0.8]),
    ("cyan", [0.15, 0.8, 0.85]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.5, 0.2, 0.7]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

const SHAPES: [(&str, ShapeKind); 6] = [
    ("circle", ShapeKind::Circle),
    ("square", ShapeKind::Square),
    ("triangle", ShapeKind::Triangle),
    ("diamond", ShapeKind::Diamond),
    ("ring", ShapeKind::Ring),
    ("cross", ShapeKind::Cross),
];

/// Distinct classes before (colour, shape) pairs repeat.
pub const MAX_CLASSES: usize = 25;

const MAX_ATTEMPTS: u64 = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Including background.
    pub num_classes: usize,
    pub images: usize,
    /// Height and width.
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
    /// Class `c` appears with weight `skew^(c-1)`.
    pub skew: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 6,
            images: 500,
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
            seed: 7,
            skew: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(3..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Param(format!(
                "classes must be in 3..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.size < 2 * DOWNSAMPLE || !self.size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Param(format!(
                "size must be a multiple of {DOWNSAMPLE} and at least {}, got {}",
                2 * DOWNSAMPLE,
                self.size
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Param(format!(
                "shapes per image {}..={} is empty or zero",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(self.skew > 0.0 && self.skew <= 1.0) {
            return Err(Error::Param(format!("skew must be in (0, 1], got {}", self.skew)));
        }
        Ok(())
    }
}

/// `background` followed by `<colour>-<shape>` names.
pub fn class_names(num_classes: usize) -> Vec<String> {
    let mut names = vec!["background".to_string()];
    names.extend(
        (0..num_classes.saturating_sub(1))
            .map(|i| format!("{}-{}", COLOURS[i % COLOURS.len()].0, SHAPES[i % SHAPES.len()].0)),
    );
    names
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u8,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Radius of the circle with the same area.
    r: f64,
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let r = self.r;
        let pi = std::f64::consts::PI;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => {
                let a = r * pi.sqrt() / 2.0;
                dx.abs() <= a && dy.abs() <= a
            }
            ShapeKind::Triangle => {
                // Point-up equilateral triangle, circumradius `big`.
                let big = r * (4.0 * pi / (3.0 * 3f64.sqrt())).sqrt();
                dy <= big / 2.0 && dx.abs() * 3f64.sqrt() <= dy + big
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r * (pi / 2.0).sqrt(),
            ShapeKind::Ring => {
                let outer = r * 2.0 / 3f64.sqrt();
                let d2 = dx * dx + dy * dy;
                d2 <= outer * outer && d2 >= outer * outer / 4.0
            }
            ShapeKind::Cross => {
                let len = r * (9.0 * pi / 20.0).sqrt();
                let w = len / 3.0;
                (dx.abs() <= len && dy.abs() <= w) || (dx.abs() <= w && dy.abs() <= len)
            }
        }
    }
}

/// Brightness factor of the class texture at a pixel.
fn texture(idx: usize, x: usize, y: usize) -> f64 {
    let dark = 0.6;
    match (idx / 2) % 4 {
        0 => 1.0,
        1 if (y / 2) % 2 == 1 => dark,
        2 if (x / 2) % 2 == 1 => dark,
        3 if (x / 2 + y / 2) % 2 == 1 => dark,
        _ => 1.0,
    }
}

/// Noise-free colour of class `class ≥ 1` at pixel `(x, y)`.
pub fn class_appearance(class: usize, x: usize, y: usize) -> [f64; 3] {
    let idx = class - 1;
    let t = texture(idx, x, y);
    COLOURS[idx % COLOURS.len()].1.map(|ch| ch * t)
}

/// Maximum per-channel noise added to shape pixels.
pub const SHAPE_NOISE: f64 = 0.06;

fn level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one image and its label map from its own rng stream.
fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, weights: &WeightedIndex<f64>) -> (Vec<u8>, Vec<u8>) {
    let n = spec.size;
    let size = n as f64;
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let idx = weights.sample(rng);
            Shape {
                class: (idx + 1) as u8,
                kind: SHAPES[idx % SHAPES.len()].1,
                cx: rng.gen_range(0.0..size),
                cy: rng.gen_range(0.0..size),
                r: rng.gen_range(0.12 * size..0.22 * size),
            }
        })
        .collect();
    let base = rng.gen_range(0.35..0.65);

    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let top = shapes.iter().rev().find(|s| s.contains(px, py));
            match top {
                Some(s) => {
                    for ch in class_appearance(s.class as usize, x, y) {
                        rgb.push(level(ch + rng.gen_range(-SHAPE_NOISE..SHAPE_NOISE)));
                    }
                    labels.push(s.class);
                }
                None => {
                    for _ in 0..3 {
                        rgb.push(level(base + rng.gen_range(-0.12..0.12)));
                    }
                    labels.push(0);
                }
            }
        }
    }
    (rgb, labels)
}

/// Generates the dataset in memory. Deterministic for a given spec.
///
/// If some class never appears, the whole set is redrawn from a fresh
/// stream, up to a fixed number of attempts.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let names = class_names(spec.num_classes);
    let weights = WeightedIndex::new((1..spec.num_classes).map(|c| spec.skew.powi(c as i32 - 1)))
        .map_err(|e| Error::Param(format!("class weights: {e}")))?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut samples = Vec::with_capacity(spec.images);
        let mut present = ClassSet::new();
        for i in 0..spec.images {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((attempt << 32) | i as u64);
            let (rgb, labels) = render(spec, &mut rng, &weights);
            present = present.union(&ClassSet::from_labels(&labels));
            samples.push(Sample {
                id: format!("img{i:05}"),
                image: image_from_bytes(spec.size, spec.size, &rgb, 255)?,
                labels,
            });
        }
        if spec.images == 0 || present.len() == spec.num_classes {
            return Ok(Dataset { class_names: names, samples });
        }
        log::debug!("attempt {attempt}: only {} of {} classes drawn", present.len(), spec.num_classes);
    }
    Err(Error::Param(format!(
        "{} images never cover all {} classes; use more images or a larger skew",
        spec.images, spec.num_classes
    )))
}

/// Generates the dataset and writes it under `root`.
pub fn generate_to(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    write_dataset(&generate(spec)?, root)
}
