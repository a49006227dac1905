//! Synthetic datasets with known ground truth and controlled label noise.
//!
//! Ground truth is blob-shaped and constant on every cell of a regular
//! superpixel grid, so each superpixel is single-class. Images draw each
//! pixel from a class color plus Gaussian noise. Pseudo labels equal the
//! ground truth except on a fraction of superpixels, which get a wrong class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, ImageData};
use crate::model::{LabelMap, LabelRole, ResidualPolicy, SuperpixelPartition};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub images: usize,
    pub height: u32,
    pub width: u32,
    pub classes: usize,
    /// Fraction of superpixels whose pseudo label is wrong.
    pub noise: f64,
    /// Superpixels per side; each image has `grid * grid` cells.
    pub grid: u32,
    pub seed: u64,
    /// Per-channel color noise (std-dev on the [0, 1] scale).
    pub color_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 10,
            height: 64,
            width: 64,
            classes: 4,
            noise: 0.4,
            grid: 8,
            seed: 7,
            color_noise: 0.04,
        }
    }
}

impl SynthSpec {
    fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.images == 0 || self.height == 0 || self.width == 0 || self.grid == 0 {
            return bad("images, height, width and grid must be at least 1");
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return bad("classes must lie in 2..=65535");
        }
        if self.grid > self.height || self.grid > self.width {
            return bad("grid cannot exceed the image size");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        if !(self.color_noise >= 0.0 && self.color_noise.is_finite()) {
            return bad("color_noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// Distinct class colors; cube corners first, then a hue wheel.
pub fn palette(class: usize, num_classes: usize) -> [f64; 3] {
    const CORNERS: [[f64; 3]; 8] = [
        [0.85, 0.15, 0.15],
        [0.15, 0.15, 0.85],
        [0.15, 0.85, 0.15],
        [0.85, 0.85, 0.15],
        [0.85, 0.15, 0.85],
        [0.15, 0.85, 0.85],
        [0.15, 0.15, 0.15],
        [0.85, 0.85, 0.85],
    ];
    if num_classes <= CORNERS.len() {
        return CORNERS[class];
    }
    let h = class as f64 / num_classes as f64 * 6.0;
    let v = if class.is_multiple_of(2) { 0.9 } else { 0.55 };
    let x = v * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (v, x, 0.0),
        1 => (x, v, 0.0),
        2 => (0.0, v, x),
        3 => (0.0, x, v),
        4 => (x, 0.0, v),
        _ => (v, 0.0, x),
    };
    [r, g, b]
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.grid as usize;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let cell_of = |x: usize, y: usize| (y * g / h) * g + x * g / w;
    let normal = Normal::new(0.0, spec.color_noise).expect("checked finite");

    // per-image cell classes
    let mut cell_classes: Vec<Vec<u16>> = Vec::with_capacity(spec.images);
    for _ in 0..spec.images {
        let blobs = 2 + rng.gen_range(0..=spec.classes.min(4));
        let seeds: Vec<(f64, f64, u16)> = (0..blobs)
            .map(|_| {
                (
                    rng.gen_range(0.0..g as f64),
                    rng.gen_range(0.0..g as f64),
                    rng.gen_range(0..spec.classes) as u16,
                )
            })
            .collect();
        let cells = (0..g * g)
            .map(|cell| {
                let (cx, cy) = ((cell % g) as f64 + 0.5, (cell / g) as f64 + 0.5);
                let mut best = (f64::INFINITY, 0u16);
                for &(sx, sy, class) in &seeds {
                    let d = (sx - cx).powi(2) + (sy - cy).powi(2);
                    if d < best.0 {
                        best = (d, class);
                    }
                }
                best.1
            })
            .collect();
        cell_classes.push(cells);
    }

    // pick noisy superpixels over the whole dataset
    let mut keys: Vec<(usize, usize)> = (0..spec.images).flat_map(|i| (0..g * g).map(move |c| (i, c))).collect();
    keys.shuffle(&mut rng);
    let n_noisy = (spec.noise * keys.len() as f64).round() as usize;
    let mut pseudo_cells = cell_classes.clone();
    for &(img, cell) in &keys[..n_noisy] {
        let truth = cell_classes[img][cell];
        let mut wrong = rng.gen_range(0..spec.classes - 1) as u16;
        if wrong >= truth {
            wrong += 1;
        }
        pseudo_cells[img][cell] = wrong;
    }

    let mut images = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let id = format!("img_{i:03}");
        let n = w * h;
        let mut rgb = Vec::with_capacity(3 * n);
        let mut gt = Vec::with_capacity(n);
        let mut pseudo = Vec::with_capacity(n);
        let mut sp = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let cell = cell_of(x, y);
                let class = cell_classes[i][cell];
                let color = palette(class as usize, spec.classes);
                for ch in color {
                    let v = (ch + normal.sample(&mut rng)).clamp(0.0, 1.0);
                    rgb.push((v * 255.0).round() as u8);
                }
                gt.push(class);
                pseudo.push(pseudo_cells[i][cell]);
                sp.push(cell as u32);
            }
        }
        let (wu, hu) = (spec.width, spec.height);
        images.push(ImageData {
            image_id: id.clone(),
            width: wu,
            height: hu,
            rgb,
            gt: Some(LabelMap::new(&id, LabelRole::GroundTruth, wu, hu, gt).expect("sized")),
            pseudo: LabelMap::new(&id, LabelRole::Pseudo, wu, hu, pseudo).expect("sized"),
            partition: SuperpixelPartition::new(&id, wu, hu, sp.clone(), ResidualPolicy::Components).expect("sized"),
            raw_superpixels: sp,
            probs: None,
        });
    }
    Ok(Dataset {
        class_names: (0..spec.classes).map(|c| format!("class_{c}")).collect(),
        ignore: None,
        images,
    })
}
