//! Synthetic fixtures with known structure: intensity-aligned region
//! images, a two-palette colorization set, and separated latent clusters.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::image::{ColorFieldLab, GrayImage};

/// Largest chroma change across the image from the linear ramp, per axis.
pub const RAMP: f64 = 20.0;

/// A gray image, its ground-truth chroma and per-pixel region labels.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub gray: GrayImage,
    pub color: ColorFieldLab,
    pub labels: Vec<usize>,
}

/// A background plus `regions - 1` axis-aligned ellipses of random size
/// (later ones drawn on top), each region with its own intensity level and
/// a base chroma plus a linear chroma ramp across the image.
pub fn region_image(width: usize, height: usize, regions: usize, rng: &mut impl Rng) -> Result<LabeledImage> {
    let regions = regions.max(1);
    let mut levels: Vec<f64> = (0..regions)
        .map(|k| 0.15 + 0.7 * (k as f64 + 0.5) / regions as f64)
        .collect();
    levels.shuffle(rng);
    let colors: Vec<[f64; 6]> = (0..regions)
        .map(|_| {
            [
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(-RAMP..RAMP),
                rng.random_range(-RAMP..RAMP),
                rng.random_range(-RAMP..RAMP),
                rng.random_range(-RAMP..RAMP),
            ]
        })
        .collect();
    let short = width.min(height) as f64;
    let shapes: Vec<[f64; 4]> = (1..regions)
        .map(|_| {
            [
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(0.08 * short..0.3 * short),
                rng.random_range(0.08 * short..0.3 * short),
            ]
        })
        .collect();
    let p = width * height;
    let (mut g, mut a, mut b, mut labels) = (vec![0.0; p], vec![0.0; p], vec![0.0; p], vec![0; p]);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let k = shapes
                .iter()
                .rposition(|&[cx, cy, rx, ry]| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0)
                .map_or(0, |i| i + 1);
            let (u, v) = (x / width as f64 - 0.5, y / height as f64 - 0.5);
            let [a0, b0, au, av, bu, bv] = colors[k];
            let i = r * width + c;
            labels[i] = k;
            g[i] = levels[k];
            a[i] = a0 + au * u + av * v;
            b[i] = b0 + bu * u + bv * v;
        }
    }
    Ok(LabeledImage {
        gray: GrayImage::new(width, height, g)?,
        color: ColorFieldLab::new(width, height, a, b)?,
        labels,
    })
}

/// `n` region images with 2 to 4 regions each.
pub fn controllability_set(n: usize, width: usize, height: usize, rng: &mut impl Rng) -> Result<Vec<LabeledImage>> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(2..=4);
            region_image(width, height, k, rng)
        })
        .collect()
}

/// Region chroma `(a, b)` of the two palettes, for background, stripe and
/// block.
pub const PALETTES: [[(f64, f64); 3]; 2] = [
    [(40.0, 30.0), (15.0, 55.0), (60.0, -15.0)],
    [(-40.0, -30.0), (-45.0, 10.0), (-10.0, -50.0)],
];

/// Intensity of background, stripe and block.
pub const SHAPE_LEVELS: [f64; 3] = [0.3, 0.5, 0.75];

/// One image of the two-mode set: a horizontal stripe and a square block on
/// a background, positions jittered, colored with `PALETTES[mode]` plus a
/// small per-image chroma jitter.
pub fn two_mode_image(width: usize, height: usize, mode: usize, rng: &mut impl Rng) -> Result<LabeledImage> {
    let stripe_h = (height / 4).max(1);
    let block = (width.min(height) / 2).max(1);
    let stripe_top = rng.random_range(0..=(height - stripe_h));
    let (block_top, block_left) = (rng.random_range(0..=(height - block)), rng.random_range(0..=(width - block)));
    let jitter: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)))
        .collect();
    let p = width * height;
    let (mut g, mut a, mut b, mut labels) = (vec![0.0; p], vec![0.0; p], vec![0.0; p], vec![0; p]);
    for r in 0..height {
        for c in 0..width {
            let in_block = (block_top..block_top + block).contains(&r) && (block_left..block_left + block).contains(&c);
            let in_stripe = (stripe_top..stripe_top + stripe_h).contains(&r);
            let k = if in_block { 2 } else if in_stripe { 1 } else { 0 };
            let i = r * width + c;
            let (pa, pb) = PALETTES[mode % 2][k];
            labels[i] = k;
            g[i] = SHAPE_LEVELS[k];
            a[i] = pa + jitter[k].0;
            b[i] = pb + jitter[k].1;
        }
    }
    Ok(LabeledImage {
        gray: GrayImage::new(width, height, g)?,
        color: ColorFieldLab::new(width, height, a, b)?,
        labels,
    })
}

/// `n` images alternating between the two palettes; returns the mode of
/// each.
pub fn two_mode_set(n: usize, width: usize, height: usize, rng: &mut impl Rng) -> Result<Vec<(LabeledImage, usize)>> {
    (0..n)
        .map(|i| Ok((two_mode_image(width, height, i % 2, rng)?, i % 2)))
        .collect()
}

/// Latents drawn from `means.len()` spherical Gaussians with standard
/// deviation `std`, assigned round-robin. Returns the points and their
/// cluster labels.
pub fn gaussian_clusters(means: &[DVector<f64>], n: usize, std: f64, rng: &mut impl Rng) -> (Vec<DVector<f64>>, Vec<usize>) {
    let k = means.len();
    (0..n)
        .map(|i| {
            let m = &means[i % k];
            let z = DVector::from_fn(m.len(), |j, _| m[j] + std * rng.sample::<f64, _>(StandardNormal));
            (z, i % k)
        })
        .unzip()
}
