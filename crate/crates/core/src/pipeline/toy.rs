//! The two-mode toy experiment: train on shapes colored with one of two
//! palettes, then check that sparse-mask reconstruction keeps up with the
//! dense unary and that sampling covers both palettes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::random_mask;
use super::{reconstruction_psnr, sample_diverse, train, Example, ModelConfig, SampleOptions, ToyModel, TrainConfig};
use crate::edits::TEST_BETA;
use crate::error::{GcrfError, Result};
use crate::image::ColorFieldLab;
use crate::metrics::{diversity, SampleSet};
use crate::synthetic::two_mode_set;

/// Largest allowed drop of the sparse reconstruction below the dense unary.
pub const HOC_MARGIN_DB: f64 = 1.0;
/// Smallest mean-chroma distance (solver units) that counts as a distinct
/// colorization.
pub const DISTINCT_CHROMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyExperimentConfig {
    pub data_seed: u64,
    pub width: usize,
    pub height: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// Random masks drawn per held-out image. A small region can miss every
    /// revealed pixel of one mask, so a single draw is a noisy estimate.
    pub masks_per_image: usize,
    pub fraction: f64,
    pub samples: usize,
    /// Held-out images on which diverse sampling is checked.
    pub sample_images: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 1,
            width: 16,
            height: 16,
            train_images: 40,
            test_images: 20,
            masks_per_image: 5,
            fraction: 0.10,
            samples: 8,
            sample_images: 3,
            model: ModelConfig::default(),
            train: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCheck {
    pub mode: usize,
    /// Largest distance between the mean chroma of two samples.
    pub max_mean_chroma_distance: f64,
    pub variance: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExperimentReport {
    /// Mean PSNR of the unary-only model's dense reconstruction.
    pub unary_psnr: f64,
    /// Mean PSNR of the fully trained model solved from a sparse mask.
    pub hoc_psnr: f64,
    pub samples: Vec<SampleCheck>,
}

impl ToyExperimentReport {
    pub fn hoc_passes(&self) -> bool {
        self.hoc_psnr >= self.unary_psnr - HOC_MARGIN_DB
    }

    pub fn diversity_passes(&self) -> bool {
        self.samples
            .iter()
            .all(|s| s.max_mean_chroma_distance > DISTINCT_CHROMA && s.variance > 0.0)
    }

    pub fn passed(&self) -> bool {
        self.hoc_passes() && self.diversity_passes()
    }
}

fn mean_chroma(f: &ColorFieldLab) -> (f64, f64) {
    let n = f.pixel_count() as f64;
    (f.scaled_a().iter().sum::<f64>() / n, f.scaled_b().iter().sum::<f64>() / n)
}

/// Trains a unary-only baseline and a full model from the same
/// initialization and scores both on held-out images.
pub fn run_toy_experiment(cfg: &ToyExperimentConfig) -> Result<ToyExperimentReport> {
    if cfg.test_images == 0 || cfg.masks_per_image == 0 || cfg.train_images == 0 {
        return Err(GcrfError::InvalidInput("image and mask counts must be positive".into()));
    }
    if cfg.samples < 2 {
        return Err(GcrfError::NeedTwoSamples);
    }
    let model_cfg = ModelConfig {
        grid_width: cfg.width,
        grid_height: cfg.height,
        ..cfg.model.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let train_set = two_mode_set(cfg.train_images, cfg.width, cfg.height, &mut rng)?;
    let test_set = two_mode_set(cfg.test_images, cfg.width, cfg.height, &mut rng)?;
    let init = ToyModel::init(model_cfg, cfg.train.seed)?;
    let examples = |set: &[(crate::synthetic::LabeledImage, usize)]| -> Result<Vec<Example>> {
        set.iter().map(|(img, _)| init.example(&img.gray, &img.color)).collect()
    };
    let (data, test) = (examples(&train_set)?, examples(&test_set)?);

    let unary_cfg = TrainConfig {
        hoc_epochs: 0,
        ..cfg.train.clone()
    };
    let (base, _) = train(&init, &data, &unary_cfg)?;
    let (full, _) = train(&init, &data, &cfg.train)?;

    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.data_seed ^ 0x6d61_736b);
    let (mut unary, mut hoc) = (0.0, 0.0);
    for ex in &test {
        unary += reconstruction_psnr(&base, ex, None, TEST_BETA)?;
        for _ in 0..cfg.masks_per_image {
            let mask = random_mask(ex.pixel_count(), cfg.fraction, &mut mask_rng);
            hoc += reconstruction_psnr(&full, ex, Some(&mask), TEST_BETA)?;
        }
    }

    let mut samples = Vec::new();
    for (img, mode) in test_set.iter().take(cfg.sample_images) {
        let opts = SampleOptions {
            seed: cfg.data_seed,
            ..SampleOptions::default()
        };
        let drawn = sample_diverse(&full, &img.gray, cfg.samples, &opts)?;
        let means: Vec<(f64, f64)> = drawn.samples.iter().map(mean_chroma).collect();
        let mut widest: f64 = 0.0;
        for (i, a) in means.iter().enumerate() {
            for b in &means[i + 1..] {
                widest = widest.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
        }
        let d = diversity(&SampleSet::new(drawn.samples, img.color.clone())?)?;
        samples.push(SampleCheck {
            mode: *mode,
            max_mean_chroma_distance: widest,
            variance: d.variance,
            max_residual: drawn.max_residual,
        });
    }

    Ok(ToyExperimentReport {
        unary_psnr: unary / test.len() as f64,
        hoc_psnr: hoc / (test.len() * cfg.masks_per_image) as f64,
        samples,
    })
}
