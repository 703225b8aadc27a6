//! The revealed-patch controllability protocol: reveal ground-truth
//! patches, propagate them, score the result.

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edits::{propagate, reveal_patches, Edit, EditSet, PatchMode, PropagateConfig, Scene};
use crate::error::Result;
use crate::image::{ColorFieldLab, GrayImage, RgbImage};
use crate::metrics::{psnr, PsnrPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevealProtocol {
    pub counts: Vec<usize>,
    pub patch: usize,
    pub beta: f64,
    pub mode: PatchMode,
}

impl Default for RevealProtocol {
    fn default() -> Self {
        Self {
            counts: vec![10, 50, 100],
            patch: 7,
            beta: crate::edits::TEST_BETA,
            mode: PatchMode::CenterMean,
        }
    }
}

/// PSNR of a predicted chroma field against the ground truth, in RGB (after
/// recombining with the gray image's L) and on the unit chroma scale.
pub fn score(gray: &GrayImage, predicted: &ColorFieldLab, truth: &ColorFieldLab) -> Result<(f64, f64)> {
    let (pred_rgb, _) = RgbImage::from_lab(gray, predicted)?;
    let (true_rgb, _) = RgbImage::from_lab(gray, truth)?;
    let flat = |img: &RgbImage| -> Vec<f64> { img.unit_channels().iter().flat_map(|p| p.data.iter().copied()).collect() };
    let rgb = psnr(&flat(&pred_rgb), &flat(&true_rgb));
    let (pa, pb) = predicted.unit_channels();
    let (ta, tb) = truth.unit_channels();
    let pred: Vec<f64> = pa.data.iter().chain(&pb.data).copied().collect();
    let tru: Vec<f64> = ta.data.iter().chain(&tb.data).copied().collect();
    Ok((rgb, psnr(&pred, &tru)))
}

/// Reveals `n` patches of the grid-resolution ground truth and scores the
/// propagated colorization at native resolution.
pub fn reveal_and_score(scene: &Scene, truth: &ColorFieldLab, n: usize, protocol: &RevealProtocol, seed: u64) -> Result<PsnrPoint> {
    let (w, h) = scene.grid_size();
    let grid_truth = truth.resample(w, h)?;
    let edits = reveal_patches(&grid_truth, n, protocol.patch, seed, protocol.mode, protocol.beta)?;
    let solution = scene.solve(&edits)?;
    let predicted = scene.to_native(&solution)?;
    let (psnr_rgb, psnr_lab) = score(&scene.native, &predicted, truth)?;
    Ok(PsnrPoint {
        revealed: n,
        psnr_rgb,
        psnr_lab,
    })
}

/// One PSNR point per revealed count for a single image.
pub fn sweep(gray: &GrayImage, truth: &ColorFieldLab, cfg: &PropagateConfig, protocol: &RevealProtocol, seed: u64) -> Result<Vec<PsnrPoint>> {
    let scene = Scene::new(gray, cfg)?;
    protocol
        .counts
        .iter()
        .map(|&n| reveal_and_score(&scene, truth, n, protocol, seed))
        .collect()
}

/// Smallest PSNR gain required between consecutive revealed counts.
pub const TREND_GAP_DB: f64 = 0.5;

/// The controllability trend experiment on synthetic region images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendConfig {
    pub data_seed: u64,
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub protocol: RevealProtocol,
    pub propagate: PropagateConfig,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            data_seed: 2024,
            images: 20,
            width: 32,
            height: 32,
            protocol: RevealProtocol::default(),
            propagate: PropagateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    /// Mean over images, one point per revealed count.
    pub mean: Vec<PsnrPoint>,
    /// PSNR of a single edit propagated over a constant image.
    pub constant_image_psnr: f64,
}

impl TrendReport {
    /// Consecutive RGB PSNR gains.
    pub fn gaps(&self) -> Vec<f64> {
        self.mean.windows(2).map(|w| w[1].psnr_rgb - w[0].psnr_rgb).collect()
    }

    pub fn passed(&self) -> bool {
        self.gaps().iter().all(|&g| g >= TREND_GAP_DB) && self.constant_image_psnr >= crate::metrics::PSNR_CAP_DB
    }
}

/// Sweeps the protocol over `images` region images (image `i` uses reveal
/// seed `i`) and checks the single-edit constant-image case.
pub fn controllability_trend(cfg: &TrendConfig) -> Result<TrendReport> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let set = crate::synthetic::controllability_set(cfg.images, cfg.width, cfg.height, &mut rng)?;
    let per_image: Vec<Vec<PsnrPoint>> = set
        .par_iter()
        .enumerate()
        .map(|(i, img)| sweep(&img.gray, &img.color, &cfg.propagate, &cfg.protocol, i as u64))
        .collect::<Result<_>>()?;
    let n = per_image.len().max(1) as f64;
    let mean = cfg
        .protocol
        .counts
        .iter()
        .enumerate()
        .map(|(k, &revealed)| PsnrPoint {
            revealed,
            psnr_rgb: per_image.iter().map(|pts| pts[k].psnr_rgb).sum::<f64>() / n,
            psnr_lab: per_image.iter().map(|pts| pts[k].psnr_lab).sum::<f64>() / n,
        })
        .collect();

    let gray = GrayImage::constant(cfg.width, cfg.height, 0.5)?;
    let truth = ColorFieldLab::constant(cfg.width, cfg.height, 30.0, -45.0);
    let edits = EditSet::new(
        vec![Edit {
            row: (cfg.propagate.grid_height / 2) as i64,
            col: (cfg.propagate.grid_width / 2) as i64,
            a: 30.0,
            b: -45.0,
        }],
        cfg.protocol.beta,
    );
    let field = propagate(&gray, &edits, &cfg.propagate)?.field;
    let (_, constant_image_psnr) = score(&gray, &field, &truth)?;
    Ok(TrendReport {
        mean,
        constant_image_psnr,
    })
}
