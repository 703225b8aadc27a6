//! Diverse colorizations: latent codes from the mixture, decoded to unary
//! fields, all solved against one factorized system per image.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vae::decoder_features;
use super::ToyModel;
use crate::edits::TEST_BETA;
use crate::error::{GcrfError, Result};
use crate::gcrf::{assemble_from_structure, Constraints, SystemOptions};
use crate::image::{ColorFieldLab, GrayImage};
use crate::similarity::build_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Sample `k` uses component `k mod M`.
    #[default]
    PerComponent,
    /// Components drawn according to the mixture weights.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "index")]
pub enum LatentSource {
    EncoderPosterior,
    GmmComponent(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: DVector<f64>,
    pub source: LatentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub mode: SampleMode,
    pub seed: u64,
    /// Use the component means themselves (the σ → 0 limit).
    pub deterministic: bool,
    /// Constraint strength of the full-mask solve.
    pub beta: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            mode: SampleMode::PerComponent,
            seed: 0,
            deterministic: false,
            beta: TEST_BETA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiverseSamples {
    /// Native-resolution chroma, one per latent.
    pub samples: Vec<ColorFieldLab>,
    pub latents: Vec<LatentSample>,
    /// Largest relative residual over all solves.
    pub max_residual: f64,
}

/// Draws `n` latents, decodes each to a unary field and solves
/// `(A) x = βB` with a full mask. `A` depends only on the gray image, so it
/// is assembled and factorized once; the solves run in parallel.
pub fn sample_diverse(model: &ToyModel, gray: &GrayImage, n: usize, opts: &SampleOptions) -> Result<DiverseSamples> {
    if n == 0 {
        return Err(GcrfError::InvalidInput("need at least one sample".into()));
    }
    if !(opts.beta > 0.0 && opts.beta.is_finite()) {
        return Err(GcrfError::InvalidInput(format!("beta must be positive, got {}", opts.beta)));
    }
    let cfg = &model.config;
    let grid = gray.resample(cfg.grid_width, cfg.grid_height)?;
    let p = grid.pixel_count();
    let gmm = &model.gmm;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weighted = WeightedIndex::new(gmm.weights()).map_err(|e| GcrfError::InvalidInput(e.to_string()))?;
    let latents: Vec<LatentSample> = (0..n)
        .map(|k| {
            let i = match opts.mode {
                SampleMode::PerComponent => k % gmm.components(),
                SampleMode::Weighted => weighted.sample(&mut rng),
            };
            let mut z = gmm.mean(i);
            if !opts.deterministic {
                for v in z.iter_mut() {
                    *v += gmm.sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            LatentSample {
                z,
                source: LatentSource::GmmComponent(i),
            }
        })
        .collect();

    let emb = model.structure.embeddings_for(&grid)?;
    let s = build_similarity(&emb, cfg.temperature)?;
    let full = Constraints::full(vec![0.0; p], vec![0.0; p], opts.beta)?;
    let sys = assemble_from_structure(&s.structure_matrix(), &full, &SystemOptions::default())?;
    let features = decoder_features(&grid);
    let solved: Vec<Result<(ColorFieldLab, f64)>> = latents
        .par_iter()
        .map(|l| {
            let [ua, ub] = model.vae.decode(&l.z, &features);
            let (a, ra) = sys.solve_rhs((ua * opts.beta).as_slice())?;
            let (b, rb) = sys.solve_rhs((ub * opts.beta).as_slice())?;
            let field = ColorFieldLab::from_scaled(grid.width(), grid.height(), &a, &b)?
                .resample(gray.width(), gray.height())?;
            Ok((field, ra.max(rb)))
        })
        .collect();
    let mut samples = Vec::with_capacity(n);
    let mut max_residual: f64 = 0.0;
    for r in solved {
        let (f, res) = r?;
        samples.push(f);
        max_residual = max_residual.max(res);
    }
    Ok(DiverseSamples {
        samples,
        latents,
        max_residual,
    })
}
