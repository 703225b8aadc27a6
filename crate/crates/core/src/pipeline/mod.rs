//! Desk-scale two-stage training: stage 1 learns a latent code of the
//! color field and, through the G-CRF layer, the pixel structure; stage 2
//! fits a mixture over the latent codes for diverse sampling.
//!
//! The convolutional networks of the original model are replaced by affine
//! maps on fixed per-pixel features (see [`vae`]). The mixture is not
//! conditioned on the gray image.

pub mod checkpoint;
pub mod gmm;
pub mod sample;
pub mod schedule;
pub mod toy;
pub mod vae;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::edits::TRAIN_BETA;
use crate::error::{GcrfError, Result};
use crate::gcrf::{assemble, Constraints, SystemOptions};
use crate::metrics::psnr;
use crate::similarity::{build_similarity, BaselineWeights};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gmm::{mdn_loss, mixture_nll, stage2_fit, GmmParams, Stage2Config, Stage2Fit};
pub use sample::{sample_diverse, DiverseSamples, LatentSample, LatentSource, SampleMode, SampleOptions};
pub use schedule::MaskSchedule;
pub use toy::{run_toy_experiment, ToyExperimentConfig, ToyExperimentReport};
pub use vae::{gaussian_kl, stage1_loss_and_grad, stage1_step, Example, Phase, Stage1Context, Stage1Params, StructureMap, ToyVae};

/// Shape and fixed hyper-parameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub temperature: f64,
    /// Constraint strength of training-time solves.
    pub beta: f64,
    pub components: usize,
    pub sigma: f64,
    /// Standard deviation of the random initial weights.
    pub init_scale: f64,
    /// Initial posterior log-variance. A narrow start keeps early decoder
    /// steps stable for large latent sizes, where `|z|²` would be about `d`.
    pub init_logvar: f64,
    /// Initial diagonal of the structure map.
    pub structure_init: BaselineWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_width: 16,
            grid_height: 16,
            latent_dim: 64,
            embedding_dim: vae::STRUCTURE_FEATURES,
            temperature: 1.0,
            beta: TRAIN_BETA,
            components: gmm::DEFAULT_COMPONENTS,
            sigma: gmm::DEFAULT_SIGMA,
            init_scale: 0.01,
            init_logvar: -4.0,
            structure_init: BaselineWeights {
                intensity: 4.0,
                bumps: 2.0,
                ..BaselineWeights::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GcrfError::InvalidInput(format!("{name} must be positive, got {v}")))
            }
        };
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(GcrfError::InvalidInput("grid dimensions must be positive".into()));
        }
        if self.latent_dim == 0 || self.embedding_dim == 0 || self.components == 0 {
            return Err(GcrfError::InvalidInput(
                "latent_dim, embedding_dim and components must be positive".into(),
            ));
        }
        positive(self.temperature, "temperature")?;
        positive(self.beta, "beta")?;
        positive(self.sigma, "sigma")?;
        if !self.init_logvar.is_finite() {
            return Err(GcrfError::InvalidInput("init_logvar must be finite".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(GcrfError::InvalidInput("init_scale must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.grid_width * self.grid_height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub vae: ToyVae,
    pub structure: StructureMap,
    pub gmm: GmmParams,
}

impl ToyModel {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vae = ToyVae::init(config.latent_dim, config.pixel_count(), config.init_scale, config.init_logvar, &mut rng);
        let structure = StructureMap::from_baseline(config.embedding_dim, &config.structure_init);
        let gmm = GmmParams::init(config.components, config.latent_dim, config.sigma, &mut rng)?;
        Ok(Self {
            config,
            vae,
            structure,
            gmm,
        })
    }

    pub fn stage1_params(&self) -> Stage1Params {
        Stage1Params {
            vae: self.vae.clone(),
            structure: self.structure.clone(),
        }
    }

    pub fn example(&self, gray: &crate::image::GrayImage, color: &crate::image::ColorFieldLab) -> Result<Example> {
        Example::new(gray, color, self.config.grid_width, self.config.grid_height)
    }
}

/// Which latents stage 2 is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentDraw {
    /// `z = μ + σ ⊙ ε` from the encoder posterior.
    #[default]
    PosteriorSample,
    /// The posterior mean `μ`.
    PosteriorMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub unary_epochs: usize,
    pub hoc_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoder learning rate in the HOC phase. The decoder only sees the
    /// sparse unaries through the solve there, so it is fine-tuned gently.
    pub hoc_lr: f64,
    pub structure_lr: f64,
    pub momentum: f64,
    pub kl_weight: f64,
    pub schedule: MaskSchedule,
    pub latents: LatentDraw,
    pub latents_per_image: usize,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            unary_epochs: 60,
            hoc_epochs: 20,
            batch_size: 8,
            lr: 0.08,
            hoc_lr: 0.0005,
            structure_lr: 0.08,
            momentum: 0.9,
            kl_weight: 1e-3,
            schedule: MaskSchedule::default(),
            latents: LatentDraw::default(),
            latents_per_image: 4,
            stage2: Stage2Config::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.latents_per_image == 0 {
            return Err(GcrfError::InvalidInput("batch_size and latents_per_image must be positive".into()));
        }
        for (v, name) in [(self.lr, "lr"), (self.hoc_lr, "hoc_lr"), (self.structure_lr, "structure_lr"), (self.stage2.lr, "stage2.lr"), (self.stage2.logit_lr, "stage2.logit_lr")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GcrfError::InvalidInput(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (v, name) in [(self.momentum, "momentum"), (self.stage2.momentum, "stage2.momentum")] {
            if !(0.0..1.0).contains(&v) {
                return Err(GcrfError::InvalidInput(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(GcrfError::InvalidInput("kl_weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn stage1_context(&self, model: &ModelConfig) -> Stage1Context {
        Stage1Context {
            temperature: model.temperature,
            beta: model.beta,
            kl_weight: self.kl_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub fraction: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stage2_losses: Vec<f64>,
}

/// Runs the unary phase, the HOC phase under the mask schedule, then
/// stage 2. Deterministic given `cfg.seed`; zero epochs everywhere returns
/// the input model unchanged.
pub fn train(model: &ToyModel, data: &[Example], cfg: &TrainConfig) -> Result<(ToyModel, TrainReport)> {
    cfg.validate()?;
    let p = model.config.pixel_count();
    if let Some(ex) = data.iter().find(|e| e.pixel_count() != p) {
        return Err(GcrfError::DimensionMismatch(format!(
            "example with {} pixels for a {p}-pixel model",
            ex.pixel_count()
        )));
    }
    let needs_data = cfg.unary_epochs + cfg.hoc_epochs + cfg.stage2.epochs > 0;
    if needs_data && data.is_empty() {
        return Err(GcrfError::InvalidInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ctx = cfg.stage1_context(&model.config);
    let mut params = model.stage1_params();
    let mut report = TrainReport {
        epochs: Vec::new(),
        stage2_losses: Vec::new(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for (phase, epochs) in [(Phase::Unary, cfg.unary_epochs), (Phase::Hoc, cfg.hoc_epochs)] {
        let mut optimizer = vae::Momentum::new(&params, cfg.momentum);
        for epoch in 0..epochs {
            let fraction = match phase {
                Phase::Unary => 1.0,
                Phase::Hoc => cfg.schedule.fraction_at(epoch),
            };
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
                let lr = match phase {
                    Phase::Unary => cfg.lr,
                    Phase::Hoc => cfg.hoc_lr,
                };
                let loss = stage1_step(&mut params, &mut optimizer, &batch, phase, fraction, &ctx, lr, cfg.structure_lr, &mut rng)?;
                total += loss * chunk.len() as f64;
            }
            let loss = total / data.len() as f64;
            if !loss.is_finite() {
                return Err(GcrfError::NonFinite("training loss"));
            }
            report.epochs.push(EpochRecord {
                phase,
                epoch,
                fraction,
                loss,
            });
        }
    }
    let mut out = ToyModel {
        config: model.config.clone(),
        vae: params.vae,
        structure: params.structure,
        gmm: model.gmm.clone(),
    };
    if cfg.stage2.epochs > 0 {
        let latents = collect_latents(&out.vae, data, cfg.latents, cfg.latents_per_image, &mut rng);
        let fit = stage2_fit(&out.gmm, &latents, &cfg.stage2, &mut rng)?;
        out.gmm = fit.gmm;
        report.stage2_losses = fit.losses;
    }
    Ok((out, report))
}

/// Chroma of an example rebuilt from its posterior mean, in solver units.
/// Without a mask this is the decoder's unary field itself. With one, only
/// the unaries kept by the mask enter a G-CRF solve at strength `beta`.
pub fn reconstruct(model: &ToyModel, ex: &Example, mask: Option<&[bool]>, beta: f64) -> Result<[DVector<f64>; 2]> {
    if ex.pixel_count() != model.config.pixel_count() {
        return Err(GcrfError::DimensionMismatch(format!(
            "example with {} pixels for a {}-pixel model",
            ex.pixel_count(),
            model.config.pixel_count()
        )));
    }
    let (mu, _) = model.vae.encode(&ex.encoder_input);
    let unary = model.vae.decode(&mu, &ex.decoder_features);
    let Some(mask) = mask else {
        return Ok(unary);
    };
    let emb = model.structure.embeddings(&ex.structure_features)?;
    let s = build_similarity(&emb, model.config.temperature)?;
    let c = Constraints::new(
        mask.to_vec(),
        unary[0].as_slice().to_vec(),
        unary[1].as_slice().to_vec(),
        beta,
    )?;
    let sol = assemble(&s, &c, &SystemOptions::default())?.solve()?;
    Ok([DVector::from_vec(sol.a), DVector::from_vec(sol.b)])
}

/// PSNR of [`reconstruct`] against the example's chroma, on the unit scale
/// used by the metrics.
pub fn reconstruction_psnr(model: &ToyModel, ex: &Example, mask: Option<&[bool]>, beta: f64) -> Result<f64> {
    let rec = reconstruct(model, ex, mask, beta)?;
    let unit = |v: &DVector<f64>| v.iter().map(|c| (c + 1.0) / 2.0).collect::<Vec<f64>>();
    let x: Vec<f64> = rec.iter().flat_map(&unit).collect();
    let y: Vec<f64> = ex.target.iter().flat_map(&unit).collect();
    Ok(psnr(&x, &y))
}

/// Latent codes of the training set under the encoder.
pub fn collect_latents(vae: &ToyVae, data: &[Example], draw: LatentDraw, per_image: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for ex in data {
        let (mu, logvar) = vae.encode(&ex.encoder_input);
        match draw {
            LatentDraw::PosteriorMean => out.push(mu),
            LatentDraw::PosteriorSample => {
                for _ in 0..per_image {
                    let eps = DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                    out.push(&mu + logvar.map(|v| (0.5 * v).exp()).component_mul(&eps));
                }
            }
        }
    }
    out
}
