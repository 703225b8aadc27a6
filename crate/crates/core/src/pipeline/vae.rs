//! Stage 1 at desk scale: affine encoder `(x, g) -> (μ, ln σ²)`, a decoder
//! that is affine in `z` with per-pixel coefficients taken from intensity
//! features, and a learned linear map from the structure features
//! to the pixel embeddings.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};
use crate::gcrf::{assemble_from_structure, grad_embeddings, grad_hoc, grad_unary, Constraints, SystemOptions};
use crate::image::{ColorFieldLab, GrayImage};
use crate::similarity::{baseline_features, build_similarity, intensity_bumps, BaselineWeights, PixelEmbeddings, BASELINE_FEATURES, INTENSITY_BUMPS};

/// Gaussian bumps over intensity used by the decoder.
pub const RBF_CENTERS: usize = INTENSITY_BUMPS;
/// Decoder feature rows: a constant plus the intensity bumps.
pub const DECODER_FEATURES: usize = RBF_CENTERS + 1;

/// `½ Σ (μ² + σ² - 1 - ln σ²)`, the KL divergence from `N(μ, σ²I)` to `N(0, I)`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// `K x P` decoder features of a grid image.
pub fn decoder_features(g: &GrayImage) -> DMatrix<f64> {
    let bumps = intensity_bumps(g);
    DMatrix::from_fn(DECODER_FEATURES, g.pixel_count(), |k, i| if k == 0 { 1.0 } else { bumps[(k - 1, i)] })
}

/// Rows of [`structure_features`]: the baseline features followed by the
/// intensity bumps of [`decoder_features`].
pub const STRUCTURE_FEATURES: usize = BASELINE_FEATURES + RBF_CENTERS;

/// `STRUCTURE_FEATURES x P` input of the structure map. The bumps let a
/// linear map express "same intensity" under a dot-product kernel, which the
/// standardized intensity alone cannot do for mid-range levels.
pub fn structure_features(g: &GrayImage) -> DMatrix<f64> {
    let base = baseline_features(g);
    let bumps = decoder_features(g);
    let p = g.pixel_count();
    DMatrix::from_fn(STRUCTURE_FEATURES, p, |r, i| {
        if r < BASELINE_FEATURES {
            base[(r, i)]
        } else {
            bumps[(r - BASELINE_FEATURES + 1, i)]
        }
    })
}

/// `[a; b; g] / sqrt(3P)`, the encoder input.
pub fn encoder_input(g: &GrayImage, a: &[f64], b: &[f64]) -> DVector<f64> {
    let p = g.pixel_count();
    let scale = 1.0 / ((3 * p) as f64).sqrt();
    DVector::from_iterator(3 * p, a.iter().chain(b).chain(g.intensity()).map(|v| v * scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVae {
    /// `d x 3P`
    pub enc_mean_w: DMatrix<f64>,
    pub enc_mean_b: DVector<f64>,
    pub enc_logvar_w: DMatrix<f64>,
    pub enc_logvar_b: DVector<f64>,
    /// Per channel, `K x d`: `B_c = Fᵀ (W_c z + b_c)`.
    pub dec_w: [DMatrix<f64>; 2],
    pub dec_b: [DVector<f64>; 2],
}

impl ToyVae {
    pub fn zeros(latent_dim: usize, pixels: usize) -> Self {
        Self {
            enc_mean_w: DMatrix::zeros(latent_dim, 3 * pixels),
            enc_mean_b: DVector::zeros(latent_dim),
            enc_logvar_w: DMatrix::zeros(latent_dim, 3 * pixels),
            enc_logvar_b: DVector::zeros(latent_dim),
            dec_w: [DMatrix::zeros(DECODER_FEATURES, latent_dim), DMatrix::zeros(DECODER_FEATURES, latent_dim)],
            dec_b: [DVector::zeros(DECODER_FEATURES), DVector::zeros(DECODER_FEATURES)],
        }
    }

    /// Gaussian weights with standard deviation `scale`, zero biases except
    /// the log-variance bias, which starts at `logvar`.
    pub fn init(latent_dim: usize, pixels: usize, scale: f64, logvar: f64, rng: &mut impl Rng) -> Self {
        let mut vae = Self::zeros(latent_dim, pixels);
        let mut fill = |m: &mut DMatrix<f64>| {
            for v in m.iter_mut() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(&mut vae.enc_mean_w);
        fill(&mut vae.enc_logvar_w);
        fill(&mut vae.dec_w[0]);
        fill(&mut vae.dec_w[1]);
        vae.enc_logvar_b.fill(logvar);
        vae
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_mean_b.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.enc_mean_w.ncols() / 3
    }

    /// `(μ, ln σ²)`.
    pub fn encode(&self, input: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            &self.enc_mean_w * input + &self.enc_mean_b,
            &self.enc_logvar_w * input + &self.enc_logvar_b,
        )
    }

    /// Unary fields for both channels, in solver units.
    pub fn decode(&self, z: &DVector<f64>, features: &DMatrix<f64>) -> [DVector<f64>; 2] {
        [0, 1].map(|c| features.tr_mul(&(&self.dec_w[c] * z + &self.dec_b[c])))
    }
}

/// Linear map from the structure features to the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMap {
    /// `D x STRUCTURE_FEATURES`
    pub weights: DMatrix<f64>,
}

impl StructureMap {
    /// Starts from the hand-crafted embedding: the baseline weights on the
    /// diagonal, then `w.bumps` on the diagonal of the bump block where
    /// `D` leaves room for it.
    pub fn from_baseline(dim: usize, w: &BaselineWeights) -> Self {
        let diag = [w.intensity, w.x, w.y, w.local_mean, w.local_std];
        Self {
            weights: DMatrix::from_fn(dim, STRUCTURE_FEATURES, |r, c| match (r == c, c < BASELINE_FEATURES) {
                (false, _) => 0.0,
                (true, true) => diag[c],
                (true, false) => w.bumps,
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn embeddings(&self, features: &DMatrix<f64>) -> Result<PixelEmbeddings> {
        PixelEmbeddings::new(&self.weights * features)
    }

    pub fn embeddings_for(&self, grid: &GrayImage) -> Result<PixelEmbeddings> {
        self.embeddings(&structure_features(grid))
    }
}

/// One training image on the solver grid with its cached features.
#[derive(Debug, Clone)]
pub struct Example {
    pub gray: GrayImage,
    /// Ground-truth chroma in solver units.
    pub target: [DVector<f64>; 2],
    pub encoder_input: DVector<f64>,
    pub decoder_features: DMatrix<f64>,
    pub structure_features: DMatrix<f64>,
}

impl Example {
    pub fn new(gray: &GrayImage, color: &ColorFieldLab, grid_width: usize, grid_height: usize) -> Result<Self> {
        if gray.width() != color.width || gray.height() != color.height {
            return Err(GcrfError::DimensionMismatch("gray and color images differ in size".into()));
        }
        let gray = gray.resample(grid_width, grid_height)?;
        let color = color.resample(grid_width, grid_height)?;
        let (a, b) = (color.scaled_a(), color.scaled_b());
        Ok(Self {
            encoder_input: encoder_input(&gray, &a, &b),
            decoder_features: decoder_features(&gray),
            structure_features: structure_features(&gray),
            target: [DVector::from_vec(a), DVector::from_vec(b)],
            gray,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.gray.pixel_count()
    }
}

/// Everything trained in stage 1. Also used for gradients and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Params {
    pub vae: ToyVae,
    pub structure: StructureMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Unary,
    Hoc,
}

impl Stage1Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            vae: ToyVae::zeros(self.vae.latent_dim(), self.vae.pixel_count()),
            structure: StructureMap {
                weights: DMatrix::zeros(self.structure.dim(), STRUCTURE_FEATURES),
            },
        }
    }

    /// Mutable parameter blocks trained in `phase`: the encoder is frozen
    /// and the structure map is unused during the unary phase.
    pub fn trainable_mut(&mut self, phase: Phase) -> Vec<(&mut [f64], Block)> {
        match phase {
            Phase::Unary => {
                let (enc, dec) = split_vae(&mut self.vae);
                enc.into_iter()
                    .map(|s| (s, Block::Encoder))
                    .chain(dec.into_iter().map(|s| (s, Block::Decoder)))
                    .collect()
            }
            Phase::Hoc => {
                let (_, dec) = split_vae(&mut self.vae);
                dec.into_iter()
                    .map(|s| (s, Block::Decoder))
                    .chain(std::iter::once((self.structure.weights.as_mut_slice(), Block::Structure)))
                    .collect()
            }
        }
    }

    /// All parameter blocks, in a fixed order.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let (enc, dec) = split_vae(&mut self.vae);
        out.extend(enc);
        out.extend(dec);
        out.push(self.structure.weights.as_mut_slice());
        out
    }

    /// `self += alpha * other`, over every block.
    pub fn axpy(&mut self, alpha: f64, other: &Stage1Params) {
        let mut other = other.clone();
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks_mut()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += alpha * s;
            }
        }
    }
}

fn split_vae(v: &mut ToyVae) -> ([&mut [f64]; 4], [&mut [f64]; 4]) {
    let [w0, w1] = &mut v.dec_w;
    let [b0, b1] = &mut v.dec_b;
    (
        [
            v.enc_mean_w.as_mut_slice(),
            v.enc_mean_b.as_mut_slice(),
            v.enc_logvar_w.as_mut_slice(),
            v.enc_logvar_b.as_mut_slice(),
        ],
        [w0.as_mut_slice(), b0.as_mut_slice(), w1.as_mut_slice(), b1.as_mut_slice()],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Encoder,
    Decoder,
    Structure,
}

/// Fixed quantities of a stage-1 loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Context {
    pub temperature: f64,
    pub beta: f64,
    pub kl_weight: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Eval {
    pub loss: f64,
    pub kl: f64,
    pub reconstruction: f64,
    pub grads: Stage1Params,
}

/// Loss `kl_weight * KL + MSE` of one example and its gradient, for a fixed
/// reparameterization noise `eps`. `mask` selects the kept unaries in the
/// HOC phase and is ignored in the unary phase.
pub fn stage1_loss_and_grad(
    params: &Stage1Params,
    ex: &Example,
    phase: Phase,
    eps: &[f64],
    mask: &[bool],
    ctx: &Stage1Context,
) -> Result<Stage1Eval> {
    let vae = &params.vae;
    let d = vae.latent_dim();
    let p = ex.pixel_count();
    if eps.len() != d || vae.pixel_count() != p {
        return Err(GcrfError::DimensionMismatch(format!(
            "model for {} pixels and latent {d}, example with {p} pixels and noise of length {}",
            vae.pixel_count(),
            eps.len()
        )));
    }
    let (mu, logvar) = vae.encode(&ex.encoder_input);
    let std = logvar.map(|v| (0.5 * v).exp());
    let eps = DVector::from_column_slice(eps);
    let z = &mu + std.component_mul(&eps);
    let unary = vae.decode(&z, &ex.decoder_features);
    let kl = gaussian_kl(mu.as_slice(), logvar.as_slice());
    let mut grads = params.zeros_like();

    let (recon, d_unary) = match phase {
        Phase::Unary => {
            let recon = mse2(&unary, &ex.target);
            let d = [0, 1].map(|c| (&unary[c] - &ex.target[c]) / p as f64);
            (recon, d)
        }
        Phase::Hoc => {
            if mask.len() != p {
                return Err(GcrfError::DimensionMismatch(format!("mask of length {} for {p} pixels", mask.len())));
            }
            let emb = params.structure.embeddings(&ex.structure_features)?;
            let s = build_similarity(&emb, ctx.temperature)?;
            let c = Constraints::new(mask.to_vec(), unary[0].as_slice().to_vec(), unary[1].as_slice().to_vec(), ctx.beta)?;
            let sys = assemble_from_structure(&s.structure_matrix(), &c, &SystemOptions::default())?;
            let sol = sys.solve()?;
            let x = [DVector::from_vec(sol.a), DVector::from_vec(sol.b)];
            let recon = mse2(&x, &ex.target);
            let mut d_a = DMatrix::zeros(p, p);
            let mut d_b = [DVector::zeros(p), DVector::zeros(p)];
            for ch in 0..2 {
                let dl_dx: Vec<f64> = ((&x[ch] - &ex.target[ch]) / p as f64).as_slice().to_vec();
                let g = grad_unary(&sys, &dl_dx)?;
                // rhs = β H B
                for i in 0..p {
                    if mask[i] {
                        d_b[ch][i] = ctx.beta * g[i];
                    }
                }
                d_a += grad_hoc(&g, x[ch].as_slice());
            }
            let d_emb = grad_embeddings(&s, &emb, ctx.temperature, &d_a);
            grads.structure.weights = d_emb * ex.structure_features.transpose();
            (recon, d_b)
        }
    };

    let mut dz = DVector::zeros(d);
    for c in 0..2 {
        let v = &ex.decoder_features * &d_unary[c];
        grads.vae.dec_w[c] = &v * z.transpose();
        dz += vae.dec_w[c].tr_mul(&v);
        grads.vae.dec_b[c] = v;
    }
    if phase == Phase::Unary {
        let d_mu = &mu * ctx.kl_weight + &dz;
        let d_lv = logvar.map(|v| 0.5 * ctx.kl_weight * (v.exp() - 1.0))
            + dz.component_mul(&eps).component_mul(&std) * 0.5;
        grads.vae.enc_mean_w = &d_mu * ex.encoder_input.transpose();
        grads.vae.enc_logvar_w = &d_lv * ex.encoder_input.transpose();
        grads.vae.enc_mean_b = d_mu;
        grads.vae.enc_logvar_b = d_lv;
    }
    Ok(Stage1Eval {
        loss: ctx.kl_weight * kl + recon,
        kl,
        reconstruction: recon,
        grads,
    })
}

/// Mean squared error over both channels.
fn mse2(x: &[DVector<f64>; 2], y: &[DVector<f64>; 2]) -> f64 {
    let n = (x[0].len() + x[1].len()) as f64;
    ((&x[0] - &y[0]).norm_squared() + (&x[1] - &y[1]).norm_squared()) / n
}

/// Momentum buffers for stage-1 descent.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub velocity: Stage1Params,
    pub momentum: f64,
}

impl Momentum {
    pub fn new(like: &Stage1Params, momentum: f64) -> Self {
        Self {
            velocity: like.zeros_like(),
            momentum,
        }
    }

    /// `v = μv + g; θ -= lr v` on the blocks trained in `phase`.
    pub fn step(&mut self, params: &mut Stage1Params, grads: &Stage1Params, phase: Phase, lr: f64, structure_lr: f64) {
        let mu = self.momentum;
        let mut grads = grads.clone();
        let vel = self.velocity.trainable_mut(phase);
        let g = grads.trainable_mut(phase);
        let theta = params.trainable_mut(phase);
        for ((v, _), ((gb, _), (t, block))) in vel.into_iter().zip(g.into_iter().zip(theta)) {
            let rate = if block == Block::Structure { structure_lr } else { lr };
            for ((vi, gi), ti) in v.iter_mut().zip(gb.iter()).zip(t.iter_mut()) {
                *vi = mu * *vi + gi;
                *ti -= rate * *vi;
            }
        }
    }
}

/// One stage-1 step on a batch: fresh noise per example, a fresh mask of
/// `fraction` of the pixels in the HOC phase, gradients averaged.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    params: &mut Stage1Params,
    optimizer: &mut Momentum,
    batch: &[&Example],
    phase: Phase,
    fraction: f64,
    ctx: &Stage1Context,
    lr: f64,
    structure_lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for ex in batch {
        let eps: Vec<f64> = (0..params.vae.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mask = match phase {
            Phase::Unary => Vec::new(),
            Phase::Hoc => super::schedule::random_mask(ex.pixel_count(), fraction, rng),
        };
        let eval = stage1_loss_and_grad(params, ex, phase, &eps, &mask, ctx)?;
        loss += eval.loss / n;
        total.axpy(1.0 / n, &eval.grads);
    }
    optimizer.step(params, &total, phase, lr, structure_lr);
    Ok(loss)
}
