//! Stage 2: a Gaussian mixture over latent codes with fixed spherical
//! variance, fitted with the hard-assignment loss
//! `-ln π_m + ‖z - μ_m‖² / (2σ²)`, `m` the component with the closest mean.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};

pub const DEFAULT_COMPONENTS: usize = 8;
pub const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    /// `M x d`, one mean per row.
    pub means: DMatrix<f64>,
    /// Unnormalized log-weights; the weights are their softmax.
    pub logits: DVector<f64>,
    pub sigma: f64,
}

impl GmmParams {
    pub fn new(means: DMatrix<f64>, logits: DVector<f64>, sigma: f64) -> Result<Self> {
        if means.nrows() == 0 || means.ncols() == 0 || logits.len() != means.nrows() {
            return Err(GcrfError::DimensionMismatch(format!(
                "{}x{} means with {} logits",
                means.nrows(),
                means.ncols(),
                logits.len()
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(GcrfError::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        if means.iter().chain(logits.iter()).any(|v| !v.is_finite()) {
            return Err(GcrfError::NonFinite("mixture parameters"));
        }
        Ok(Self { means, logits, sigma })
    }

    /// Builds from explicit weights, which must be positive and sum to 1.
    pub fn from_weights(means: DMatrix<f64>, weights: &[f64], sigma: f64) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(GcrfError::InvalidInput("mixture weights must be positive and sum to 1".into()));
        }
        let logits = DVector::from_iterator(weights.len(), weights.iter().map(|w| w.ln()));
        Self::new(means, logits, sigma)
    }

    /// Standard-normal means and uniform weights.
    pub fn init(components: usize, dim: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let means = DMatrix::from_fn(components, dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        Self::new(means, DVector::zeros(components), sigma)
    }

    pub fn components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.means.row(i).transpose()
    }

    pub fn weights(&self) -> Vec<f64> {
        let max = self.logits.max();
        let e: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn log_weights(&self) -> Vec<f64> {
        let max = self.logits.max();
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }

    fn sq_dist(&self, i: usize, z: &[f64]) -> f64 {
        self.means.row(i).iter().zip(z).map(|(m, v)| (v - m) * (v - m)).sum()
    }
}

/// Index of the closest mean; ties go to the lowest index.
pub fn nearest_component(gmm: &GmmParams, z: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for i in 0..gmm.components() {
        let d = gmm.sq_dist(i, z);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Hard-assignment mixture loss and the chosen component.
pub fn mdn_loss(gmm: &GmmParams, z: &[f64]) -> (f64, usize) {
    let m = nearest_component(gmm, z);
    let loss = -gmm.log_weights()[m] + gmm.sq_dist(m, z) / (2.0 * gmm.sigma * gmm.sigma);
    (loss, m)
}

/// Exact negative log-likelihood `-ln Σ π_i N(z | μ_i, σ²I)`, normalization
/// included. Diagnostic only; it is not what `stage2_fit` minimizes.
pub fn mixture_nll(gmm: &GmmParams, z: &[f64]) -> f64 {
    let s2 = gmm.sigma * gmm.sigma;
    let log_norm = -0.5 * gmm.dim() as f64 * (2.0 * std::f64::consts::PI * s2).ln();
    let terms: Vec<f64> = gmm
        .log_weights()
        .iter()
        .enumerate()
        .map(|(i, lw)| lw + log_norm - gmm.sq_dist(i, z) / (2.0 * s2))
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    -(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

pub fn mean_mdn_loss(gmm: &GmmParams, latents: &[DVector<f64>]) -> f64 {
    latents.iter().map(|z| mdn_loss(gmm, z.as_slice()).0).sum::<f64>() / latents.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Step size for the means.
    pub lr: f64,
    /// Step size for the weight logits.
    pub logit_lr: f64,
    pub momentum: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.002,
            logit_lr: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Fit {
    pub gmm: GmmParams,
    /// Mean loss after seeding, then after every epoch.
    pub losses: Vec<f64>,
}

/// Farthest-point seeding: the first mean is a random latent, each further
/// one the latent farthest from all chosen so far.
fn seed_means(latents: &[DVector<f64>], m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let d = latents[0].len();
    let mut means = DMatrix::zeros(m, d);
    let first = rng.random_range(0..latents.len());
    means.row_mut(0).copy_from(&latents[first].transpose());
    let mut closest: Vec<f64> = latents.iter().map(|z| (z - &latents[first]).norm_squared()).collect();
    for i in 1..m {
        let (far, _) = closest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best });
        means.row_mut(i).copy_from(&latents[far].transpose());
        for (c, z) in closest.iter_mut().zip(latents) {
            *c = c.min((z - &latents[far]).norm_squared());
        }
    }
    means
}

/// Full-batch momentum descent on the mean hard-assignment loss.
/// With `epochs == 0` the input mixture is returned untouched.
pub fn stage2_fit(gmm: &GmmParams, latents: &[DVector<f64>], cfg: &Stage2Config, rng: &mut impl Rng) -> Result<Stage2Fit> {
    if cfg.epochs == 0 {
        return Ok(Stage2Fit {
            gmm: gmm.clone(),
            losses: Vec::new(),
        });
    }
    if latents.is_empty() {
        return Err(GcrfError::InvalidInput("no latents to fit".into()));
    }
    if let Some(z) = latents.iter().find(|z| z.len() != gmm.dim()) {
        return Err(GcrfError::DimensionMismatch(format!(
            "latent of length {} for a {}-dimensional mixture",
            z.len(),
            gmm.dim()
        )));
    }
    if latents.iter().any(|z| z.iter().any(|v| !v.is_finite())) {
        return Err(GcrfError::NonFinite("latents"));
    }
    let (m, n) = (gmm.components(), latents.len() as f64);
    let mut fit = GmmParams::new(seed_means(latents, m, rng), DVector::zeros(m), gmm.sigma)?;
    let s2 = gmm.sigma * gmm.sigma;
    let mut v_means = DMatrix::<f64>::zeros(m, gmm.dim());
    let mut v_logits = DVector::<f64>::zeros(m);
    let mut losses = vec![mean_mdn_loss(&fit, latents)];
    for _ in 0..cfg.epochs {
        let weights = fit.weights();
        let mut g_means = DMatrix::<f64>::zeros(m, gmm.dim());
        let mut g_logits = DVector::from_vec(weights.clone());
        for z in latents {
            let k = nearest_component(&fit, z.as_slice());
            let mut row = g_means.row_mut(k);
            row += (fit.means.row(k) - z.transpose()) / (s2 * n);
            g_logits[k] -= 1.0 / n;
        }
        v_means = v_means * cfg.momentum + &g_means;
        v_logits = v_logits * cfg.momentum + &g_logits;
        fit.means -= &v_means * cfg.lr;
        fit.logits -= &v_logits * cfg.logit_lr;
        losses.push(mean_mdn_loss(&fit, latents));
    }
    Ok(Stage2Fit { gmm: fit, losses })
}
