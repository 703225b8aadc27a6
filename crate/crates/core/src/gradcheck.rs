//! Finite-difference verification of the three backward paths of the G-CRF
//! layer on random instances.
//!
//! Each instance draws embeddings `𝒜` (`D x P`), a temperature, a mask with
//! at least two active pixels, targets `α`, `β` and a loss target `t`, and
//! uses `L(x) = ½‖x - t‖²`. The error of an instance is the norm-wise
//! relative error `‖fd - g‖ / max(‖fd‖, ‖g‖)` over all checked entries.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};
use crate::gcrf::{assemble, grad_embeddings, grad_hoc, grad_unary, Constraints, GcrfSystem, SystemOptions};
use crate::linalg::FactorStrategy;
use crate::similarity::{build_similarity, PixelEmbeddings};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradPath {
    Unary,
    Hoc,
    Embeddings,
}

impl GradPath {
    pub const ALL: [GradPath; 3] = [GradPath::Unary, GradPath::Hoc, GradPath::Embeddings];

    pub fn name(self) -> &'static str {
        match self {
            GradPath::Unary => "grad_unary",
            GradPath::Hoc => "grad_hoc",
            GradPath::Embeddings => "grad_embeddings",
        }
    }
}

/// Deliberate defects injected into the analytic gradients, so tests can
/// show the check actually catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negates `∂L/∂A`. Affects both the HOC and the embedding paths.
    FlipHocSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub min_pixels: usize,
    pub max_pixels: usize,
    pub max_dim: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            min_pixels: 4,
            max_pixels: 36,
            max_dim: 8,
            step: 1e-6,
            tolerance: GRADCHECK_TOLERANCE,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(GcrfError::InvalidInput("gradcheck needs at least one instance".into()));
        }
        if self.min_pixels < 2 || self.min_pixels > self.max_pixels {
            return Err(GcrfError::InvalidInput(format!(
                "pixel range {}..={} is empty or below 2",
                self.min_pixels, self.max_pixels
            )));
        }
        if self.max_dim == 0 {
            return Err(GcrfError::InvalidInput("max_dim must be positive".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite() && self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(GcrfError::InvalidInput("step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub path: GradPath,
    pub instances: usize,
    pub max_rel_error: f64,
    /// `(P, D)` of the instance with the largest error.
    pub worst_shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub paths: Vec<PathReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn path(&self, path: GradPath) -> Option<&PathReport> {
        self.paths.iter().find(|p| p.path == path)
    }

    /// Fixed-width table, one line per path.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>9} {:>12} {:>8}  status", "path", "instances", "max_rel_err", "worst");
        for p in &self.paths {
            let status = if p.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            let worst = format!("{}x{}", p.worst_shape.0, p.worst_shape.1);
            let _ = writeln!(
                out,
                "{:<16} {:>9} {:>12.3e} {:>8}  {status}",
                p.path.name(),
                p.instances,
                p.max_rel_error,
                worst
            );
        }
        let _ = writeln!(
            out,
            "tolerance {:.0e}: {}",
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        );
        out
    }
}

struct Instance {
    emb: PixelEmbeddings,
    temperature: f64,
    constraints: Constraints,
    target: Vec<f64>,
}

impl Instance {
    fn draw(p: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let scale = 0.8 / (d as f64).sqrt();
        let emb = PixelEmbeddings::new(DMatrix::from_fn(d, p, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))?;
        let temperature = rng.random_range(0.5..2.0);
        let beta = rng.random_range(0.5..5.0);
        let mut mask: Vec<bool> = (0..p).map(|_| rng.random_bool(0.5)).collect();
        // a single constraint pins x to a constant field whatever Ŝ is, so
        // the embedding gradient would vanish; keep at least two
        let first = rng.random_range(0..p);
        let second = (first + rng.random_range(1..p)) % p;
        mask[first] = true;
        mask[second] = true;
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let (alpha, other, target) = (normal(p), normal(p), normal(p));
        Ok(Self {
            emb,
            temperature,
            constraints: Constraints::new(mask, alpha, other, beta)?,
            target,
        })
    }

    fn system_for(&self, emb: &PixelEmbeddings) -> Result<GcrfSystem> {
        let s = build_similarity(emb, self.temperature)?;
        assemble(&s, &self.constraints, &SystemOptions::default())
    }

    fn loss(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn dl_dx(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.target).map(|(a, b)| a - b).collect()
    }
}

fn rel_error(fd: &[f64], analytic: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = fd.iter().zip(analytic).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = norm(fd).max(norm(analytic));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative errors of the three paths on one instance, in `GradPath::ALL`
/// order.
fn check_instance(inst: &Instance, h: f64, mutation: Mutation) -> Result<[f64; 3]> {
    let sys = inst.system_for(&inst.emb)?;
    let rhs = sys.rhs(crate::gcrf::Channel::A).to_vec();
    let (x, _) = sys.solve_rhs(&rhs)?;
    let g = grad_unary(&sys, &inst.dl_dx(&x))?;
    let mut d_a = grad_hoc(&g, &x);
    if mutation == Mutation::FlipHocSign {
        d_a = -d_a;
    }
    let p = x.len();

    // unary: perturb the right-hand side
    let mut fd = Vec::with_capacity(p);
    for i in 0..p {
        let eval = |delta: f64| -> Result<f64> {
            let mut r = rhs.clone();
            r[i] += delta;
            Ok(inst.loss(&sys.solve_rhs(&r)?.0))
        };
        fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    let unary = rel_error(&fd, &g);

    // hoc: symmetric perturbations of A, which see G_ij + G_ji off the diagonal
    let a = sys.matrix().clone();
    let (mut fd, mut an) = (Vec::new(), Vec::new());
    for i in 0..p {
        for j in i..p {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = a.clone();
                m[(i, j)] += delta;
                if i != j {
                    m[(j, i)] += delta;
                }
                let perturbed = GcrfSystem::from_parts(m, rhs.clone(), rhs.clone(), FactorStrategy::Auto)?;
                Ok(inst.loss(&perturbed.solve_rhs(&rhs)?.0))
            };
            fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
            an.push(if i == j { d_a[(i, i)] } else { d_a[(i, j)] + d_a[(j, i)] });
        }
    }
    let hoc = rel_error(&fd, &an);

    // embeddings: the full chain through the softmax
    let s = build_similarity(&inst.emb, inst.temperature)?;
    let d_emb = grad_embeddings(&s, &inst.emb, inst.temperature, &d_a);
    let values = inst.emb.values();
    let mut fd = Vec::with_capacity(values.len());
    for k in 0..values.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = values.clone();
            v[k] += delta;
            let perturbed = inst.system_for(&PixelEmbeddings::new(v)?)?;
            Ok(inst.loss(&perturbed.solve_rhs(perturbed.rhs(crate::gcrf::Channel::A))?.0))
        };
        fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    let embeddings = rel_error(&fd, d_emb.as_slice());

    Ok([unary, hoc, embeddings])
}

/// Shape of instance `i`: pixel counts and dimensions are cycled so every
/// value in range is covered once there are enough instances.
fn instance_shape(cfg: &GradcheckConfig, i: usize) -> (usize, usize) {
    let span = cfg.max_pixels - cfg.min_pixels + 1;
    (cfg.min_pixels + i % span, 1 + i % cfg.max_dim)
}

pub fn run_gradcheck(cfg: &GradcheckConfig, mutation: Mutation) -> Result<GradcheckReport> {
    cfg.validate()?;
    let results: Vec<((usize, usize), [f64; 3])> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let (p, d) = instance_shape(cfg, i);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let inst = Instance::draw(p, d, &mut rng)?;
            Ok(((p, d), check_instance(&inst, cfg.step, mutation)?))
        })
        .collect::<Result<_>>()?;
    let paths = GradPath::ALL
        .iter()
        .enumerate()
        .map(|(k, &path)| {
            let (shape, err) = results
                .iter()
                .map(|(shape, errs)| (*shape, errs[k]))
                .fold(((0, 0), f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            PathReport {
                path,
                instances: results.len(),
                max_rel_error: err,
                worst_shape: shape,
            }
        })
        .collect();
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig {
            instances: 6,
            max_pixels: 9,
            max_dim: 3,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_cover_the_ranges() {
        let cfg = GradcheckConfig::default();
        let shapes: Vec<_> = (0..cfg.instances).map(|i| instance_shape(&cfg, i)).collect();
        for p in 4..=36 {
            assert!(shapes.iter().any(|s| s.0 == p), "P={p}");
        }
        for d in 1..=8 {
            assert!(shapes.iter().any(|s| s.1 == d), "D={d}");
        }
    }

    #[test]
    fn small_run_passes_and_flip_fails() {
        let ok = run_gradcheck(&small(), Mutation::None).unwrap();
        assert!(ok.passed(), "{}", ok.to_text());
        let bad = run_gradcheck(&small(), Mutation::FlipHocSign).unwrap();
        assert!(bad.path(GradPath::Unary).unwrap().max_rel_error <= GRADCHECK_TOLERANCE);
        assert!(bad.path(GradPath::Hoc).unwrap().max_rel_error > 1.0);
        assert!(bad.path(GradPath::Embeddings).unwrap().max_rel_error > 1.0);
        assert!(!bad.passed());
    }

    #[test]
    fn report_is_deterministic() {
        let a = run_gradcheck(&small(), Mutation::None).unwrap().to_text();
        let b = run_gradcheck(&small(), Mutation::None).unwrap().to_text();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GradcheckConfig {
            min_pixels: 10,
            max_pixels: 4,
            ..Default::default()
        };
        assert!(run_gradcheck(&cfg, Mutation::None).is_err());
    }
}
