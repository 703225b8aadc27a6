//! Gaussian-CRF output layer.
//!
//! For one chroma channel the energy is
//! `E(x) = ½‖(I - Ŝ)x‖² + ½β‖Hx - α‖²`, minimized exactly by solving
//! `((I - Ŝ)ᵀ(I - Ŝ) + βHᵀH) x = βHᵀα`. Both channels share the system
//! matrix and differ only in the right-hand side.
//!
//! The backward pass follows from `x = A⁻¹B`: the unary gradient solves
//! `A g = ∂L/∂x`, and `∂L/∂A = -g xᵀ` (symmetrized, since `A` is constrained
//! symmetric). The gradient is pushed through the row softmax to the pixel
//! embeddings by [`grad_embeddings`].

use nalgebra::{DMatrix, DVector};

use crate::error::{GcrfError, Result};
use crate::formats::{ByteReader, ByteWriter};
use crate::image::ColorFieldLab;
use crate::linalg::{conjugate_gradient, CgOutcome, FactorKind, FactorStrategy, Factorization};
use crate::similarity::{softmax_rows_backward, symmetrize, PixelEmbeddings, SimilarityMatrix};

pub const SYSTEM_MAGIC: &[u8; 8] = b"GCRFSYS1";

/// Every solve must meet this relative residual.
pub const RESIDUAL_BOUND: f64 = 1e-10;

/// Edit constraints: the diagonal of `H`, per-channel targets `α` in solver
/// units, and the strength `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub mask: Vec<bool>,
    pub target_a: Vec<f64>,
    pub target_b: Vec<f64>,
    pub beta: f64,
}

impl Constraints {
    pub fn new(mask: Vec<bool>, target_a: Vec<f64>, target_b: Vec<f64>, beta: f64) -> Result<Self> {
        let p = mask.len();
        if target_a.len() != p || target_b.len() != p {
            return Err(GcrfError::DimensionMismatch(format!(
                "mask has {p} entries, targets {} and {}",
                target_a.len(),
                target_b.len()
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(GcrfError::InvalidInput(format!("beta must be finite and >= 0, got {beta}")));
        }
        for (i, &m) in mask.iter().enumerate() {
            if m && !(target_a[i].is_finite() && target_b[i].is_finite()) {
                return Err(GcrfError::NonFinite("constraint target"));
            }
        }
        Ok(Self {
            mask,
            target_a,
            target_b,
            beta,
        })
    }

    /// Every pixel constrained to the given targets.
    pub fn full(target_a: Vec<f64>, target_b: Vec<f64>, beta: f64) -> Result<Self> {
        Self::new(vec![true; target_a.len()], target_a, target_b, beta)
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.len()
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `βHᵀα` for one channel's targets.
    pub fn rhs(&self, target: &[f64]) -> Vec<f64> {
        self.mask
            .iter()
            .zip(target)
            .map(|(&m, &t)| if m { self.beta * t } else { 0.0 })
            .collect()
    }

    fn energy_constant(&self, target: &[f64]) -> f64 {
        0.5 * self.beta
            * self
                .mask
                .iter()
                .zip(target)
                .filter(|(m, _)| **m)
                .map(|(_, t)| t * t)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SystemOptions {
    pub strategy: FactorStrategy,
    /// Optional `εI` added to the system matrix. Off unless asked for.
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    A,
    B,
}

/// Assembled and factorized system shared by both chroma channels.
#[derive(Debug, Clone)]
pub struct GcrfSystem {
    matrix: DMatrix<f64>,
    rhs_a: Vec<f64>,
    rhs_b: Vec<f64>,
    constant_a: f64,
    constant_b: f64,
    factorization: Factorization,
}

/// Per-channel solution in solver units together with its residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub residual_a: f64,
    pub residual_b: f64,
}

impl Solution {
    pub fn max_residual(&self) -> f64 {
        self.residual_a.max(self.residual_b)
    }

    pub fn to_field(&self, width: usize, height: usize) -> Result<ColorFieldLab> {
        ColorFieldLab::from_scaled(width, height, &self.a, &self.b)
    }
}

/// Builds `A` from a precomputed structure matrix `(I - Ŝ)ᵀ(I - Ŝ)`.
pub fn assemble_from_structure(
    structure: &DMatrix<f64>,
    c: &Constraints,
    options: &SystemOptions,
) -> Result<GcrfSystem> {
    let p = structure.nrows();
    if c.pixel_count() != p {
        return Err(GcrfError::DimensionMismatch(format!(
            "constraints cover {} pixels, similarity has {p}",
            c.pixel_count()
        )));
    }
    let mut a = structure.clone();
    for (i, &m) in c.mask.iter().enumerate() {
        if m {
            a[(i, i)] += c.beta;
        }
    }
    if let Some(eps) = options.ridge {
        for i in 0..p {
            a[(i, i)] += eps;
        }
    }
    symmetrize(&mut a);
    if c.active() == 0 && options.ridge.is_none() {
        // (I - Ŝ)1 = 0, so the constant field is a null direction
        return Err(GcrfError::SingularSystem(
            "edit mask is empty: no pixel is constrained, so the constant color field is undetermined".into(),
        ));
    }
    let factorization = Factorization::new(&a, options.strategy)?;
    Ok(GcrfSystem {
        rhs_a: c.rhs(&c.target_a),
        rhs_b: c.rhs(&c.target_b),
        constant_a: c.energy_constant(&c.target_a),
        constant_b: c.energy_constant(&c.target_b),
        matrix: a,
        factorization,
    })
}

/// `A = (I - Ŝ)ᵀ(I - Ŝ) + βHᵀH`, factorized once.
pub fn assemble(s: &SimilarityMatrix, c: &Constraints, options: &SystemOptions) -> Result<GcrfSystem> {
    assemble_from_structure(&s.structure_matrix(), c, options)
}

impl GcrfSystem {
    /// Wraps an explicit symmetric matrix and right-hand sides; the energy
    /// constant is taken as zero.
    pub fn from_parts(matrix: DMatrix<f64>, rhs_a: Vec<f64>, rhs_b: Vec<f64>, strategy: FactorStrategy) -> Result<Self> {
        let p = matrix.nrows();
        if !matrix.is_square() || rhs_a.len() != p || rhs_b.len() != p {
            return Err(GcrfError::DimensionMismatch(format!(
                "{}x{} matrix with right-hand sides of length {} and {}",
                matrix.nrows(),
                matrix.ncols(),
                rhs_a.len(),
                rhs_b.len()
            )));
        }
        let factorization = Factorization::new(&matrix, strategy)?;
        Ok(Self {
            matrix,
            rhs_a,
            rhs_b,
            constant_a: 0.0,
            constant_b: 0.0,
            factorization,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rhs(&self, channel: Channel) -> &[f64] {
        match channel {
            Channel::A => &self.rhs_a,
            Channel::B => &self.rhs_b,
        }
    }

    pub fn factor_kind(&self) -> FactorKind {
        self.factorization.kind()
    }

    /// `½xᵀAx - rhsᵀx + ½βαᵀHα`, equal to the G-CRF energy of `x`.
    pub fn energy(&self, x: &[f64], channel: Channel) -> f64 {
        let (rhs, constant) = match channel {
            Channel::A => (&self.rhs_a, self.constant_a),
            Channel::B => (&self.rhs_b, self.constant_b),
        };
        let xv = DVector::from_column_slice(x);
        let quad = xv.dot(&(&self.matrix * &xv));
        let lin: f64 = rhs.iter().zip(x).map(|(r, v)| r * v).sum();
        0.5 * quad - lin + constant
    }

    /// Solves `A x = rhs` against the cached factorization and checks the
    /// residual bound.
    pub fn solve_rhs(&self, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut x = self.factorization.solve(rhs)?;
        let mut res = self.relative_residual(&x, rhs);
        if res > RESIDUAL_BOUND {
            // one step of iterative refinement
            let xv = DVector::from_column_slice(&x);
            let r: Vec<f64> = (DVector::from_column_slice(rhs) - &self.matrix * xv).iter().copied().collect();
            let dx = self.factorization.solve(&r)?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            res = self.relative_residual(&x, rhs);
        }
        if res > RESIDUAL_BOUND {
            return Err(GcrfError::SingularSystem(format!(
                "relative residual {res:e} exceeds {RESIDUAL_BOUND:e}; the system is numerically singular"
            )));
        }
        Ok((x, res))
    }

    pub fn relative_residual(&self, x: &[f64], rhs: &[f64]) -> f64 {
        let r = DVector::from_column_slice(rhs) - &self.matrix * DVector::from_column_slice(x);
        let norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            r.norm()
        } else {
            r.norm() / norm
        }
    }

    /// Minimizer of the energy for both channels.
    pub fn solve(&self) -> Result<Solution> {
        let (a, residual_a) = self.solve_rhs(&self.rhs_a)?;
        let (b, residual_b) = self.solve_rhs(&self.rhs_b)?;
        Ok(Solution {
            a,
            b,
            residual_a,
            residual_b,
        })
    }

    /// Binary dump: magic, `P` (u32), `A` column-major, `rhs_a`, `rhs_b`.
    pub fn dump(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.magic(SYSTEM_MAGIC);
        w.u32(self.pixel_count() as u32);
        w.f64s(self.matrix.as_slice());
        w.f64s(&self.rhs_a);
        w.f64s(&self.rhs_b);
        w.buf
    }

    /// Reads a dump back as `(A, rhs_a, rhs_b)`.
    pub fn read_dump(bytes: &[u8]) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(SYSTEM_MAGIC)?;
        let p = r.u32()? as usize;
        let a = DMatrix::from_vec(p, p, r.f64s(p * p)?);
        let rhs_a = r.f64s(p)?;
        let rhs_b = r.f64s(p)?;
        r.finish()?;
        Ok((a, rhs_a, rhs_b))
    }
}

/// Energy evaluated directly from `Ŝ` and the constraints.
pub fn energy_direct(s: &SimilarityMatrix, c: &Constraints, x: &[f64], channel: Channel) -> f64 {
    let xv = DVector::from_column_slice(x);
    let smooth = (s.complement() * &xv).norm_squared();
    let target = match channel {
        Channel::A => &c.target_a,
        Channel::B => &c.target_b,
    };
    let data: f64 = c
        .mask
        .iter()
        .zip(x.iter().zip(target))
        .filter(|(m, _)| **m)
        .map(|(_, (xi, ti))| (xi - ti) * (xi - ti))
        .sum();
    0.5 * smooth + 0.5 * c.beta * data
}

/// `∂L/∂B` from `A (∂L/∂B) = ∂L/∂x`.
pub fn grad_unary(sys: &GcrfSystem, dl_dx: &[f64]) -> Result<Vec<f64>> {
    sys.factorization.solve(dl_dx)
}

/// `∂L/∂A = -½(g xᵀ + x gᵀ)` where `g` is the unary gradient and `x` the
/// forward solution.
pub fn grad_hoc(grad_b: &[f64], x: &[f64]) -> DMatrix<f64> {
    let g = DVector::from_column_slice(grad_b);
    let xv = DVector::from_column_slice(x);
    let outer = &g * xv.transpose();
    -(&outer + outer.transpose()) * 0.5
}

/// Backpropagates a symmetric `∂L/∂A` to the similarity matrix:
/// `∂L/∂Ŝ = -(I - Ŝ)(G + Gᵀ)`.
pub fn grad_similarity(s: &SimilarityMatrix, d_a: &DMatrix<f64>) -> DMatrix<f64> {
    -(s.complement() * (d_a + d_a.transpose()))
}

/// Full chain `∂L/∂A → ∂L/∂Ŝ → ∂L/∂(𝒜ᵀ𝒜) → ∂L/∂𝒜`, returned as `D x P`.
pub fn grad_embeddings(
    s: &SimilarityMatrix,
    emb: &PixelEmbeddings,
    temperature: f64,
    d_a: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d_s = grad_similarity(s, d_a);
    let d_k = softmax_rows_backward(s, &d_s, temperature);
    emb.values() * (&d_k + d_k.transpose())
}

/// Conjugate-gradient solve of one channel, used to cross-check the direct
/// solver.
pub fn cg_solve_oracle(sys: &GcrfSystem, channel: Channel) -> Result<CgOutcome> {
    let p = sys.pixel_count();
    conjugate_gradient(&sys.matrix, sys.rhs(channel), 1e-10, 10 * p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{build_similarity, softmax_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(p: usize) -> SimilarityMatrix {
        softmax_rows(&DMatrix::zeros(p, p), 1.0).unwrap()
    }

    fn two_pixel(beta: f64) -> (SimilarityMatrix, Constraints) {
        let c = Constraints::new(vec![true, false], vec![1.0, 0.0], vec![0.0, 0.0], beta).unwrap();
        (uniform(2), c)
    }

    fn random_similarity(rng: &mut impl Rng, d: usize, p: usize) -> (SimilarityMatrix, PixelEmbeddings) {
        let emb = PixelEmbeddings::new(DMatrix::from_fn(d, p, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        (build_similarity(&emb, 1.0).unwrap(), emb)
    }

    #[test]
    fn two_pixel_assembly() {
        let (s, c) = two_pixel(5.0);
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        // oracle: (I - S)ᵀ(I - S) with S = 0.5 everywhere is [[.5,-.5],[-.5,.5]]
        let m = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        let dense = m.transpose() * &m + DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 0.0]);
        let expect = DMatrix::from_row_slice(2, 2, &[5.5, -0.5, -0.5, 0.5]);
        assert!((sys.matrix() - &dense).amax() < 1e-15);
        assert!((sys.matrix() - &expect).amax() < 1e-15);
        assert_eq!(sys.rhs(Channel::A), &[5.0, 0.0]);
    }

    #[test]
    fn two_pixel_solve_matches_cramer() {
        let (s, c) = two_pixel(5.0);
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        // det = 5.5*0.5 - 0.25 = 2.5; x0 = 5*0.5/2.5, x1 = 5*0.5/2.5
        let det = 5.5 * 0.5 - 0.5 * 0.5;
        assert_eq!(det, 2.5);
        let x = sys.solve().unwrap();
        assert!((x.a[0] - 1.0).abs() < 1e-14 && (x.a[1] - 1.0).abs() < 1e-14);
        assert!(x.max_residual() <= RESIDUAL_BOUND);
    }

    #[test]
    fn two_pixel_energy() {
        let (s, c) = two_pixel(5.0);
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        assert!(sys.energy(&[1.0, 1.0], Channel::A).abs() < 1e-15);
        assert!((sys.energy(&[1.0, 0.0], Channel::A) - 0.25).abs() < 1e-15);
        assert!((energy_direct(&s, &c, &[1.0, 0.0], Channel::A) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_field_zero_energy() {
        let s = uniform(3);
        let c = Constraints::full(vec![0.0; 3], vec![0.0; 3], 2.0).unwrap();
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        assert_eq!(sys.energy(&[0.0; 3], Channel::A), 0.0);
    }

    #[test]
    fn empty_mask_is_singular() {
        let s = uniform(4);
        let c = Constraints::new(vec![false; 4], vec![0.0; 4], vec![0.0; 4], 3.0).unwrap();
        assert!(matches!(
            assemble(&s, &c, &SystemOptions::default()),
            Err(GcrfError::SingularSystem(_))
        ));
        // also singular at the factorization level
        assert!(matches!(
            Factorization::new(&s.structure_matrix(), FactorStrategy::Auto),
            Err(GcrfError::SingularSystem(_))
        ));
        // an explicit ridge makes it solvable
        let ridge = SystemOptions {
            ridge: Some(1e-8),
            ..Default::default()
        };
        assert!(assemble(&s, &c, &ridge).is_ok());
    }

    #[test]
    fn beta_only_touches_masked_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, _) = random_similarity(&mut rng, 3, 6);
        let mask = vec![true, false, false, true, false, true];
        let c1 = Constraints::new(mask.clone(), vec![0.1; 6], vec![0.2; 6], 1.0).unwrap();
        let c5 = Constraints { beta: 5.0, ..c1.clone() };
        let opts = SystemOptions::default();
        let diff = assemble(&s, &c5, &opts).unwrap().matrix() - assemble(&s, &c1, &opts).unwrap().matrix();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j && mask[i] { 4.0 } else { 0.0 };
                assert!((diff[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in [3, 10, 25] {
            let (s, _) = random_similarity(&mut rng, 4, p);
            let c = Constraints::full(vec![0.37; p], vec![-0.2; p], 5.0).unwrap();
            let x = assemble(&s, &c, &SystemOptions::default()).unwrap().solve().unwrap();
            assert!(x.a.iter().all(|v| (v - 0.37).abs() <= 1e-10));
            assert!(x.b.iter().all(|v| (v + 0.2).abs() <= 1e-10));
            assert!(energy_direct(&s, &c, &x.a, Channel::A) < 1e-18);
        }
    }

    #[test]
    fn solve_matches_gradient_descent_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (s, _) = random_similarity(&mut rng, 3, 6);
        let mask = vec![true, false, true, false, false, true];
        let ta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = Constraints::new(mask, ta, vec![0.0; 6], 5.0).unwrap();
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        let x = sys.solve().unwrap();
        // oracle: gradient descent on energy_direct using numerical gradients
        let mut z = vec![0.0; 6];
        let h = 1e-6;
        for _ in 0..20000 {
            let grad: Vec<f64> = (0..6)
                .map(|i| {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[i] += h;
                    zm[i] -= h;
                    (energy_direct(&s, &c, &zp, Channel::A) - energy_direct(&s, &c, &zm, Channel::A)) / (2.0 * h)
                })
                .collect();
            for (zi, gi) in z.iter_mut().zip(&grad) {
                *zi -= 0.15 * gi;
            }
        }
        for (zi, xi) in z.iter().zip(&x.a) {
            assert!((zi - xi).abs() < 1e-6, "{zi} vs {xi}");
        }
    }

    #[test]
    fn strict_convexity_under_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (s, _) = random_similarity(&mut rng, 2, 9);
        let mask: Vec<bool> = (0..9).map(|i| i % 3 == 0).collect();
        let c = Constraints::new(mask, vec![0.4; 9], vec![-0.1; 9], 5.0).unwrap();
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        let x = sys.solve().unwrap();
        let e0 = sys.energy(&x.a, Channel::A);
        for _ in 0..20 {
            let d: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let moved: Vec<f64> = x.a.iter().zip(&d).map(|(xi, di)| xi + 1e-3 * di / n).collect();
            assert!(sys.energy(&moved, Channel::A) >= e0);
        }
    }

    #[test]
    fn cholesky_and_lu_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, _) = random_similarity(&mut rng, 3, 12);
        let mask: Vec<bool> = (0..12).map(|i| i % 4 == 1).collect();
        let c = Constraints::new(mask, vec![0.3; 12], vec![0.6; 12], 1.0).unwrap();
        let chol = assemble(&s, &c, &SystemOptions { strategy: FactorStrategy::CholeskyOnly, ridge: None }).unwrap();
        let lu = assemble(&s, &c, &SystemOptions { strategy: FactorStrategy::LuOnly, ridge: None }).unwrap();
        assert_eq!(chol.factor_kind(), FactorKind::Cholesky);
        assert_eq!(lu.factor_kind(), FactorKind::Lu);
        let (xc, xl) = (chol.solve().unwrap(), lu.solve().unwrap());
        for (p, q) in xc.a.iter().zip(&xl.a) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_unary_identity_and_scaling() {
        let g = [0.3, -1.0, 2.0];
        let sys = GcrfSystem::from_parts(DMatrix::identity(3, 3), vec![0.0; 3], vec![0.0; 3], FactorStrategy::Auto).unwrap();
        assert_eq!(grad_unary(&sys, &g).unwrap(), g.to_vec());
        let scaled = GcrfSystem::from_parts(DMatrix::identity(3, 3) * 4.0, vec![0.0; 3], vec![0.0; 3], FactorStrategy::Auto).unwrap();
        let out = grad_unary(&scaled, &g).unwrap();
        for (o, gi) in out.iter().zip(&g) {
            assert!((o - gi / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_hoc_scalar_case() {
        // P = 1: x = B/A, L = x, so dL/dA = -B/A²
        let (a, b) = (2.5, 1.5);
        let sys = GcrfSystem::from_parts(DMatrix::from_element(1, 1, a), vec![b], vec![0.0], FactorStrategy::Auto).unwrap();
        let x = sys.solve().unwrap().a;
        let g = grad_unary(&sys, &[1.0]).unwrap();
        let d_a = grad_hoc(&g, &x);
        assert!((d_a[(0, 0)] + b / (a * a)).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, emb) = random_similarity(&mut rng, 2, 5);
        let d_a = grad_hoc(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(d_a, DMatrix::zeros(5, 5));
        assert_eq!(grad_embeddings(&s, &emb, 1.0, &d_a), DMatrix::zeros(2, 5));
    }

    #[test]
    fn temperature_halves_gram_gradient() {
        // same softmax output at (K, T) and (2K, 2T); the Gram gradient halves
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let s1 = softmax_rows(&k, 1.0).unwrap();
        let s2 = softmax_rows(&(&k * 2.0), 2.0).unwrap();
        assert!((s1.matrix() - s2.matrix()).amax() < 1e-15);
        let d_s = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let g1 = softmax_rows_backward(&s1, &d_s, 1.0);
        let g2 = softmax_rows_backward(&s2, &d_s, 2.0);
        assert!((&g1 * 0.5 - g2).amax() < 1e-15);
        // symbolic oracle at entry (0,1): dŜ01/dK01 = Ŝ01(1 - Ŝ01)/T
        let mut unit = DMatrix::zeros(4, 4);
        unit[(0, 1)] = 1.0;
        let s01 = s1.matrix()[(0, 1)];
        let grad = softmax_rows_backward(&s1, &unit, 1.0);
        assert!((grad[(0, 1)] - s01 * (1.0 - s01)).abs() < 1e-15);
        assert!((softmax_rows_backward(&s2, &unit, 2.0)[(0, 1)] - s01 * (1.0 - s01) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn channel_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (s, _) = random_similarity(&mut rng, 3, 8);
        let mask: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        let ta: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tb: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let opts = SystemOptions::default();
        let fwd = assemble(&s, &Constraints::new(mask.clone(), ta.clone(), tb.clone(), 5.0).unwrap(), &opts)
            .unwrap()
            .solve()
            .unwrap();
        let swapped = assemble(&s, &Constraints::new(mask, tb, ta, 5.0).unwrap(), &opts)
            .unwrap()
            .solve()
            .unwrap();
        assert_eq!(fwd.a, swapped.b);
        assert_eq!(fwd.b, swapped.a);
    }

    #[test]
    fn monotone_constraint_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let p = rng.random_range(4..16);
            let (s, _) = random_similarity(&mut rng, 3, p);
            let mut mask: Vec<bool> = (0..p).map(|_| rng.random_bool(0.4)).collect();
            mask[0] = true;
            let ta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut last = f64::INFINITY;
            for beta in [0.1, 1.0, 5.0, 25.0] {
                let c = Constraints::new(mask.clone(), ta.clone(), vec![0.0; p], beta).unwrap();
                let x = assemble(&s, &c, &SystemOptions::default()).unwrap().solve().unwrap();
                let viol: f64 = (0..p).filter(|&i| mask[i]).map(|i| (x.a[i] - ta[i]).powi(2)).sum();
                assert!(viol <= last + 1e-12, "beta {beta}: {viol} > {last}");
                last = viol;
            }
        }
    }

    #[test]
    fn cg_oracle_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (s, _) = random_similarity(&mut rng, 4, 20);
        let mask: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let ta: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = Constraints::new(mask, ta, vec![0.1; 20], 5.0).unwrap();
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        let direct = sys.solve().unwrap();
        let cg = cg_solve_oracle(&sys, Channel::A).unwrap();
        for (p, q) in cg.x.iter().zip(&direct.a) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn dump_layout() {
        let (s, c) = two_pixel(5.0);
        let sys = assemble(&s, &c, &SystemOptions::default()).unwrap();
        let bytes = sys.dump();
        assert_eq!(&bytes[..8], b"GCRFSYS1");
        assert_eq!(bytes.len(), 8 + 4 + 8 * (4 + 2 + 2));
        let (a, ra, rb) = GcrfSystem::read_dump(&bytes).unwrap();
        assert_eq!(&a, sys.matrix());
        assert_eq!(ra, vec![5.0, 0.0]);
        assert_eq!(rb, vec![0.0, 0.0]);
    }
}
