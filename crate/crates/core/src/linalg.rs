//! Dense factorizations for the symmetric positive definite G-CRF system,
//! and a conjugate-gradient solver kept as an independent cross-check.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{GcrfError, Result};

/// Pivots smaller than this fraction of `max |A|` are treated as rank
/// deficiency.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of factorizations performed on the current thread.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Cholesky,
    Lu,
}

/// Which factorization to try. `Auto` attempts Cholesky and falls back to
/// LU when a pivot fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorStrategy {
    #[default]
    Auto,
    CholeskyOnly,
    LuOnly,
}

#[derive(Debug, Clone)]
enum Factors {
    /// Lower factor `L` with `A = LLᵀ`, column-major.
    Cholesky(Vec<f64>),
    /// Packed unit-lower `L` and upper `U`, with the row permutation.
    Lu { lu: Vec<f64>, perm: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Factorization {
    n: usize,
    factors: Factors,
}

impl Factorization {
    pub fn new(a: &DMatrix<f64>, strategy: FactorStrategy) -> Result<Self> {
        if !a.is_square() {
            return Err(GcrfError::DimensionMismatch(format!(
                "cannot factor a {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GcrfError::NonFinite("system matrix"));
        }
        FACTORIZATIONS.with(|c| c.set(c.get() + 1));
        let n = a.nrows();
        let scale = a.amax();
        if scale == 0.0 {
            return Err(GcrfError::SingularSystem("system matrix is identically zero".into()));
        }
        let tol = PIVOT_TOLERANCE * scale;
        let factors = match strategy {
            FactorStrategy::CholeskyOnly => Factors::Cholesky(cholesky(a, tol)?),
            FactorStrategy::LuOnly => lu(a, tol)?,
            FactorStrategy::Auto => match cholesky(a, tol) {
                Ok(r) => Factors::Cholesky(r),
                Err(_) => lu(a, tol)?,
            },
        };
        Ok(Self { n, factors })
    }

    pub fn kind(&self) -> FactorKind {
        match self.factors {
            Factors::Cholesky(_) => FactorKind::Cholesky,
            Factors::Lu { .. } => FactorKind::Lu,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(GcrfError::DimensionMismatch(format!(
                "right-hand side has {} entries, system has {}",
                rhs.len(),
                self.n
            )));
        }
        let n = self.n;
        Ok(match &self.factors {
            Factors::Cholesky(l) => {
                let mut y = rhs.to_vec();
                // L y = b
                for j in 0..n {
                    y[j] /= l[j * n + j];
                    let yj = y[j];
                    for (yi, lij) in y[j + 1..].iter_mut().zip(&l[j * n + j + 1..(j + 1) * n]) {
                        *yi -= lij * yj;
                    }
                }
                // Lᵀ x = y
                for j in (0..n).rev() {
                    let dot: f64 = l[j * n + j + 1..(j + 1) * n].iter().zip(&y[j + 1..]).map(|(a, b)| a * b).sum();
                    y[j] = (y[j] - dot) / l[j * n + j];
                }
                y
            }
            Factors::Lu { lu, perm } => {
                let mut y: Vec<f64> = perm.iter().map(|&p| rhs[p]).collect();
                for j in 0..n {
                    let yj = y[j];
                    let col = &lu[j * n..(j + 1) * n];
                    for i in (j + 1)..n {
                        y[i] -= col[i] * yj;
                    }
                }
                for j in (0..n).rev() {
                    let col = &lu[j * n..(j + 1) * n];
                    y[j] /= col[j];
                    let yj = y[j];
                    for i in 0..j {
                        y[i] -= col[i] * yj;
                    }
                }
                y
            }
        })
    }
}

fn cholesky(a: &DMatrix<f64>, tol: f64) -> Result<Vec<f64>> {
    // left-looking, lower factor; the updates are contiguous axpys
    let n = a.nrows();
    let mut l = vec![0.0; n * n];
    let mut v = vec![0.0; n];
    for j in 0..n {
        let v = &mut v[j..];
        v.copy_from_slice(&a.as_slice()[j * n + j..(j + 1) * n]);
        for k in 0..j {
            let ljk = l[k * n + j];
            if ljk != 0.0 {
                for (vi, lik) in v.iter_mut().zip(&l[k * n + j..(k + 1) * n]) {
                    *vi -= ljk * lik;
                }
            }
        }
        let pivot = v[0];
        if !(pivot > tol) {
            return Err(GcrfError::SingularSystem(format!(
                "Cholesky pivot {pivot:e} at row {j} is below {tol:e}"
            )));
        }
        let d = pivot.sqrt();
        for (dst, vi) in l[j * n + j..(j + 1) * n].iter_mut().zip(v.iter()) {
            *dst = vi / d;
        }
    }
    Ok(l)
}

fn lu(a: &DMatrix<f64>, tol: f64) -> Result<Factors> {
    let n = a.nrows();
    let mut lu = a.as_slice().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut p, mut best) = (k, lu[k * n + k].abs());
        for i in (k + 1)..n {
            let v = lu[k * n + i].abs();
            if v > best {
                p = i;
                best = v;
            }
        }
        if !(best > tol) {
            return Err(GcrfError::SingularSystem(format!(
                "LU pivot {best:e} at column {k} is below {tol:e}"
            )));
        }
        if p != k {
            perm.swap(p, k);
            for j in 0..n {
                lu.swap(j * n + p, j * n + k);
            }
        }
        let pivot = lu[k * n + k];
        for i in (k + 1)..n {
            lu[k * n + i] /= pivot;
        }
        let (head, tail) = lu.split_at_mut((k + 1) * n);
        let lcol = &head[k * n..];
        for col in tail.chunks_mut(n) {
            let ukj = col[k];
            if ukj != 0.0 {
                for i in (k + 1)..n {
                    col[i] -= lcol[i] * ukj;
                }
            }
        }
    }
    Ok(Factors::Lu { lu, perm })
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Plain conjugate gradient from a zero initial guess.
///
/// Stops once `‖Ax - b‖ / ‖b‖ <= tol`. Non-positive curvature or running
/// out of iterations is reported as [`GcrfError::NoConvergence`].
pub fn conjugate_gradient(a: &DMatrix<f64>, b: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome> {
    let n = b.len();
    if a.nrows() != n || a.ncols() != n {
        return Err(GcrfError::DimensionMismatch(format!(
            "{}x{} matrix with {n}-vector",
            a.nrows(),
            a.ncols()
        )));
    }
    let b = DVector::from_column_slice(b);
    let b_norm = b.norm();
    let mut x = DVector::zeros(n);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: x.as_slice().to_vec(),
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    for it in 1..=max_iter {
        let ap = a * &p;
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return Err(GcrfError::NoConvergence {
                iterations: it,
                residual: rs.sqrt() / b_norm,
            });
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() / b_norm <= tol {
            // confirm against the true residual, not the recurrence
            let true_res = (&b - a * &x).norm() / b_norm;
            if true_res <= tol {
                return Ok(CgOutcome {
                    x: x.as_slice().to_vec(),
                    iterations: it,
                    relative_residual: true_res,
                });
            }
            r = &b - a * &x;
            p = r.clone();
            rs = r.dot(&r);
            continue;
        }
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    Err(GcrfError::NoConvergence {
        iterations: max_iter,
        residual: (&b - a * &x).norm() / b_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        m.tr_mul(&m) + DMatrix::identity(n, n) * 0.5
    }

    fn residual(a: &DMatrix<f64>, x: &[f64], b: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        let b = DVector::from_column_slice(b);
        (a * x - &b).norm() / b.norm()
    }

    #[test]
    fn both_paths_solve_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 17, 40] {
            let a = random_spd(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let chol = Factorization::new(&a, FactorStrategy::CholeskyOnly).unwrap();
            let lu = Factorization::new(&a, FactorStrategy::LuOnly).unwrap();
            assert_eq!(chol.kind(), FactorKind::Cholesky);
            assert_eq!(lu.kind(), FactorKind::Lu);
            let (xc, xl) = (chol.solve(&b).unwrap(), lu.solve(&b).unwrap());
            assert!(residual(&a, &xc, &b) < 1e-12);
            assert!(residual(&a, &xl, &b) < 1e-12);
        }
    }

    #[test]
    fn auto_falls_back_to_lu_for_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let f = Factorization::new(&a, FactorStrategy::Auto).unwrap();
        assert_eq!(f.kind(), FactorKind::Lu);
        let x = f.solve(&[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_detected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        for s in [FactorStrategy::Auto, FactorStrategy::CholeskyOnly, FactorStrategy::LuOnly] {
            assert!(matches!(Factorization::new(&a, s), Err(GcrfError::SingularSystem(_))));
        }
        assert!(Factorization::new(&DMatrix::zeros(3, 3), FactorStrategy::Auto).is_err());
    }

    #[test]
    fn counter_increments_per_factorization() {
        let before = factorization_count();
        let a = DMatrix::<f64>::identity(3, 3);
        let f = Factorization::new(&a, FactorStrategy::Auto).unwrap();
        f.solve(&[1.0, 2.0, 3.0]).unwrap();
        f.solve(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(factorization_count(), before + 1);
    }

    #[test]
    fn cg_identity_one_iteration() {
        let a = DMatrix::<f64>::identity(6, 6);
        let b = [1.0, -2.0, 3.0, 0.5, 0.0, 7.0];
        let out = conjugate_gradient(&a, &b, 1e-10, 60).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, b.to_vec());
    }

    #[test]
    fn cg_agrees_with_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..30);
            let a = random_spd(&mut rng, n);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cg = conjugate_gradient(&a, &b, 1e-12, 10 * n).unwrap();
            let direct = Factorization::new(&a, FactorStrategy::Auto).unwrap().solve(&b).unwrap();
            let diff = cg.x.iter().zip(&direct).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-8, "diff {diff}");
        }
    }

    #[test]
    fn cg_flags_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = conjugate_gradient(&a, &[1.0, 1.0], 1e-10, 20);
        assert!(matches!(r, Err(GcrfError::NoConvergence { .. })));
    }
}
