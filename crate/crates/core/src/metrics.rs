//! Reconstruction and diversity metrics.
//!
//! All chroma metrics run on the unit chroma scale of
//! [`ColorFieldLab::unit_channels`], so absolute values are specific to this
//! crate; compare orderings and trends, not raw numbers from elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};
use crate::image::{ColorFieldLab, Plane};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "mse of differently sized inputs");
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// `10 log10(1 / MSE)` for data on `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(x: &[f64], y: &[f64]) -> f64 {
    psnr_from_mse(mse(x, y))
}

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights).
pub fn ssim(x: &Plane, y: &Plane) -> Result<f64> {
    if x.width != y.width || x.height != y.height {
        return Err(GcrfError::DimensionMismatch(format!(
            "ssim of {}x{} and {}x{}",
            x.width, x.height, y.width, y.height
        )));
    }
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(GcrfError::TooSmall {
            width: x.width,
            height: x.height,
        });
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(x.height - SSIM_WINDOW) {
        for c0 in 0..=(x.width - SSIM_WINDOW) {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (a, b) = (x.get(r, c), y.get(r, c));
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// `N` colorizations of one image plus its ground truth.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<ColorFieldLab>,
    pub ground_truth: ColorFieldLab,
}

impl SampleSet {
    pub fn new(samples: Vec<ColorFieldLab>, ground_truth: ColorFieldLab) -> Result<Self> {
        if samples.is_empty() {
            return Err(GcrfError::InvalidInput("sample set is empty".into()));
        }
        if samples
            .iter()
            .any(|s| s.width != ground_truth.width || s.height != ground_truth.height)
        {
            return Err(GcrfError::DimensionMismatch("samples and ground truth differ in size".into()));
        }
        Ok(Self {
            samples,
            ground_truth,
        })
    }
}

/// Per-pixel minimum over samples of the squared chroma error (averaged over
/// the two channels), then averaged over pixels.
pub fn error_of_best(set: &SampleSet) -> f64 {
    let (ga, gb) = set.ground_truth.unit_channels();
    let per_sample: Vec<(Plane, Plane)> = set.samples.iter().map(|s| s.unit_channels()).collect();
    let p = ga.len();
    let mut total = 0.0;
    for i in 0..p {
        let best = per_sample
            .iter()
            .map(|(a, b)| 0.5 * ((a.data[i] - ga.data[i]).powi(2) + (b.data[i] - gb.data[i]).powi(2)))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    total / p as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Mean per-pixel variance across samples, averaged over channels.
    pub variance: f64,
    /// Mean SSIM over all unordered sample pairs, averaged over channels.
    pub mean_pairwise_ssim: f64,
}

pub fn diversity(set: &SampleSet) -> Result<Diversity> {
    let n = set.samples.len();
    if n < 2 {
        return Err(GcrfError::NeedTwoSamples);
    }
    let channels: Vec<(Plane, Plane)> = set.samples.iter().map(|s| s.unit_channels()).collect();
    let p = channels[0].0.len();
    let mut var_total = 0.0;
    for i in 0..p {
        for pick in [|c: &(Plane, Plane), i: usize| c.0.data[i], |c: &(Plane, Plane), i: usize| c.1.data[i]] {
            // offsets from the first sample keep identical samples at exactly 0
            let base = pick(&channels[0], i);
            let (mut s1, mut s2) = (0.0, 0.0);
            for c in &channels {
                let d = pick(c, i) - base;
                s1 += d;
                s2 += d * d;
            }
            let mean = s1 / n as f64;
            var_total += (s2 / n as f64 - mean * mean).max(0.0);
        }
    }
    let mut ssim_total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let sa = ssim(&channels[i].0, &channels[j].0)?;
            let sb = ssim(&channels[i].1, &channels[j].1)?;
            ssim_total += 0.5 * (sa + sb);
            pairs += 1;
        }
    }
    Ok(Diversity {
        variance: var_total / (2 * p) as f64,
        mean_pairwise_ssim: ssim_total / pairs as f64,
    })
}

/// One evaluated point of a controllability sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrPoint {
    pub revealed: usize,
    pub psnr_rgb: f64,
    pub psnr_lab: f64,
}

/// Per-image metrics report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image: String,
    pub psnr: Vec<PsnrPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pairwise_ssim: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::CHROMA_SCALE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut impl Rng, w: usize, h: usize) -> Plane {
        Plane::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_field(rng: &mut impl Rng, w: usize, h: usize) -> ColorFieldLab {
        let p = w * h;
        ColorFieldLab::new(
            w,
            h,
            (0..p).map(|_| rng.random_range(-80.0..80.0)).collect(),
            (0..p).map(|_| rng.random_range(-80.0..80.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&[0.3, 0.4], &[0.3, 0.4]), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.0001) - 40.0).abs() < 1e-12);
        assert!((psnr(&[0.0], &[0.1]) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 12, 10);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let c = Plane::filled(8, 8, 0.5);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_pair_is_luminance_term() {
        let (x, y) = (Plane::filled(9, 8, 0.2), Plane::filled(9, 8, 0.8));
        let expect = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.2 * 0.2 + 0.8 * 0.8 + SSIM_C1);
        assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_too_small() {
        let x = Plane::filled(7, 8, 0.1);
        assert!(matches!(ssim(&x, &x), Err(GcrfError::TooSmall { .. })));
    }

    #[test]
    fn eob_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_field(&mut rng, 8, 8);
        let other = random_field(&mut rng, 8, 8);
        let set = SampleSet::new(vec![other.clone(), gt.clone()], gt.clone()).unwrap();
        assert_eq!(error_of_best(&set), 0.0);

        let delta = 11.0;
        let plus = ColorFieldLab::new(8, 8, gt.a.iter().map(|v| v + delta).collect(), gt.b.iter().map(|v| v + delta).collect()).unwrap();
        let minus = ColorFieldLab::new(8, 8, gt.a.iter().map(|v| v - delta).collect(), gt.b.iter().map(|v| v - delta).collect()).unwrap();
        let unit = delta / CHROMA_SCALE / 2.0;
        let eob = error_of_best(&SampleSet::new(vec![plus, minus], gt).unwrap());
        assert!((eob - unit * unit).abs() < 1e-12);
    }

    #[test]
    fn eob_brute_force_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_field(&mut rng, 8, 8);
        let samples: Vec<_> = (0..3).map(|_| random_field(&mut rng, 8, 8)).collect();
        let eob = error_of_best(&SampleSet::new(samples.clone(), gt.clone()).unwrap());
        // brute force in native units, rescaled
        let k = 1.0 / (2.0 * CHROMA_SCALE);
        let mut total = 0.0;
        for i in 0..64 {
            let mut best = f64::INFINITY;
            for s in &samples {
                let e = 0.5 * (((s.a[i] - gt.a[i]) * k).powi(2) + ((s.b[i] - gt.b[i]) * k).powi(2));
                best = best.min(e);
            }
            total += best;
        }
        assert!((eob - total / 64.0).abs() < 1e-12);
        for s in &samples {
            let single = error_of_best(&SampleSet::new(vec![s.clone()], gt.clone()).unwrap());
            assert!(eob <= single);
        }
    }

    #[test]
    fn diversity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_field(&mut rng, 8, 8);
        let same = diversity(&SampleSet::new(vec![x.clone(), x.clone(), x.clone()], x.clone()).unwrap()).unwrap();
        assert_eq!(same.variance, 0.0);
        assert_eq!(same.mean_pairwise_ssim, 1.0);

        let shift = 22.0;
        let y = ColorFieldLab::new(8, 8, x.a.iter().map(|v| v + shift).collect(), x.b.iter().map(|v| v + shift).collect()).unwrap();
        let d = diversity(&SampleSet::new(vec![x.clone(), y], x.clone()).unwrap()).unwrap();
        let half = shift / 2.0 / (2.0 * CHROMA_SCALE);
        assert!((d.variance - half * half).abs() < 1e-12);

        assert!(matches!(diversity(&SampleSet::new(vec![x.clone()], x).unwrap()), Err(GcrfError::NeedTwoSamples)));
    }

    #[test]
    fn diversity_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<_> = (0..3).map(|_| random_field(&mut rng, 9, 8)).collect();
        let d = diversity(&SampleSet::new(s.clone(), s[0].clone()).unwrap()).unwrap();
        let u: Vec<_> = s.iter().map(|f| f.unit_channels()).collect();
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let expect = pairs
            .iter()
            .map(|&(i, j)| 0.5 * (ssim(&u[i].0, &u[j].0).unwrap() + ssim(&u[i].1, &u[j].1).unwrap()))
            .sum::<f64>()
            / 3.0;
        assert!((d.mean_pairwise_ssim - expect).abs() < 1e-12);
    }

    #[test]
    fn eob_monotone_when_appending() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_field(&mut rng, 8, 8);
        let mut samples = Vec::new();
        let mut last = f64::INFINITY;
        for _ in 0..6 {
            samples.push(random_field(&mut rng, 8, 8));
            let e = error_of_best(&SampleSet::new(samples.clone(), gt.clone()).unwrap());
            assert!(e <= last);
            last = e;
        }
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_plane(&mut rng, 10, 9);
            let y = random_plane(&mut rng, 10, 9);
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn psnr_decreasing_in_mse(a in 1e-8f64..1.0, b in 1e-8f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a) > psnr_from_mse(b));
        }
    }
}
