use gcrf_core::image::{ColorFieldLab, Plane};
use gcrf_core::metrics::{diversity, error_of_best, ssim, SampleSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorFieldLab {
    let mut channel = || (0..w * h).map(|_| rng.random_range(-90.0..90.0)).collect();
    ColorFieldLab::new(w, h, channel(), channel()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_of_a_plane_with_itself_is_one(seed in any::<u64>(), w in 8usize..20, h in 8usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Plane::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ground_truth_among_samples_gives_zero_error(seed in any::<u64>(), n in 1usize..6, at in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = field(&mut rng, 8, 8);
        let mut samples: Vec<_> = (0..n).map(|_| field(&mut rng, 8, 8)).collect();
        samples.insert(at.min(n), gt.clone());
        prop_assert_eq!(error_of_best(&SampleSet::new(samples, gt).unwrap()), 0.0);
    }

    #[test]
    fn identical_samples_have_zero_variance(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = field(&mut rng, 8, 8);
        let gt = field(&mut rng, 8, 8);
        let d = diversity(&SampleSet::new(vec![s; n], gt).unwrap()).unwrap();
        prop_assert_eq!(d.variance, 0.0);
        prop_assert_eq!(d.mean_pairwise_ssim, 1.0);
    }

    #[test]
    fn error_of_best_never_grows_with_more_samples(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = field(&mut rng, 8, 8);
        let samples: Vec<_> = (0..8).map(|_| field(&mut rng, 8, 8)).collect();
        let mut last = f64::INFINITY;
        for k in 1..=samples.len() {
            let e = error_of_best(&SampleSet::new(samples[..k].to_vec(), gt.clone()).unwrap());
            prop_assert!(e <= last);
            last = e;
        }
    }
}
