use gcrf_core::edits::{propagate, Edit, EditSet, PropagateConfig, TEST_BETA};
use gcrf_core::image::{GrayImage, CHROMA_SCALE};

fn region_stats(values: &[f64], members: &[usize]) -> (f64, f64) {
    let n = members.len() as f64;
    let mean = members.iter().map(|&i| values[i]).sum::<f64>() / n;
    let var = members.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn two_regions_take_their_edit_colors() {
    let start = std::time::Instant::now();
    let gray = GrayImage::new(8, 8, (0..64).map(|i| if i % 8 < 4 { 0.2 } else { 0.8 }).collect()).unwrap();
    let left = Edit { row: 2, col: 1, a: 45.0, b: -25.0 };
    let right = Edit { row: 6, col: 5, a: -35.0, b: 60.0 };
    let edits = EditSet::new(vec![left, right], TEST_BETA);
    let cfg = PropagateConfig {
        grid_width: 8,
        grid_height: 8,
        ..PropagateConfig::default()
    };
    let sol = propagate(&gray, &edits, &cfg).unwrap().grid_solution;
    for (is_left, edit) in [(true, left), (false, right)] {
        let members: Vec<usize> = (0..64).filter(|i| (i % 8 < 4) == is_left).collect();
        for (channel, target) in [(&sol.a, edit.a), (&sol.b, edit.b)] {
            let (mean, std) = region_stats(channel, &members);
            assert!(std <= 1e-3, "std {std:e}");
            assert!((mean - target / CHROMA_SCALE).abs() <= 1e-2, "mean {mean} vs {}", target / CHROMA_SCALE);
        }
    }
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn replacing_colors_on_the_same_mask_is_linear() {
    let gray = GrayImage::new(8, 8, (0..64).map(|i| (i / 8) as f64 / 8.0).collect()).unwrap();
    let cfg = PropagateConfig {
        grid_width: 8,
        grid_height: 8,
        ..PropagateConfig::default()
    };
    let mk = |a: f64, b: f64| EditSet::new(vec![Edit { row: 0, col: 0, a, b }, Edit { row: 7, col: 7, a: b, b: a }], TEST_BETA);
    let x = propagate(&gray, &mk(20.0, -10.0), &cfg).unwrap().grid_solution;
    let y = propagate(&gray, &mk(40.0, -20.0), &cfg).unwrap().grid_solution;
    for i in 0..64 {
        assert!((2.0 * x.a[i] - y.a[i]).abs() < 1e-9);
        assert!((2.0 * x.b[i] - y.b[i]).abs() < 1e-9);
    }
}
