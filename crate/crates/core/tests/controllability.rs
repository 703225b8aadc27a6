use gcrf_core::eval::{controllability_trend, TrendConfig, TREND_GAP_DB};
use gcrf_core::metrics::PSNR_CAP_DB;

#[test]
fn psnr_rises_with_revealed_points() {
    let start = std::time::Instant::now();
    let report = controllability_trend(&TrendConfig::default()).unwrap();
    for p in &report.mean {
        println!("|H|={:>3}  rgb {:.2} dB  lab {:.2} dB", p.revealed, p.psnr_rgb, p.psnr_lab);
    }
    assert_eq!(report.mean.iter().map(|p| p.revealed).collect::<Vec<_>>(), vec![10, 50, 100]);
    for gap in report.gaps() {
        assert!(gap >= TREND_GAP_DB, "gaps {:?}", report.gaps());
    }
    assert_eq!(report.constant_image_psnr, PSNR_CAP_DB);
    assert!(start.elapsed().as_secs() < 120);
}
