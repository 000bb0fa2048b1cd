mod common;

use deblurgan::dataset::discover;
use deblurgan::imaging::{save_image, ImageTensor, RangeTag};
use deblurgan::metrics::{evaluate, psnr, ssim, EvalReport, IdentityDeblurrer, MetricChannels, Stats};
use deblurgan::scenes::random_scene;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(img: &ImageTensor, sigma: f32, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img.data().iter().map(|&v| v + sigma * rng.gen_range(-1.0f32..1.0)).collect();
    ImageTensor::from_clamped(img.height(), img.width(), RangeTag::Byte, data).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(h, w, RangeTag::Byte, (0..h * w * 3).map(|_| rng.gen_range(0.0f32..=255.0)).collect()).unwrap()
}

#[test]
fn quality_falls_as_noise_grows() {
    let img = random_scene(64, 64, 8);
    let mut last = (f64::INFINITY, 1.0 + 1e-12);
    for sigma in [2.0, 8.0, 24.0, 64.0] {
        let n = noisy(&img, sigma, 1);
        let now = (psnr(&n, &img).unwrap(), ssim(&n, &img).unwrap());
        assert!(now.0 < last.0 && now.1 < last.1, "sigma {sigma}: {now:?} vs {last:?}");
        last = now;
    }
}

#[test]
fn identity_evaluation_excludes_infinite_psnr() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_dataset(tmp.path(), 3, 64, 0);
    let same = random_scene(64, 64, 77);
    save_image(&same, tmp.path().join("blur/same.png")).unwrap();
    save_image(&same, tmp.path().join("sharp/same.png")).unwrap();
    let ds = discover(tmp.path()).unwrap();
    let report = evaluate(&IdentityDeblurrer, &ds, MetricChannels::Rgb, serde_json::json!({"model": "identity"})).unwrap();
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.aggregates.psnr_infinite, 1);
    let finite: Vec<f64> = report.records.iter().map(|r| r.psnr_db).filter(|v| v.is_finite()).collect();
    assert_eq!(finite.len(), 3);
    assert_eq!(report.aggregates.psnr_db, Stats::from_values(finite.iter().copied()));
    let ssims: Vec<f64> = report.records.iter().map(|r| r.ssim).collect();
    let s = report.aggregates.ssim.unwrap();
    assert!((s.mean - ssims.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert_eq!(s.highest, ssims.iter().cloned().fold(f64::MIN, f64::max));
    assert_eq!(s.lowest, ssims.iter().cloned().fold(f64::MAX, f64::min));
    for r in &report.records {
        assert_eq!((r.psnr_db.to_bits(), r.ssim), (r.baseline_psnr_db.to_bits(), r.baseline_ssim));
    }

    let json = report.to_json().unwrap();
    assert!(json.contains("\"inf\""));
    assert_eq!(EvalReport::from_json(&json).unwrap(), report);
    assert!(report.to_string().contains("1 identical output(s)"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..24, w in 11usize..24, sigma in 0.5f32..80.0) {
        let a = random_image(h, w, seed);
        let b = noisy(&a, sigma, seed ^ 1);
        let p = psnr(&a, &b).unwrap();
        let s = ssim(&a, &b).unwrap();
        prop_assert!(p > 0.0);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stats_bracket_the_mean(values in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let s = Stats::from_values(values.iter().copied()).unwrap();
        prop_assert_eq!(s.count, values.len());
        prop_assert!(s.lowest <= s.mean + 1e-9 && s.mean <= s.highest + 1e-9);
    }
}
