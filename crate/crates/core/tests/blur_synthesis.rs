mod common;

use deblurgan::blur::{apply_blur, make_linear_kernel, synthesize_pairs};
use deblurgan::imaging::{load_image, save_image, ImageTensor, RangeTag};
use deblurgan::metrics::psnr;
use deblurgan::scenes::random_scene;
use deblurgan::Error;

fn write_scenes(dir: &std::path::Path, n: usize) {
    for i in 0..n {
        save_image(&random_scene(48, 64, 40 + i as u64), dir.join(format!("s{i}.png"))).unwrap();
    }
}

#[test]
fn single_image_gives_one_distinct_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, out) = (tmp.path().join("src"), tmp.path().join("out"));
    write_scenes(&src, 1);
    assert_eq!(synthesize_pairs(&src, &out, (5, 9), 1).unwrap(), 1);
    let b = load_image(out.join("blur/s0.png")).unwrap();
    let s = load_image(out.join("sharp/s0.png")).unwrap();
    assert_eq!((b.height(), b.width()), (48, 64));
    assert_ne!(b, s);
    assert_eq!(s, load_image(src.join("s0.png")).unwrap());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    write_scenes(&src, 3);
    for out in ["a", "b"] {
        synthesize_pairs(&src, &tmp.path().join(out), (3, 11), 7).unwrap();
    }
    for sub in ["blur", "sharp"] {
        for i in 0..3 {
            let name = format!("{sub}/s{i}.png");
            let a = std::fs::read(tmp.path().join("a").join(&name)).unwrap();
            let b = std::fs::read(tmp.path().join("b").join(&name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn empty_directory_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let err = synthesize_pairs(tmp.path(), &tmp.path().join("out"), (5, 15), 0).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    assert!(err.to_string().contains("no decodable images"));
}

#[test]
fn eight_images_are_measurably_degraded() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, out) = (tmp.path().join("src"), tmp.path().join("out"));
    write_scenes(&src, 8);
    assert_eq!(synthesize_pairs(&src, &out, (5, 15), 3).unwrap(), 8);
    let mean = (0..8)
        .map(|i| {
            let b = load_image(out.join(format!("blur/s{i}.png"))).unwrap();
            let s = load_image(out.join(format!("sharp/s{i}.png"))).unwrap();
            psnr(&b, &s).unwrap()
        })
        .sum::<f64>()
        / 8.0;
    assert!(mean < 35.0, "mean PSNR {mean}");
}

#[test]
fn longer_kernels_degrade_monotonically() {
    for seed in 0..4 {
        let img = random_scene(64, 64, 900 + seed);
        for angle in [0.0, 45.0, 100.0] {
            let scores: Vec<f64> = [1, 3, 7, 15]
                .iter()
                .map(|&l| {
                    let k = make_linear_kernel(l, angle, l | 1).unwrap();
                    psnr(&apply_blur(&img, &k), &img).unwrap()
                })
                .collect();
            for w in scores.windows(2) {
                assert!(w[1] <= w[0] + 0.1, "seed {seed} angle {angle}: {scores:?}");
            }
        }
    }
}

#[test]
fn blur_preserves_mean_brightness() {
    // periodic content, so reflection at the borders does not bias the mean
    let (h, w) = (64, 64);
    let data = (0..h * w * 3)
        .map(|i| {
            let (y, x) = ((i / 3) / w, (i / 3) % w);
            (127.5 + 60.0 * (y as f64 * std::f64::consts::PI / 8.0).sin() * (x as f64 * std::f64::consts::PI / 16.0).cos()) as f32
        })
        .collect();
    let img = ImageTensor::new(h, w, RangeTag::Byte, data).unwrap();
    let mean = |t: &ImageTensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.data().len() as f64;
    for (l, a) in [(5, 0.0), (9, 30.0), (15, 90.0)] {
        let out = apply_blur(&img, &make_linear_kernel(l, a, l | 1).unwrap());
        assert!((mean(&out) - mean(&img)).abs() < 1e-3 * 255.0, "length {l}");
    }
}
