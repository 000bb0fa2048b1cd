//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p deblurgan-cli --test acceptance`. All runs use the
//! seeded-random feature extractor, so no network access or weights are needed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use deblurgan::blur::{apply_blur, make_linear_kernel};
use deblurgan::dataset::discover;
use deblurgan::discriminator::Discriminator;
use deblurgan::generator::Generator;
use deblurgan::imaging::{save_image, ImageTensor, RangeTag};
use deblurgan::losses::{
    adversarial_value, build_feature_extractor, discriminator_loss, discriminator_loss_grad, generator_adversarial_loss,
    generator_adversarial_loss_grad, perceptual_loss, perceptual_loss_with_grad, ExtractorSource,
};
use deblurgan::metrics::{evaluate, psnr, ssim, EvalReport, MetricChannels};
use deblurgan::nn::Tensor;
use deblurgan::scenes::random_scene;
use deblurgan::trainer::{fit, fit_from, GeneratorDeblurrer, RunOptions, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------- architecture

fn architecture() -> Outcome {
    let g = Generator::<f32>::build(Default::default(), 0).map_err(|e| e.to_string())?;
    let d = Discriminator::<f32>::build(Default::default(), 1).map_err(|e| e.to_string())?;
    let (gc, dc) = (g.built_counts(), d.built_counts());
    check!(gc.conv_layers == 24, "generator has {} conv layers", gc.conv_layers);
    check!(dc.conv_layers == 6, "discriminator has {} conv layers", dc.conv_layers);
    let mut blocks = std::collections::BTreeSet::new();
    g.visit_params(&mut |name, _| {
        if let Some(rest) = name.strip_prefix("block") {
            blocks.insert(rest.split('.').next().unwrap_or_default().to_string());
        }
    });
    check!(blocks.len() == 9, "generator has {} resnet blocks", blocks.len());
    check!(
        d.arch().conv_specs().iter().all(|s| s.kernel == 4),
        "discriminator kernels are not all 4x4"
    );
    let total = gc.params + dc.params;
    for (what, n, target) in [("generator", gc.params, 11.40e6), ("discriminator", dc.params, 3.10e6), ("total", total, 14.5e6)] {
        check!((n as f64 - target).abs() <= 0.15 * target, "{what} has {n} params, target {target}");
    }
    Ok(format!("G {} / D {} / total {} params", gc.params, dc.params, total))
}

// ---------------------------------------------------------------- metrics

fn gaussian_2d() -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; 11]; 11];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = w.iter().flatten().sum();
    w.iter_mut().flatten().for_each(|v| *v /= s);
    w
}

/// Window-by-window SSIM, averaged over positions and then channels.
fn naive_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let g = gaussian_2d();
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut per_channel = Vec::new();
    for c in 0..3 {
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let at = |img: &ImageTensor, i: usize, j: usize| img.get(y + i, x + j, c) as f64;
                let mut mu = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        mu.0 += g[i][j] * at(a, i, j);
                        mu.1 += g[i][j] * at(b, i, j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let (da, db) = (at(a, i, j) - mu.0, at(b, i, j) - mu.1);
                        va += g[i][j] * da * da;
                        vb += g[i][j] * db * db;
                        cov += g[i][j] * da * db;
                    }
                }
                total += (2.0 * mu.0 * mu.1 + c1) * (2.0 * cov + c2) / ((mu.0 * mu.0 + mu.1 * mu.1 + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel.push(total / count as f64);
    }
    per_channel.iter().sum::<f64>() / 3.0
}

fn image(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> ImageTensor {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(f(y, x, c) as f32);
            }
        }
    }
    ImageTensor::new(h, w, RangeTag::Byte, data).unwrap()
}

fn metric_oracles() -> Outcome {
    let flat = |v: f64| image(16, 16, move |_, _, _| v);
    let p0 = psnr(&flat(0.0), &flat(255.0)).unwrap();
    check!(p0 == 0.0, "PSNR(0, 255) = {p0}");
    let p16 = psnr(&flat(0.0), &flat(16.0)).unwrap();
    let expected = 20.0 * (255.0f64 / 16.0).log10();
    check!((p16 - expected).abs() < 1e-9 && (p16 - 24.048).abs() < 1e-3, "PSNR(0, 16) = {p16}");
    check!(psnr(&flat(9.0), &flat(9.0)).unwrap() == f64::INFINITY, "identical images must give +inf");

    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = rng.gen_range(2.0..60.0);
        let a = if seed % 2 == 0 {
            image(64, 64, |_, _, _| rng.gen_range(0.0..=255.0))
        } else {
            random_scene(64, 64, seed)
        };
        let b = image(64, 64, |y, x, c| (a.get(y, x, c) as f64 + sigma * rng.gen_range(-1.0..1.0)).clamp(0.0, 255.0));
        let (fast, slow) = (ssim(&a, &b).unwrap(), naive_ssim(&a, &b));
        worst = worst.max((fast - slow).abs());
        check!((fast - slow).abs() < 1e-4, "pair {seed}: SSIM {fast} vs oracle {slow}");
        check!(ssim(&a, &a).unwrap() == 1.0, "pair {seed}: self-SSIM is not 1");
    }

    // frozen output of an independent reference implementation
    let smooth = |y: usize, x: usize, c: usize| (127.5 + 100.0 * (y as f64 / 5.0 + c as f64).sin() * (x as f64 / 7.0).cos()).round_ties_even();
    let a = image(64, 64, smooth);
    let b = image(64, 64, |y, x, c| smooth(y, x, c) + ((y * 3 + x * 7 + c * 11) % 17) as f64 - 8.0);
    let s = ssim(&a, &b).unwrap();
    check!((s - 0.956_355_880_329_057).abs() < 1e-4, "reference SSIM {s}");
    Ok(format!("max |SSIM - oracle| = {worst:.2e} over 20 pairs"))
}

// ---------------------------------------------------------------- losses

fn wave(shape: [usize; 4], phase: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| 0.8 * ((i as f64) * 0.37 + phase).sin()).collect())
}

fn loss_correctness() -> Outcome {
    let v = adversarial_value(&[0.5], &[0.5]).unwrap();
    check!(rel_close(v, -4f64.ln(), 1e-6), "V(0.5, 0.5) = {v}");
    let v = adversarial_value(&[0.9, 0.8], &[0.1, 0.3]).unwrap();
    let hand = (0.9f64.ln() + 0.8f64.ln()) / 2.0 + (0.9f64.ln() + 0.7f64.ln()) / 2.0;
    check!(rel_close(v, hand, 1e-6), "V example {v} vs {hand}");
    let g = generator_adversarial_loss(&[0.5]).unwrap();
    check!(rel_close(g, 2f64.ln(), 1e-6), "generator loss at 0.5 = {g}");

    let mut fx = build_feature_extractor::<f64>(ExtractorSource::SeededRandom { seed: 5 }).map_err(|e| e.to_string())?;
    let (t, p) = (wave([2, 3, 8, 8], 0.3), wave([2, 3, 8, 8], 1.9));
    let (ft, fp) = (fx.features(&t), fx.features(&p));
    let oracle = ft.data().iter().zip(fp.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / ft.len() as f64;
    let loss = perceptual_loss(&fx, &t, &p).unwrap();
    check!(rel_close(loss, oracle, 1e-6), "perceptual {loss} vs oracle {oracle}");
    check!(perceptual_loss(&fx, &t, &t).unwrap() == 0.0, "perceptual loss of identical inputs is not 0");

    let (_, grad) = perceptual_loss_with_grad(&mut fx, &t, &p).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in (0..p.len()).step_by(7) {
        let (mut up, mut down) = (p.clone(), p.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let fd = (perceptual_loss(&fx, &t, &up).unwrap() - perceptual_loss(&fx, &t, &down).unwrap()) / (2.0 * h);
        let an = grad.data()[i];
        if fd.abs().max(an.abs()) > 1e-9 {
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
            check!(rel_close(fd, an, 1e-3), "perceptual gradient {i}: analytic {an} vs numeric {fd}");
        }
    }

    let (r, f) = ([0.9, 0.35, 0.6, 0.12], [0.2, 0.75, 0.5]);
    let (gr, gf) = discriminator_loss_grad(&r, &f).unwrap();
    let gg = generator_adversarial_loss_grad(&f).unwrap();
    let fd = |v: &[f64], i: usize, l: &dyn Fn(&[f64]) -> f64| {
        let (mut a, mut b) = (v.to_vec(), v.to_vec());
        a[i] += 1e-6;
        b[i] -= 1e-6;
        (l(&a) - l(&b)) / 2e-6
    };
    for i in 0..r.len() {
        let n = fd(&r, i, &|v| discriminator_loss(v, &f).unwrap());
        check!(rel_close(n, gr[i], 1e-3), "d_loss gradient wrt d_real[{i}]: {} vs {n}", gr[i]);
    }
    for i in 0..f.len() {
        let n = fd(&f, i, &|v| discriminator_loss(&r, v).unwrap());
        check!(rel_close(n, gf[i], 1e-3), "d_loss gradient wrt d_fake[{i}]: {} vs {n}", gf[i]);
        let n = fd(&f, i, &|v| generator_adversarial_loss(v).unwrap());
        check!(rel_close(n, gg[i], 1e-3), "g_adv gradient wrt d_fake[{i}]: {} vs {n}", gg[i]);
    }
    Ok(format!("worst perceptual gradient relative error {worst:.1e}"))
}

fn value_function_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let n = rng.gen_range(1..16);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let (v, d) = (adversarial_value(&r, &f).unwrap(), discriminator_loss(&r, &f).unwrap());
        check!(d == -v, "batch {trial}: d_loss {d} is not -V {v}");
        check!(v < 0.0, "batch {trial}: V = {v} is not negative");
    }
    let best = adversarial_value(&[1.0 - 1e-9], &[1e-9]).unwrap();
    check!(best > -1e-6, "V at the optimum is {best}");
    for a in 1..20 {
        for b in 1..20 {
            let (pr, pf) = (a as f64 / 20.0, b as f64 / 20.0);
            let (gr, gf) = discriminator_loss_grad(&[pr], &[pf]).unwrap();
            let gg = generator_adversarial_loss_grad(&[pf]).unwrap();
            check!(gr[0] < 0.0 && gf[0] > 0.0, "d_loss gradient signs wrong at ({pr}, {pf})");
            check!(gg[0] < 0.0, "g_adv gradient sign wrong at {pf}");
            let v = adversarial_value(&[pr], &[pf]).unwrap();
            check!(v <= best, "V({pr}, {pf}) = {v} exceeds the optimum");
        }
    }
    Ok("100 batches and a 19x19 grid".into())
}

// ---------------------------------------------------------------- training

fn write_pairs(root: &Path, n: usize, size: usize, length: usize, seed: u64) {
    for i in 0..n {
        let sharp = random_scene(size, size, seed + i as u64);
        let k = make_linear_kernel(length, 40.0 * i as f64, length | 1).unwrap();
        let name = format!("pair{i}.png");
        save_image(&apply_blur(&sharp, &k), root.join("blur").join(&name)).unwrap();
        save_image(&sharp, root.join("sharp").join(&name)).unwrap();
    }
}

fn desk_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("epochs", epochs.to_string()),
        ("batch_size", "2".into()),
        ("patch_size", "64".into()),
        ("learning_rate", "0.0001".into()),
        ("bn_momentum", "0.9".into()),
    ] {
        c.set(k, &v).unwrap();
    }
    c
}

fn overfit() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    write_pairs(tmp.path(), 4, 64, 9, 100);
    let ds = discover(tmp.path()).map_err(|e| e.to_string())?;
    let state = fit(&ds, None, desk_config(100), &mut RunOptions::default()).map_err(|e| e.to_string())?;
    check!(state.step == 200, "ran {} steps", state.step);
    let (first, last) = (state.epochs[0].g_perc, state.epochs.last().unwrap().g_perc);
    check!(last <= 0.5 * first, "g_perc fell only from {first:.4} to {last:.4}");
    let report = evaluate(&GeneratorDeblurrer(&state.generator), &ds, MetricChannels::Rgb, serde_json::Value::Null)
        .map_err(|e| e.to_string())?;
    let better = report.records.iter().filter(|r| r.psnr_db > r.baseline_psnr_db).count();
    check!(better >= 3, "only {better}/4 pairs beat the blurred input");
    Ok(format!(
        "g_perc {first:.4} -> {last:.4}; {better}/4 pairs improved (mean {:.2} dB vs {:.2} dB)",
        report.aggregates.psnr_db.unwrap().mean,
        report.aggregates.baseline_psnr_db.unwrap().mean
    ))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_deblurgan"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, run, report) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("report.json"));
    let out = cli(&["synth", "--scenes", "8", "--scene-size", "64", "--out", &s(&data), "--seed", "1"])?;
    check!(out.trim() == "8 pairs written", "synth printed {out:?}");
    cli(&[
        "train", "--data", &s(&data), "--out", &s(&run), "--epochs", "2", "--patch-size", "64", "--batch-size", "2",
        "--learning-rate", "0.0001", "--set", "bn_momentum=0.9",
    ])?;
    let ckpt = run.join("checkpoints/last.safetensors");
    let table = cli(&["evaluate", "--data", &s(&data), "--checkpoint", &s(&ckpt), "--report", &s(&report)])?;
    for row in ["Highest", "Lowest", "Mean", "PSNR (dB)", "SSIM", "Time (s)"] {
        check!(table.contains(row), "report table lacks {row:?}");
    }
    let parsed = EvalReport::from_json(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check!(parsed.records.len() == 8, "{} records", parsed.records.len());
    let (model, base) = (
        parsed.aggregates.psnr_db.unwrap().mean,
        parsed.aggregates.baseline_psnr_db.unwrap().mean,
    );
    check!(model >= base - 0.5, "mean PSNR {model:.3} dB is below the blurred baseline {base:.3} dB");
    Ok(format!("mean PSNR {model:.2} dB vs baseline {base:.2} dB"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_pairs(&data, 4, 64, 7, 300);
    let ds = discover(&data).map_err(|e| e.to_string())?;
    let config = desk_config(10);
    let mut run = RunOptions {
        checkpoint_dir: Some(tmp.path().join("a")),
        ..Default::default()
    };
    let a = fit(&ds, None, config.clone(), &mut run).map_err(|e| e.to_string())?;
    let b = fit(&ds, None, config, &mut RunOptions::default()).map_err(|e| e.to_string())?;
    check!(a.step == 20, "ran {} steps", a.step);
    check!(a.history == b.history, "loss histories differ between identical runs");
    check!(a.generator_checksum() == b.generator_checksum(), "generator weights differ");

    let resumed = TrainState::load(&tmp.path().join("a/epoch-0005.safetensors")).map_err(|e| e.to_string())?;
    check!(resumed.step == 10, "checkpoint after epoch 5 holds step {}", resumed.step);
    let c = fit_from(resumed, &ds, None, &mut RunOptions::default()).map_err(|e| e.to_string())?;
    check!(c.history == a.history, "resumed history differs from the uninterrupted run");
    check!(
        c.generator_checksum() == a.generator_checksum() && c.discriminator_checksum() == a.discriminator_checksum(),
        "resumed weights differ from the uninterrupted run"
    );
    Ok("20 steps reproduced exactly; resume after epoch 5 matches".into())
}

// ---------------------------------------------------------------- blur

fn naive_convolve(img: &ImageTensor, k: &deblurgan::blur::BlurKernel) -> Vec<f64> {
    let (h, w, n, r) = (img.height() as isize, img.width() as isize, k.size as isize, (k.size / 2) as isize);
    let mirror = |i: isize, len: isize| if i < 0 { -i } else if i >= len { 2 * (len - 1) - i } else { i };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let sy = mirror(y + r - a, h) as usize;
                        let sx = mirror(x + r - b, w) as usize;
                        acc += k.at(a as usize, b as usize) * img.get(sy, sx, c) as f64;
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn blur_synthesis() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = 0;
    for length in [1usize, 2, 3, 5, 8, 11, 15] {
        for angle in [0.0, 17.0, 45.0, 90.0, 133.0, 250.0] {
            let k = make_linear_kernel(length, angle, length | 1).map_err(|e| e.to_string())?;
            let sum: f64 = k.weights.iter().sum();
            check!((sum - 1.0).abs() < 1e-9, "kernel ({length}, {angle}) sums to {sum}");

            let flat = image(16, 16, |_, _, c| 40.0 + 70.0 * c as f64);
            check!(apply_blur(&flat, &k) == flat, "constant image changed under ({length}, {angle})");

            let img = image(16, 16, |_, _, _| rng.gen_range(0.0..=255.0));
            let fast = apply_blur(&img, &k);
            let slow = naive_convolve(&img, &k);
            let worst = fast.data().iter().zip(&slow).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
            // the image stores f32, so allow its rounding on values up to 255
            check!(worst < 1e-6 * 255.0 * 8.0, "({length}, {angle}) differs from the oracle by {worst}");
            cases += 1;
        }
    }
    Ok(format!("{cases} kernels checked"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("architecture audit", Duration::from_secs(10), architecture),
        ("metric oracles", Duration::from_secs(30), metric_oracles),
        ("loss correctness", Duration::from_secs(120), loss_correctness),
        ("adversarial value structure", Duration::from_secs(120), value_function_structure),
        ("blur synthesis", Duration::from_secs(60), blur_synthesis),
        ("determinism and resume", Duration::from_secs(900), determinism),
        ("overfit smoke test", Duration::from_secs(600), overfit),
        ("end-to-end pipeline", Duration::from_secs(900), end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(_) if took > budget => Err(format!("took {:.1} s, budget {} s", took.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({:.1} s)", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({:.1} s)", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
