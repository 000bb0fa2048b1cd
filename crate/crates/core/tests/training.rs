mod common;

use deblurgan::dataset::{batches, discover, Batch};
use deblurgan::losses::build_feature_extractor;
use deblurgan::nn::checksum;
use deblurgan::scenes::random_scene;
use deblurgan::trainer::{deblur_image, fit, fit_from, load_generator, train_step, train_step_audited, RunOptions, TrainState};
use deblurgan::Error;

fn first_batch(root: &std::path::Path, n: usize) -> Batch {
    common::write_dataset(root, n, 64, 50);
    let ds = discover(root).unwrap();
    batches(&ds, 2, 64, 0, 0).unwrap().next().unwrap().unwrap()
}

#[test]
fn step_alternates_between_networks_and_never_touches_phi() {
    let tmp = tempfile::tempdir().unwrap();
    let batch = first_batch(tmp.path(), 2);
    let config = common::tiny_config();
    let mut state = TrainState::new(config.clone()).unwrap();
    let mut fx = build_feature_extractor::<f32>(config.extractor.clone()).unwrap();
    let phi = |fx: &deblurgan::losses::FeatureExtractor<f32>| {
        let mut v: Vec<Vec<f32>> = Vec::new();
        fx.visit_params(&mut |_, p| v.push(p.value.clone()));
        checksum(v.iter().map(Vec::as_slice))
    };
    let phi0 = phi(&fx);
    for _ in 0..2 {
        let (report, a) = train_step_audited(&mut state, &mut fx, &batch).unwrap();
        assert_eq!(a.g_before, a.g_after_d, "G moved during the D half-step");
        assert_ne!(a.d_before, a.d_after_d);
        assert_eq!(a.d_after_d, a.d_after, "D moved during the G half-step");
        assert_ne!(a.g_after_d, a.g_after);
        assert_eq!(a.phi_before, a.phi_after);
        assert!(report.d_loss.is_finite() && report.g_total.is_finite());
    }
    assert_eq!(phi(&fx), phi0);
    assert_eq!(state.step, 2);
}

#[test]
fn five_pairs_at_batch_two_take_three_steps() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_dataset(tmp.path(), 5, 64, 60);
    let ds = discover(tmp.path()).unwrap();
    let state = fit(&ds, None, common::tiny_config(), &mut RunOptions::default()).unwrap();
    assert_eq!((state.epoch, state.step, state.history.len()), (1, 3, 3));
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    common::write_dataset(&data, 3, 72, 70);
    let ds = discover(&data).unwrap();
    let mut config = common::tiny_config();
    config.set("epochs", "2").unwrap();

    let a = fit(&ds, None, config.clone(), &mut RunOptions::default()).unwrap();
    let b = fit(&ds, None, config.clone(), &mut RunOptions::default()).unwrap();
    assert_eq!(a.generator_checksum(), b.generator_checksum());
    assert_eq!(a.discriminator_checksum(), b.discriminator_checksum());
    assert_eq!(a.history, b.history);

    let mut half = config.clone();
    half.set("epochs", "1").unwrap();
    let mut run = RunOptions {
        checkpoint_dir: Some(tmp.path().join("ck")),
        ..Default::default()
    };
    fit(&ds, None, half, &mut run).unwrap();
    let mut resumed = TrainState::load(&tmp.path().join("ck/last.safetensors")).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.config.epochs = 2;
    let c = fit_from(resumed, &ds, None, &mut RunOptions::default()).unwrap();
    assert_eq!(c.generator_checksum(), a.generator_checksum());
    assert_eq!(c.discriminator_checksum(), a.discriminator_checksum());
    assert_eq!(c.history, a.history);
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let batch = first_batch(tmp.path(), 2);
    let config = common::tiny_config();
    let mut state = TrainState::new(config.clone()).unwrap();
    let mut fx = build_feature_extractor::<f32>(config.extractor.clone()).unwrap();
    train_step(&mut state, &mut fx, &batch).unwrap();
    let path = tmp.path().join("state.safetensors");
    state.save(&path).unwrap();
    let back = TrainState::load(&path).unwrap();
    assert_eq!(back.generator_checksum(), state.generator_checksum());
    assert_eq!(back.discriminator_checksum(), state.discriminator_checksum());
    assert_eq!((back.step, back.config.clone()), (1, config));

    // one more step from each must agree, so optimizer slots came back too
    let (mut s1, mut s2) = (state, back);
    train_step(&mut s1, &mut fx, &batch).unwrap();
    train_step(&mut s2, &mut fx, &batch).unwrap();
    assert_eq!(s1.generator_checksum(), s2.generator_checksum());

    let bytes = std::fs::read(&path).unwrap();
    let bad = tmp.path().join("bad.safetensors");
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(TrainState::load(&bad).is_err());
    assert!(load_generator(&bad).is_err());
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(TrainState::load(&bad).is_err());
}

#[test]
fn non_finite_input_stops_the_step() {
    let tmp = tempfile::tempdir().unwrap();
    let mut batch = first_batch(tmp.path(), 2);
    batch.blurred.data_mut()[5] = f32::NAN;
    let config = common::tiny_config();
    let mut state = TrainState::new(config.clone()).unwrap();
    let mut fx = build_feature_extractor::<f32>(config.extractor).unwrap();
    match train_step(&mut state, &mut fx, &batch) {
        Err(Error::NonFinite { epoch, step, .. }) => assert_eq!((epoch, step), (1, 1)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn full_frame_deblur_keeps_size_and_is_deterministic() {
    let state = TrainState::new(common::tiny_config()).unwrap();
    let img = random_scene(720, 1280, 3);
    let (a, secs) = deblur_image(&state.generator, &img).unwrap();
    assert_eq!((a.height(), a.width()), (720, 1280));
    assert!(secs > 0.0);
    let odd = random_scene(37, 50, 4);
    let (b, _) = deblur_image(&state.generator, &odd).unwrap();
    assert_eq!((b.height(), b.width()), (37, 50));
    assert_eq!(deblur_image(&state.generator, &odd).unwrap().0, b);
}
