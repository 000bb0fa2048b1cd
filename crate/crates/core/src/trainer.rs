//! Adversarial training: alternating D and G updates, validation, CSV logging
//! and checkpoint/resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, ArchiveWriter};
use crate::dataset::{batches, Batch, PairedDataset};
use crate::discriminator::{Discriminator, DiscriminatorArch, MIN_INPUT};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorArch};
use crate::imaging::{convert_range, from_tensor, pad_to_multiple, to_tensor, ImageTensor, RangeTag};
use crate::losses::{
    build_feature_extractor, discriminator_loss, discriminator_loss_grad, generator_adversarial_loss,
    generator_adversarial_loss_grad, generator_total_loss, perceptual_loss_with_grad, ExtractorSource, FeatureExtractor,
    LossReport, LossWeights,
};
use crate::metrics::{evaluate, Deblurrer, MetricChannels};
use crate::nn::{checksum, Optimizer, OptimizerKind, Param, Pass, Tensor};

const CHECKPOINT_FORMAT: &str = "deblurgan-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    pub optimizer: OptimizerKind,
    /// Write a numbered checkpoint every this many epochs.
    pub checkpoint_every: usize,
    /// Validation pairs scored after each epoch (0 disables validation).
    pub val_max_pairs: usize,
    pub extractor: ExtractorSource,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.005,
            patch_size: 256,
            loss_weights: LossWeights::default(),
            seed: 0,
            d_steps_per_g_step: 1,
            optimizer: OptimizerKind::default(),
            checkpoint_every: 1,
            val_max_pairs: 8,
            extractor: ExtractorSource::SeededRandom { seed: 0 },
            generator: GeneratorArch::default(),
            discriminator: DiscriminatorArch::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("d_steps_per_g_step", self.d_steps_per_g_step),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let m = self.generator.size_multiple();
        if self.patch_size < MIN_INPUT || self.patch_size % m != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of {m} and at least {MIN_INPUT}"
            )));
        }
        Ok(())
    }

    /// Flat `key=value` view; feeding it back through [`set`](Self::set)
    /// reproduces the configuration.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("lambda_p", self.loss_weights.perceptual.to_string()),
            ("lambda_a", self.loss_weights.adversarial.to_string()),
            ("seed", self.seed.to_string()),
            ("d_steps_per_g_step", self.d_steps_per_g_step.to_string()),
        ];
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                out.push(("optimizer", "adam".into()));
                out.push(("adam_beta1", beta1.to_string()));
                out.push(("adam_beta2", beta2.to_string()));
                out.push(("adam_eps", eps.to_string()));
            }
            OptimizerKind::Sgd { momentum } => {
                out.push(("optimizer", "sgd".into()));
                out.push(("sgd_momentum", momentum.to_string()));
            }
        }
        out.push(("checkpoint_every", self.checkpoint_every.to_string()));
        out.push(("val_max_pairs", self.val_max_pairs.to_string()));
        match &self.extractor {
            ExtractorSource::SeededRandom { seed } => {
                out.push(("phi", "seeded-random".into()));
                out.push(("phi_seed", seed.to_string()));
            }
            ExtractorSource::Pretrained { path } => {
                out.push(("phi", "pretrained".into()));
                out.push(("phi_weights", path.display().to_string()));
            }
        }
        let g = &self.generator;
        out.push(("g_base_channels", g.base_channels.to_string()));
        out.push(("g_resnet_blocks", g.resnet_blocks.to_string()));
        out.push(("g_dropout", g.dropout_rate.to_string()));
        out.push(("g_global_skip", g.global_skip.to_string()));
        out.push(("g_tail_init_scale", g.tail_init_scale.to_string()));
        out.push(("bn_momentum", g.bn_momentum.to_string()));
        out.push(("d_plan", self.discriminator.plan.clone()));
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one flat setting. Unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "lambda_p" => self.loss_weights.perceptual = parse(key, v)?,
            "lambda_a" => self.loss_weights.adversarial = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "d_steps_per_g_step" => self.d_steps_per_g_step = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => match self.optimizer {
                        k @ OptimizerKind::Adam { .. } => k,
                        _ => OptimizerKind::default(),
                    },
                    "sgd" => match self.optimizer {
                        k @ OptimizerKind::Sgd { .. } => k,
                        _ => OptimizerKind::Sgd { momentum: 0.9 },
                    },
                    other => return Err(Error::Config(format!("unknown optimizer {other:?} (adam or sgd)"))),
                }
            }
            "adam_beta1" | "adam_beta2" | "adam_eps" => {
                let x: f64 = parse(key, v)?;
                let OptimizerKind::Adam { beta1, beta2, eps } = &mut self.optimizer else {
                    return Err(Error::Config(format!("{key} requires optimizer=adam")));
                };
                match key {
                    "adam_beta1" => *beta1 = x,
                    "adam_beta2" => *beta2 = x,
                    _ => *eps = x,
                }
            }
            "sgd_momentum" => {
                let x: f64 = parse(key, v)?;
                let OptimizerKind::Sgd { momentum } = &mut self.optimizer else {
                    return Err(Error::Config(format!("{key} requires optimizer=sgd")));
                };
                *momentum = x;
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "val_max_pairs" => self.val_max_pairs = parse(key, v)?,
            "phi" => {
                self.extractor = match (v, &self.extractor) {
                    ("seeded-random", ExtractorSource::SeededRandom { .. }) => self.extractor.clone(),
                    ("seeded-random", _) => ExtractorSource::SeededRandom { seed: 0 },
                    ("pretrained", ExtractorSource::Pretrained { .. }) => self.extractor.clone(),
                    ("pretrained", _) => ExtractorSource::Pretrained { path: PathBuf::new() },
                    (other, _) => {
                        return Err(Error::Config(format!("unknown phi source {other:?} (seeded-random or pretrained)")))
                    }
                }
            }
            "phi_seed" => self.extractor = ExtractorSource::SeededRandom { seed: parse(key, v)? },
            "phi_weights" => self.extractor = ExtractorSource::Pretrained { path: PathBuf::from(v) },
            "g_base_channels" => self.generator.base_channels = parse(key, v)?,
            "g_resnet_blocks" => self.generator.resnet_blocks = parse(key, v)?,
            "g_dropout" => self.generator.dropout_rate = parse(key, v)?,
            "g_global_skip" => self.generator.global_skip = parse(key, v)?,
            "g_tail_init_scale" => self.generator.tail_init_scale = parse(key, v)?,
            "bn_momentum" => {
                let m: f64 = parse(key, v)?;
                self.generator.bn_momentum = m;
                self.discriminator.bn_momentum = m;
            }
            "d_plan" => {
                let momentum = self.discriminator.bn_momentum;
                self.discriminator = DiscriminatorArch::candidate_plans()
                    .into_iter()
                    .find(|p| p.plan == v)
                    .ok_or_else(|| Error::Config(format!("unknown discriminator plan {v:?}")))?;
                self.discriminator.bn_momentum = momentum;
            }
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    pub fn keys() -> Vec<String> {
        let mut keys: Vec<String> = TrainConfig::default().entries().into_iter().map(|(k, _)| k).collect();
        keys.extend(["sgd_momentum", "phi_weights"].map(String::from));
        keys
    }
}

/// Losses of one step, tagged with where it happened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossReport,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_perc: f64,
    pub g_total: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub wall_seconds: f64,
    pub skipped: usize,
}

/// Models, optimizer slots and history; enough to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_opt: Optimizer<f32>,
    pub d_opt: Optimizer<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    epoch: usize,
    step: u64,
    config: TrainConfig,
    g_opt_steps: u64,
    d_opt_steps: u64,
    g_params: Vec<String>,
    d_params: Vec<String>,
    history: Vec<StepRecord>,
    epochs: Vec<EpochSummary>,
    /// Dropout and shuffling streams are pure functions of the seed and the
    /// step/epoch counters, so no generator state needs saving.
    rng: String,
}

fn param_names(visit: impl FnOnce(&mut dyn FnMut(&str, &Param<f32>))) -> Vec<String> {
    let mut names = Vec::new();
    visit(&mut |n, _| names.push(n.to_string()));
    names
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::build(config.generator.clone(), config.seed)?;
        let discriminator = Discriminator::build(config.discriminator.clone(), config.seed.wrapping_add(1))?;
        Ok(Self {
            g_opt: Optimizer::new(config.optimizer, config.learning_rate),
            d_opt: Optimizer::new(config.optimizer, config.learning_rate),
            config,
            generator,
            discriminator,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn generator_checksum(&self) -> u64 {
        params_checksum(|f| self.generator.visit_params(f))
    }

    pub fn discriminator_checksum(&self) -> u64 {
        params_checksum(|f| self.discriminator.visit_params(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArchiveWriter::new();
        w.push_network("g", self.generator.net());
        w.push_network("d", self.discriminator.net());
        for (name, values) in self.g_opt.export_slots() {
            w.push(format!("g_opt.{name}"), &[values.len()], values);
        }
        for (name, values) in self.d_opt.export_slots() {
            w.push(format!("d_opt.{name}"), &[values.len()], values);
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            g_opt_steps: self.g_opt.steps,
            d_opt_steps: self.d_opt.steps,
            g_params: param_names(|f| self.generator.visit_params(f)),
            d_params: param_names(|f| self.discriminator.visit_params(f)),
            history: self.history.clone(),
            epochs: self.epochs.clone(),
            rng: "chacha8; dropout keyed by (seed, step), shuffle and crops by (seed, epoch)".into(),
        };
        w.write(path, &serde_json::to_value(&manifest)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let manifest = read_manifest(&archive)?;
        let mut state = TrainState::new(manifest.config.clone())?;
        archive.load_network("g", state.generator.net_mut())?;
        archive.load_network("d", state.discriminator.net_mut())?;
        let archive = &archive;
        let lookup = |prefix: &'static str| {
            move |name: &str| -> Option<Vec<f32>> {
                archive
                    .get::<f32>(&format!("{prefix}.{name}"))
                    .ok()
                    .flatten()
                    .map(|(_, v)| v)
            }
        };
        state
            .g_opt
            .import_slots(manifest.g_opt_steps, &manifest.g_params, lookup("g_opt"))
            .map_err(Error::Checkpoint)?;
        state
            .d_opt
            .import_slots(manifest.d_opt_steps, &manifest.d_params, lookup("d_opt"))
            .map_err(Error::Checkpoint)?;
        state.epoch = manifest.epoch;
        state.step = manifest.step;
        state.history = manifest.history;
        state.epochs = manifest.epochs;
        Ok(state)
    }
}

fn read_manifest(archive: &Archive) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_value(archive.manifest().clone())
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// The training configuration recorded in a checkpoint.
pub fn read_config(path: &Path) -> Result<TrainConfig> {
    Ok(read_manifest(&Archive::read(path)?)?.config)
}

/// Generator weights and architecture only, for inference.
pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let archive = Archive::read(path)?;
    let manifest = read_manifest(&archive)?;
    let mut g = Generator::build(manifest.config.generator, manifest.config.seed)?;
    archive.load_network("g", g.net_mut())?;
    Ok(g)
}

/// Both networks, for auditing a saved run.
pub fn load_models(path: &Path) -> Result<(Generator<f32>, Discriminator<f32>)> {
    let archive = Archive::read(path)?;
    let manifest = read_manifest(&archive)?;
    let mut g = Generator::build(manifest.config.generator, manifest.config.seed)?;
    let mut d = Discriminator::build(manifest.config.discriminator, manifest.config.seed.wrapping_add(1))?;
    archive.load_network("g", g.net_mut())?;
    archive.load_network("d", d.net_mut())?;
    Ok((g, d))
}

fn params_checksum(visit: impl FnOnce(&mut dyn FnMut(&str, &Param<f32>))) -> u64 {
    let mut slices: Vec<Vec<f32>> = Vec::new();
    visit(&mut |_, p| slices.push(p.value.clone()));
    checksum(slices.iter().map(Vec::as_slice))
}

/// Parameter checksums around each half-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepAudit {
    pub g_before: u64,
    pub g_after_d: u64,
    pub g_after: u64,
    pub d_before: u64,
    pub d_after_d: u64,
    pub d_after: u64,
    pub phi_before: u64,
    pub phi_after: u64,
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd509_0u64);
    rng.set_stream(step);
    rng
}

fn finite(term: &str, value: f64, state: &TrainState) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            epoch: state.epoch + 1,
            step: state.step + 1,
        })
    }
}

fn all_finite(term: &str, mut values: impl Iterator<Item = f64>, state: &TrainState) -> Result<()> {
    match values.find(|v| !v.is_finite()) {
        Some(v) => finite(term, v, state).map(|_| ()),
        None => Ok(()),
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// One alternating update: D on `(x, G(z))` with `G(z)` held fixed, then G
/// on the weighted perceptual and adversarial loss with D held fixed.
pub fn train_step(state: &mut TrainState, extractor: &mut FeatureExtractor<f32>, batch: &Batch) -> Result<LossReport> {
    step_inner(state, extractor, batch, None)
}

/// [`train_step`] plus parameter checksums before and after each half-step.
pub fn train_step_audited(
    state: &mut TrainState,
    extractor: &mut FeatureExtractor<f32>,
    batch: &Batch,
) -> Result<(LossReport, StepAudit)> {
    let mut audit = StepAudit {
        g_before: 0,
        g_after_d: 0,
        g_after: 0,
        d_before: 0,
        d_after_d: 0,
        d_after: 0,
        phi_before: 0,
        phi_after: 0,
    };
    let report = step_inner(state, extractor, batch, Some(&mut audit))?;
    Ok((report, audit))
}

fn step_inner(
    state: &mut TrainState,
    extractor: &mut FeatureExtractor<f32>,
    batch: &Batch,
    mut audit: Option<&mut StepAudit>,
) -> Result<LossReport> {
    if batch.is_empty() || batch.blurred.shape() != batch.sharp.shape() {
        return Err(Error::Precondition("batch must be non-empty with matching blurred/sharp shapes".into()));
    }
    let weights = state.config.loss_weights;
    if let Some(a) = audit.as_deref_mut() {
        a.g_before = state.generator_checksum();
        a.d_before = state.discriminator_checksum();
        a.phi_before = params_checksum(|f| extractor.visit_params(f));
    }

    // (1) G(z), cached for the generator update below.
    let mut rng = dropout_rng(state.config.seed, state.step);
    let fake = state.generator.forward(&batch.blurred, &mut Pass::train(&mut rng))?;
    all_finite("generator output", fake.data().iter().map(|&v| v as f64), state)?;

    // (2) discriminator half-step; G(z) enters only as data.
    state.discriminator.set_requires_grad(true);
    let mut d_loss = 0.0;
    for _ in 0..state.config.d_steps_per_g_step {
        state.discriminator.zero_grad();
        let mut train = Pass::train_without_dropout();
        let p_real = to_f64(&state.discriminator.forward(&batch.sharp, &mut train)?);
        all_finite("d_real", p_real.iter().copied(), state)?;
        let (g_real, _) = discriminator_loss_grad(&p_real, &[0.5])?;
        state.discriminator.backward(&to_f32(&g_real));
        let p_fake = to_f64(&state.discriminator.forward(&fake, &mut train)?);
        all_finite("d_fake", p_fake.iter().copied(), state)?;
        let (_, g_fake) = discriminator_loss_grad(&[0.5], &p_fake)?;
        state.discriminator.backward(&to_f32(&g_fake));
        d_loss = finite("d_loss", discriminator_loss(&p_real, &p_fake)?, state)?;
        let d = &mut state.discriminator;
        state.d_opt.step(|f| d.net_mut().visit_params_mut("", f));
    }
    if let Some(a) = audit.as_deref_mut() {
        a.g_after_d = state.generator_checksum();
        a.d_after_d = state.discriminator_checksum();
    }

    // (3) generator half-step; D only routes gradients.
    state.discriminator.set_requires_grad(false);
    let p_fake = to_f64(&state.discriminator.forward(&fake, &mut Pass::train_without_dropout())?);
    let g_adv = finite("g_adv", generator_adversarial_loss(&p_fake)?, state)?;
    let grad_adv = state
        .discriminator
        .backward(&to_f32(&generator_adversarial_loss_grad(&p_fake)?));
    let (g_perc, grad_perc) = perceptual_loss_with_grad(extractor, &batch.sharp, &fake)?;
    let g_perc = finite("g_perc", g_perc, state)?;
    let g_total = finite("g_total", generator_total_loss(g_perc, g_adv, weights)?, state)?;
    let (wp, wa) = (weights.perceptual as f32, weights.adversarial as f32);
    let grad = grad_perc.zip_map(&grad_adv, |p, a| wp * p + wa * a);
    state.generator.zero_grad();
    state.generator.backward(&grad);
    let g = &mut state.generator;
    state.g_opt.step(|f| g.net_mut().visit_params_mut("", f));
    state.discriminator.set_requires_grad(true);

    if let Some(a) = audit {
        a.g_after = state.generator_checksum();
        a.d_after = state.discriminator_checksum();
        a.phi_after = params_checksum(|f| extractor.visit_params(f));
    }

    let report = LossReport {
        d_loss,
        g_adv,
        g_perc,
        g_total,
    };
    state.step += 1;
    state.history.push(StepRecord {
        epoch: state.epoch + 1,
        step: state.step,
        losses: report,
    });
    Ok(report)
}

/// Restores a full image: unit_signed, reflect-padded to the generator's size
/// multiple, inference forward, cropped back, byte range. Returns the image
/// and the seconds spent.
pub fn deblur_image(gen: &Generator<f32>, img: &ImageTensor) -> Result<(ImageTensor, f64)> {
    let start = Instant::now();
    let signed = convert_range(img, RangeTag::UnitSigned);
    let (padded, crop) = pad_to_multiple(&signed, gen.arch().size_multiple())?;
    let z: Tensor<f32> = to_tensor(&[&padded])?;
    let out = gen.infer(&z)?;
    let restored = crop.restore(&from_tensor(&out, 0, RangeTag::UnitSigned)?)?;
    let bytes = convert_range(&restored, RangeTag::Byte);
    Ok((bytes, start.elapsed().as_secs_f64().max(1e-9)))
}

/// Adapts a generator to the evaluation interface.
pub struct GeneratorDeblurrer<'a>(pub &'a Generator<f32>);

impl Deblurrer for GeneratorDeblurrer<'_> {
    fn deblur(&self, blurred: &ImageTensor) -> Result<ImageTensor> {
        deblur_image(self.0, blurred).map(|(img, _)| img)
    }
}

/// Where a run writes its artifacts, and who hears about finished epochs.
#[derive(Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochSummary)>>,
}

pub const LOG_COLUMNS: [&str; 9] = [
    "epoch", "step", "d_loss", "g_adv", "g_perc", "g_total", "val_psnr", "val_ssim", "wall_seconds",
];

fn open_log(path: &Path, config: &TrainConfig) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        for (k, v) in config.entries() {
            writeln!(file, "# {k}={v}").map_err(|e| Error::io(path, e))?;
        }
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(LOG_COLUMNS)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Mean validation PSNR (finite values) and SSIM over up to `val_max_pairs` pairs.
fn validate(gen: &Generator<f32>, val: &PairedDataset, max_pairs: usize) -> Result<(Option<f64>, Option<f64>)> {
    if max_pairs == 0 || val.is_empty() {
        return Ok((None, None));
    }
    let mut subset = val.clone();
    subset.pairs.truncate(max_pairs);
    let report = evaluate(&GeneratorDeblurrer(gen), &subset, MetricChannels::Rgb, serde_json::Value::Null)?;
    Ok((
        report.aggregates.psnr_db.map(|s| s.mean),
        report.aggregates.ssim.map(|s| s.mean),
    ))
}

/// Trains from scratch.
pub fn fit(train: &PairedDataset, val: Option<&PairedDataset>, config: TrainConfig, run: &mut RunOptions) -> Result<TrainState> {
    fit_from(TrainState::new(config)?, train, val, run)
}

/// Continues `state` until `state.config.epochs` epochs are complete.
pub fn fit_from(
    mut state: TrainState,
    train: &PairedDataset,
    val: Option<&PairedDataset>,
    run: &mut RunOptions,
) -> Result<TrainState> {
    state.config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(train.root.clone()));
    }
    let mut extractor = build_feature_extractor::<f32>(state.config.extractor.clone())?;
    let mut log = run.log_path.as_deref().map(|p| open_log(p, &state.config)).transpose()?;
    let cfg = state.config.clone();
    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        let mut stream = batches(train, cfg.batch_size, cfg.patch_size, cfg.seed, epoch)?;
        for batch in stream.by_ref() {
            let r = train_step(&mut state, &mut extractor, &batch?)?;
            for (s, v) in sums.iter_mut().zip([r.d_loss, r.g_adv, r.g_perc, r.g_total]) {
                *s += v;
            }
            steps += 1;
            log::debug!("epoch {} step {}: {:?}", epoch + 1, state.step, r);
        }
        let skipped = stream.skipped().len();
        if steps == 0 {
            return Err(Error::Precondition(format!(
                "no training pair is at least {}x{}",
                cfg.patch_size, cfg.patch_size
            )));
        }
        let (val_psnr, val_ssim) = match val {
            Some(v) => validate(&state.generator, v, cfg.val_max_pairs)?,
            None => (None, None),
        };
        state.epoch += 1;
        let mean = |i: usize| sums[i] / steps as f64;
        let summary = EpochSummary {
            epoch: state.epoch,
            step: state.step,
            d_loss: mean(0),
            g_adv: mean(1),
            g_perc: mean(2),
            g_total: mean(3),
            val_psnr,
            val_ssim,
            wall_seconds: started.elapsed().as_secs_f64(),
            skipped,
        };
        log::info!(
            "epoch {}/{}: d_loss {:.4} g_adv {:.4} g_perc {:.4} g_total {:.4} val_psnr {} val_ssim {} ({:.1} s)",
            summary.epoch,
            cfg.epochs,
            summary.d_loss,
            summary.g_adv,
            summary.g_perc,
            summary.g_total,
            opt_field(val_psnr),
            opt_field(val_ssim),
            summary.wall_seconds
        );
        if let Some(w) = log.as_mut() {
            w.write_record([
                summary.epoch.to_string(),
                summary.step.to_string(),
                format!("{:.6}", summary.d_loss),
                format!("{:.6}", summary.g_adv),
                format!("{:.6}", summary.g_perc),
                format!("{:.6}", summary.g_total),
                opt_field(val_psnr),
                opt_field(val_ssim),
                format!("{:.3}", summary.wall_seconds),
            ])?;
            w.flush().map_err(|e| Error::io(run.log_path.clone().unwrap_or_default(), e))?;
        }
        if let Some(cb) = run.on_epoch.as_mut() {
            cb(&summary);
        }
        state.epochs.push(summary);
        if let Some(dir) = &run.checkpoint_dir {
            let last = state.epoch == cfg.epochs;
            if state.epoch % cfg.checkpoint_every == 0 || last {
                state.save(&dir.join(format!("epoch-{:04}.safetensors", state.epoch)))?;
            }
            state.save(&dir.join("last.safetensors"))?;
        }
    }
    Ok(state)
}
