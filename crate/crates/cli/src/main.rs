use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use deblurgan::architecture::{
    within_budget, LayerCounts, DISCRIMINATOR_PARAM_TARGET, GENERATOR_PARAM_TARGET, TOTAL_PARAM_TARGET,
};
use deblurgan::blur::synthesize_pairs;
use deblurgan::dataset::{discover, split, PairedDataset, DEFAULT_VAL_FRACTION};
use deblurgan::imaging::{convert_range, load_image, save_image, RangeTag};
use deblurgan::metrics::{evaluate, Deblurrer, IdentityDeblurrer, MetricChannels};
use deblurgan::scenes::random_scene;
use deblurgan::trainer::{
    deblur_image, fit_from, load_generator, load_models, read_config, EpochSummary, GeneratorDeblurrer, RunOptions,
    TrainConfig, TrainState,
};
use log::info;
use serde_json::json;

mod config;

/// A mistake in how the command was invoked (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "deblurgan", version, about = "Train and run a GAN for motion deblurring")]
struct Cli {
    /// Increase progress output on stderr (-v debug, -vv trace)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only print warnings and errors on stderr
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build blur/ + sharp/ training pairs with synthetic motion blur
    Synth(SynthArgs),
    /// Train the generator and discriminator on a paired dataset
    Train(TrainArgs),
    /// Restore one image or every image in a directory
    Deblur(DeblurArgs),
    /// Score a model on a paired dataset (PSNR, SSIM, time)
    Evaluate(EvaluateArgs),
    /// Print layer and parameter counts of the networks
    Inspect(InspectArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["sharp_dir", "scenes"])))]
struct SynthArgs {
    /// Directory of sharp PNG/JPEG images
    #[arg(long)]
    sharp_dir: Option<PathBuf>,
    /// Generate this many procedural sharp scenes instead of reading --sharp-dir
    #[arg(long)]
    scenes: Option<usize>,
    /// Side length of generated scenes in pixels
    #[arg(long, default_value_t = 128)]
    scene_size: usize,
    /// Dataset root to create (receives blur/ and sharp/)
    #[arg(long)]
    out: PathBuf,
    /// Shortest blur line in pixels
    #[arg(long, default_value_t = 5)]
    min_length: usize,
    /// Longest blur line in pixels
    #[arg(long, default_value_t = 15)]
    max_length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing blur/ and sharp/
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat key = value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints/, train_log.csv and config.txt
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Square training crop size in pixels
    #[arg(long)]
    patch_size: Option<usize>,
    /// Weight of the perceptual loss
    #[arg(long)]
    lambda_p: Option<f64>,
    /// Weight of the adversarial loss
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// adam or sgd
    #[arg(long)]
    optimizer: Option<String>,
    /// Fraction of pairs held out for validation (0 disables validation)
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Feature extractor weights (safetensors, torchvision VGG16 names);
    /// without it a seeded random extractor is used
    #[arg(long)]
    phi_weights: Option<PathBuf>,
    /// Any other setting, e.g. --set bn_momentum=0.9 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DeblurArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    input: PathBuf,
    /// Output file (single input) or directory; defaults to <name>_deblurred.png beside the input
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the input and the output next to each other
    #[arg(long)]
    side_by_side: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
}

#[derive(Args)]
#[command(group(ArgGroup::new("model").required(true).args(["checkpoint", "identity"])))]
struct EvaluateArgs {
    /// Dataset root containing blur/ and sharp/
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the blurred inputs unchanged instead of a model
    #[arg(long)]
    identity: bool,
    /// JSON report path
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    /// Which part of the dataset to score
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
    /// Seed of the train/val split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare luma only instead of RGB
    #[arg(long)]
    luminance: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Report the networks stored in a checkpoint instead of the default build
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture overrides, e.g. --set g_resnet_blocks=8 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
    /// Print the flat training config instead of the table
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Deblur(a) => deblur(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<deblurgan::Error>(), Some(deblurgan::Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let sharp_dir = match (a.sharp_dir, a.scenes) {
        (Some(dir), _) => dir,
        (None, Some(n)) => {
            let dir = a.out.join("source");
            for i in 0..n {
                let scene = random_scene(a.scene_size, a.scene_size, a.seed.wrapping_add(i as u64));
                save_image(&scene, dir.join(format!("scene_{i:04}.png")))?;
            }
            dir
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    if a.min_length == 0 || a.min_length > a.max_length {
        bail!(Usage(format!("invalid length range {}..={}", a.min_length, a.max_length)));
    }
    let n = synthesize_pairs(&sharp_dir, &a.out, (a.min_length, a.max_length), a.seed)?;
    println!("{n} pairs written");
    Ok(())
}

struct TrainSettings {
    config: TrainConfig,
    data: Option<PathBuf>,
    out: PathBuf,
    val_fraction: f64,
}

impl TrainSettings {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "val_fraction" => {
                self.val_fraction = value
                    .parse()
                    .map_err(|_| Usage(format!("invalid value {value:?} for val_fraction")))?
            }
            _ => self.config.set(key, value)?,
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(d) = &self.data {
            out.push(("data".to_string(), d.display().to_string()));
        }
        out.push(("out".to_string(), self.out.display().to_string()));
        out.push(("val_fraction".to_string(), self.val_fraction.to_string()));
        out.extend(self.config.entries());
        out
    }
}

/// Precedence: defaults (or the resumed checkpoint), then the config file,
/// then `--set`, then dedicated flags.
fn train_settings(a: &TrainArgs, base: TrainConfig) -> Result<TrainSettings> {
    let mut s = TrainSettings {
        config: base,
        data: None,
        out: PathBuf::from("run"),
        val_fraction: DEFAULT_VAL_FRACTION,
    };
    if let Some(path) = &a.config {
        for (k, v) in config::read(path)? {
            s.apply(&k, &v)?;
        }
    }
    for item in &a.set {
        let (k, v) = config::parse_pair(item)?;
        s.apply(&k, &v)?;
    }
    let flags: Vec<(&str, Option<String>)> = vec![
        ("data", a.data.as_ref().map(|p| p.display().to_string())),
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ("patch_size", a.patch_size.map(|v| v.to_string())),
        ("lambda_p", a.lambda_p.map(|v| v.to_string())),
        ("lambda_a", a.lambda_a.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("optimizer", a.optimizer.clone()),
        ("val_fraction", a.val_fraction.map(|v| v.to_string())),
        ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
        ("phi_weights", a.phi_weights.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.apply(k, &v)?;
        }
    }
    if !(0.0..1.0).contains(&s.val_fraction) {
        bail!(Usage(format!("val_fraction {} must be in [0, 1)", s.val_fraction)));
    }
    s.config.validate()?;
    Ok(s)
}

fn epoch_line(e: &EpochSummary, total: usize) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "epoch {}/{} step {} d_loss {:.4} g_adv {:.4} g_perc {:.4} g_total {:.4} val_psnr {} val_ssim {} time {:.1}s",
        e.epoch,
        total,
        e.step,
        e.d_loss,
        e.g_adv,
        e.g_perc,
        e.g_total,
        opt(e.val_psnr),
        opt(e.val_ssim),
        e.wall_seconds
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let resumed = match &a.resume {
        Some(path) => {
            if !path.is_file() {
                bail!(Usage(format!("checkpoint {} does not exist", path.display())));
            }
            Some(TrainState::load(path).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    let base = resumed.as_ref().map(|s| s.config.clone()).unwrap_or_default();
    let settings = train_settings(&a, base)?;
    let data = settings
        .data
        .clone()
        .ok_or_else(|| Usage("no dataset given (--data or data = ... in the config file)".into()))?;
    let state = match resumed {
        Some(mut s) => {
            if s.config.generator != settings.config.generator || s.config.discriminator != settings.config.discriminator {
                bail!(Usage("architecture settings cannot change when resuming".into()));
            }
            s.config = settings.config.clone();
            info!("resuming after epoch {} (step {})", s.epoch, s.step);
            s
        }
        None => TrainState::new(settings.config.clone())?,
    };

    let all = discover(&data)?;
    let (train_ds, val_ds) = if settings.val_fraction > 0.0 {
        let (t, v) = split(&all, settings.val_fraction, settings.config.seed)?;
        (t, (!v.is_empty()).then_some(v))
    } else {
        (all, None)
    };
    info!(
        "{} training pairs, {} validation pairs",
        train_ds.len(),
        val_ds.as_ref().map_or(0, PairedDataset::len)
    );

    std::fs::create_dir_all(&settings.out).with_context(|| format!("creating {}", settings.out.display()))?;
    let config_path = settings.out.join("config.txt");
    std::fs::write(&config_path, config::render(&settings.entries()))
        .with_context(|| format!("writing {}", config_path.display()))?;
    let total = settings.config.epochs;
    let checkpoint_dir = settings.out.join("checkpoints");
    let mut run = RunOptions {
        checkpoint_dir: Some(checkpoint_dir.clone()),
        log_path: Some(settings.out.join("train_log.csv")),
        on_epoch: Some(Box::new(move |e: &EpochSummary| {
            println!("{}", epoch_line(e, total));
            let _ = std::io::stdout().flush();
        })),
    };
    let state = fit_from(state, &train_ds, val_ds.as_ref(), &mut run)?;
    println!(
        "trained {} epochs, {} steps; checkpoint {}",
        state.epoch,
        state.step,
        checkpoint_dir.join("last.safetensors").display()
    );
    Ok(())
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!(Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn deblurred_name(input: &Path) -> String {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    format!("{stem}_deblurred.png")
}

fn deblur(a: DeblurArgs) -> Result<()> {
    require_checkpoint(&a.checkpoint)?;
    let gen = load_generator(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        let out_dir = a.out.clone().unwrap_or_else(|| a.input.join("deblurred"));
        image_files(&a.input)?
            .into_iter()
            .map(|p| {
                let out = out_dir.join(deblurred_name(&p));
                (p, out)
            })
            .collect()
    } else if a.input.is_file() {
        let out = a
            .out
            .clone()
            .unwrap_or_else(|| a.input.with_file_name(deblurred_name(&a.input)));
        vec![(a.input.clone(), out)]
    } else {
        bail!(Usage(format!("input {} does not exist", a.input.display())));
    };
    let mut failed = 0;
    for (input, out) in &jobs {
        let img = match load_image(input) {
            Ok(img) => img,
            Err(e @ deblurgan::Error::Format { .. }) => {
                log::warn!("skipping {e}");
                failed += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let (restored, seconds) = deblur_image(&gen, &img)?;
        let written = if a.side_by_side {
            convert_range(&img, RangeTag::Byte).hconcat(&restored)?
        } else {
            restored
        };
        save_image(&written, out)?;
        println!(
            "{}: {}x{} in {:.4} s",
            out.display(),
            written.width(),
            written.height(),
            seconds
        );
    }
    if jobs.len() == failed {
        bail!("no decodable input images");
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let all = discover(&a.data)?;
    let ds = match a.split {
        SplitArg::All => all,
        SplitArg::Train | SplitArg::Val => {
            let (t, v) = split(&all, a.val_fraction, a.seed).map_err(|e| Usage(e.to_string()))?;
            if matches!(a.split, SplitArg::Train) {
                t
            } else {
                v
            }
        }
    };
    if ds.is_empty() {
        bail!("the selected split contains no pairs");
    }
    let channels = if a.luminance {
        MetricChannels::Luminance
    } else {
        MetricChannels::Rgb
    };
    let split_name = match a.split {
        SplitArg::All => "all",
        SplitArg::Train => "train",
        SplitArg::Val => "val",
    };
    let mut echo = json!({
        "data": a.data.display().to_string(),
        "split": split_name,
        "val_fraction": a.val_fraction,
        "split_seed": a.seed,
        "channels": channels,
    });
    let generator;
    let model: Box<dyn Deblurrer + '_> = match &a.checkpoint {
        Some(path) => {
            require_checkpoint(path)?;
            generator = load_generator(path).with_context(|| format!("loading {}", path.display()))?;
            let train_config = read_config(path)?;
            echo["checkpoint"] = json!(path.display().to_string());
            echo["train_config"] = json!(train_config
                .entries()
                .into_iter()
                .collect::<std::collections::BTreeMap<_, _>>());
            Box::new(GeneratorDeblurrer(&generator))
        }
        None => {
            echo["model"] = json!("identity");
            Box::new(IdentityDeblurrer)
        }
    };
    let report = evaluate(model.as_ref(), &ds, channels, echo)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&a.report, report.to_json()?).with_context(|| format!("writing {}", a.report.display()))?;
    print!("{report}");
    info!("report written to {}", a.report.display());
    if report.records.is_empty() {
        bail!("every image failed to evaluate");
    }
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn inspect(a: InspectArgs) -> Result<()> {
    let mut config = match &a.checkpoint {
        Some(path) => {
            require_checkpoint(path)?;
            read_config(path)?
        }
        None => TrainConfig::default(),
    };
    for item in &a.set {
        let (k, v) = config::parse_pair(item)?;
        config.set(&k, &v)?;
    }
    if a.print_config {
        print!("{}", config::render(&config.entries()));
        return Ok(());
    }
    let (g, d): (LayerCounts, LayerCounts) = match &a.checkpoint {
        Some(path) if a.set.is_empty() => {
            let (g, d) = load_models(path).with_context(|| format!("loading {}", path.display()))?;
            (g.built_counts(), d.built_counts())
        }
        _ => {
            config.generator.validate()?;
            config.discriminator.validate()?;
            (config.generator.counts(), config.discriminator.counts())
        }
    };
    let total = g.add(d);
    let rows = [
        ("Discriminator", d, DISCRIMINATOR_PARAM_TARGET),
        ("Generator", g, GENERATOR_PARAM_TARGET),
        ("Total", total, TOTAL_PARAM_TARGET),
    ];
    if a.json {
        let mut out = serde_json::Map::new();
        for (name, c, target) in rows {
            out.insert(
                name.to_ascii_lowercase(),
                json!({
                    "conv_layers": c.conv_layers,
                    "params": c.params,
                    "reference_params": target,
                    "within_budget": within_budget(c.params, target),
                }),
            );
        }
        out.insert("discriminator_plan".into(), json!(config.discriminator.plan));
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{:<14}{:>12}{:>14}{:>10}", "Model", "Conv layers", "Parameters", "");
        for (name, c, _) in rows {
            println!("{name:<14}{:>12}{:>14}{:>10}", c.conv_layers, c.params, millions(c.params));
        }
    }
    Ok(())
}
