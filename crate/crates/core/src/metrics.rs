//! PSNR, SSIM, per-image timing and the evaluation report.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::imaging::{convert_range, ImageTensor, RangeTag};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Which planes the metrics compare.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricChannels {
    /// R, G and B jointly (SSIM per channel, then averaged).
    #[default]
    Rgb,
    /// BT.601 luma only.
    Luminance,
}

fn planes(img: &ImageTensor, channels: MetricChannels) -> Vec<Vec<f64>> {
    let img = convert_range(img, RangeTag::Byte);
    let px = img.data().chunks_exact(3);
    match channels {
        MetricChannels::Rgb => (0..3)
            .map(|c| img.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect())
            .collect(),
        MetricChannels::Luminance => {
            vec![px.map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()]
        }
    }
}

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Precondition(format!(
            "metric inputs differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on the byte scale; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_with(a, b, MetricChannels::Rgb)
}

pub fn psnr_with(a: &ImageTensor, b: &ImageTensor, channels: MetricChannels) -> Result<f64> {
    check_shapes(a, b)?;
    let (pa, pb) = (planes(a, channels), planes(b, channels));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        sum += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        n += x.len();
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over all fully contained windows.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| g[j] * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / n as f64
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, MetricChannels::Rgb)
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, channels: MetricChannels) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (pa, pb) = (planes(a, channels), planes(b, channels));
    let per: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w)).collect();
    Ok((per.iter().sum::<f64>() / per.len() as f64).clamp(-1.0, 1.0))
}

/// Serializes `+∞` PSNR as the string `"inf"`, which JSON numbers cannot express.
mod psnr_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    #[serde(with = "psnr_value")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: f64,
    /// Blurred input against the sharp target.
    #[serde(with = "psnr_value")]
    pub baseline_psnr_db: f64,
    pub baseline_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub highest: f64,
    pub lowest: f64,
    pub mean: f64,
    pub count: usize,
}

impl Stats {
    /// `None` when there are no values.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Option<Stats> {
        let mut count = 0;
        let (mut sum, mut hi, mut lo) = (0.0, f64::NEG_INFINITY, f64::INFINITY);
        for v in values {
            count += 1;
            sum += v;
            hi = hi.max(v);
            lo = lo.min(v);
        }
        (count > 0).then(|| Stats {
            highest: hi,
            lowest: lo,
            mean: sum / count as f64,
            count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Over finite PSNR values only.
    pub psnr_db: Option<Stats>,
    /// Records with identical output and target.
    pub psnr_infinite: usize,
    pub ssim: Option<Stats>,
    pub seconds: Option<Stats>,
    pub baseline_psnr_db: Option<Stats>,
    pub baseline_psnr_infinite: usize,
    pub baseline_ssim: Option<Stats>,
}

impl Aggregates {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let finite = |f: fn(&EvalRecord) -> f64| Stats::from_values(records.iter().map(f).filter(|v| v.is_finite()));
        Self {
            psnr_db: finite(|r| r.psnr_db),
            psnr_infinite: records.iter().filter(|r| r.psnr_db.is_infinite()).count(),
            ssim: Stats::from_values(records.iter().map(|r| r.ssim)),
            seconds: Stats::from_values(records.iter().map(|r| r.seconds)),
            baseline_psnr_db: finite(|r| r.baseline_psnr_db),
            baseline_psnr_infinite: records.iter().filter(|r| r.baseline_psnr_db.is_infinite()).count(),
            baseline_ssim: Stats::from_values(records.iter().map(|r| r.baseline_ssim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<EvalFailure>,
    pub aggregates: Aggregates,
    pub channels: MetricChannels,
    /// Free-form description of what produced the outputs.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(records: Vec<EvalRecord>, failures: Vec<EvalFailure>, channels: MetricChannels, config: serde_json::Value) -> Self {
        let aggregates = Aggregates::from_records(&records);
        Self {
            records,
            failures,
            aggregates,
            channels,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl fmt::Display for EvalReport {
    /// Highest / lowest / mean table for PSNR, SSIM and time.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.aggregates;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &Option<Stats>, digits: usize| match s {
            Some(s) => writeln!(
                f,
                "{name:<16}{:>12.digits$}{:>12.digits$}{:>12.digits$}",
                s.highest, s.lowest, s.mean
            ),
            None => writeln!(f, "{name:<16}{:>12}{:>12}{:>12}", "-", "-", "-"),
        };
        writeln!(f, "{:<16}{:>12}{:>12}{:>12}", "", "Highest", "Lowest", "Mean")?;
        row(f, "PSNR (dB)", &a.psnr_db, 4)?;
        row(f, "SSIM", &a.ssim, 4)?;
        row(f, "Time (s)", &a.seconds, 4)?;
        row(f, "Input PSNR (dB)", &a.baseline_psnr_db, 4)?;
        row(f, "Input SSIM", &a.baseline_ssim, 4)?;
        writeln!(f, "images: {}, failed: {}", self.records.len(), self.failures.len())?;
        if a.psnr_infinite > 0 {
            writeln!(f, "{} identical output(s) with infinite PSNR excluded from the PSNR row", a.psnr_infinite)?;
        }
        if a.baseline_psnr_infinite > 0 {
            writeln!(f, "{} input(s) already identical to the target", a.baseline_psnr_infinite)?;
        }
        Ok(())
    }
}

/// Anything that maps a blurred image to a restored one of the same size.
pub trait Deblurrer {
    fn deblur(&self, blurred: &ImageTensor) -> Result<ImageTensor>;
}

/// Returns its input unchanged; useful as a baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDeblurrer;

impl Deblurrer for IdentityDeblurrer {
    fn deblur(&self, blurred: &ImageTensor) -> Result<ImageTensor> {
        Ok(blurred.clone())
    }
}

/// Scores one pair; `seconds` covers only the deblurring call.
pub fn score_pair(model: &dyn Deblurrer, id: &str, blurred: &ImageTensor, sharp: &ImageTensor, channels: MetricChannels) -> Result<EvalRecord> {
    let start = Instant::now();
    let restored = model.deblur(blurred)?;
    let seconds = start.elapsed().as_secs_f64().max(1e-9);
    Ok(EvalRecord {
        id: id.to_string(),
        psnr_db: psnr_with(&restored, sharp, channels)?,
        ssim: ssim_with(&restored, sharp, channels)?,
        seconds,
        baseline_psnr_db: psnr_with(blurred, sharp, channels)?,
        baseline_ssim: ssim_with(blurred, sharp, channels)?,
    })
}

/// Deblurs every pair of `ds` and scores it against the sharp image.
/// Per-image failures are recorded and excluded from the aggregates.
pub fn evaluate(model: &dyn Deblurrer, ds: &PairedDataset, channels: MetricChannels, config: serde_json::Value) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset(ds.root.clone()));
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for pair_ref in &ds.pairs {
        let outcome = pair_ref
            .load()
            .and_then(|p| score_pair(model, &p.id, &p.blurred, &p.sharp, channels));
        match outcome {
            Ok(r) => {
                log::info!("{}: {:.3} dB, SSIM {:.4}, {:.3} s", r.id, r.psnr_db, r.ssim, r.seconds);
                records.push(r);
            }
            Err(e) => {
                log::warn!("{}: {e}", pair_ref.id);
                failures.push(EvalFailure {
                    id: pair_ref.id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(EvalReport::new(records, failures, channels, config))
}
