//! Adversarial value function, perceptual loss and the frozen feature extractor φ.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{self, Init};
use crate::nn::{Activation, ActivationLayer, Element, MaxPool2, Op, Param, Pass, Sequential, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// VGG16 convolutions up to the tap, as `(name, torchvision feature index, in, out)`.
const VGG_TRUNK: [(&str, usize, usize, usize); 7] = [
    ("block1_conv1", 0, 3, 64),
    ("block1_conv2", 2, 64, 64),
    ("block2_conv1", 5, 64, 128),
    ("block2_conv2", 7, 128, 128),
    ("block3_conv1", 10, 128, 256),
    ("block3_conv2", 12, 256, 256),
    ("block3_conv3", 14, 256, 256),
];

/// Name of the layer whose (ReLU) output defines the perceptual features.
pub const TAP_LAYER: &str = "block3_conv3";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorSource {
    /// VGG16 weights in a safetensors file using torchvision names
    /// (`features.{0,2,5,7,10,12,14}.{weight,bias}`, `[out, in, 3, 3]`).
    Pretrained { path: PathBuf },
    /// Same topology filled with deterministic He-normal weights.
    SeededRandom { seed: u64 },
}

/// Frozen VGG16 trunk through `block3_conv3`.
///
/// Inputs are `[-1, 1]` images; they are mapped to ImageNet-normalized `[0, 1]`
/// internally.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<E: Element = f32> {
    source: ExtractorSource,
    net: Sequential<E>,
}

fn assemble<E: Element>(mut conv: impl FnMut(usize, usize, usize) -> Result<Op<E>>) -> Result<Sequential<E>> {
    let mut net = Sequential::new();
    for (i, &(name, _, cin, cout)) in VGG_TRUNK.iter().enumerate() {
        net.push(name, conv(i, cin, cout)?);
        net.push(format!("{name}_relu"), Op::Act(ActivationLayer::new(Activation::Relu)));
        if name == "block1_conv2" || name == "block2_conv2" {
            let block = &name[..6];
            net.push(format!("{block}_pool"), Op::MaxPool(MaxPool2::new()));
        }
    }
    net.set_requires_grad(false);
    Ok(net)
}

pub fn build_feature_extractor<E: Element>(source: ExtractorSource) -> Result<FeatureExtractor<E>> {
    match &source {
        ExtractorSource::SeededRandom { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let net = assemble(|_, cin, cout| Ok(Op::Conv(init::conv(&mut rng, cin, cout, 3, 1, 1, true, Init::HeNormal))))?;
            Ok(FeatureExtractor { source, net })
        }
        ExtractorSource::Pretrained { path } => {
            let net = load_vgg_weights(path)?;
            Ok(FeatureExtractor { source, net })
        }
    }
}

fn load_vgg_weights<E: Element>(path: &Path) -> Result<Sequential<E>> {
    let unavailable = |why: String| Error::PretrainedUnavailable(format!("{}: {why}", path.display()));
    let bytes = std::fs::read(path).map_err(|e| unavailable(e.to_string()))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| unavailable(e.to_string()))?;
    let fetch = |key: String, shape: &[usize]| -> Result<Vec<E>> {
        let view = st.tensor(&key).map_err(|_| unavailable(format!("missing tensor {key}")))?;
        if view.shape() != shape {
            return Err(unavailable(format!("{key} has shape {:?}, expected {shape:?}", view.shape())));
        }
        crate::checkpoint::decode_values(&view).map_err(|e| unavailable(format!("{key}: {e}")))
    };
    assemble(|i, cin, cout| {
        let idx = VGG_TRUNK[i].1;
        let w = fetch(format!("features.{idx}.weight"), &[cout, cin, 3, 3])?;
        let b = fetch(format!("features.{idx}.bias"), &[cout])?;
        Ok(Op::Conv(crate::nn::Conv2d::new(cin, cout, 3, 1, 1, w, Some(b))))
    })
}

impl<E: Element> FeatureExtractor<E> {
    pub fn source(&self) -> &ExtractorSource {
        &self.source
    }

    /// Flattened feature count at the tap for an `h × w` input.
    pub fn feature_count(h: usize, w: usize) -> usize {
        (h / 4) * (w / 4) * 256
    }

    fn preprocess(x: &Tensor<E>) -> Tensor<E> {
        let mut out = x.clone();
        let [n, c, h, w] = x.shape();
        assert_eq!(c, 3, "feature extractor expects RGB input");
        for b in 0..n {
            for ch in 0..3 {
                let (m, s) = (IMAGENET_MEAN[ch], IMAGENET_STD[ch]);
                let scale = E::from_f64(0.5 / s);
                let shift = E::from_f64((0.5 - m) / s);
                let off = (b * 3 + ch) * h * w;
                for v in &mut out.data_mut()[off..off + h * w] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    /// Tap activations, `[N, 256, H/4, W/4]`.
    pub fn features(&self, x: &Tensor<E>) -> Tensor<E> {
        self.net.infer(&Self::preprocess(x))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<E>)) {
        self.net.visit_params("", f);
    }

    /// Gradient of `Σ grad_features ⊙ φ(x)` with respect to `x`.
    fn input_gradient(&mut self, x: &Tensor<E>, grad_features: impl FnOnce(&Tensor<E>) -> Tensor<E>) -> (Tensor<E>, Tensor<E>) {
        let feats = self.net.forward(&Self::preprocess(x), &mut Pass::eval());
        let g = grad_features(&feats);
        let mut gx = self.net.backward(&g);
        let [n, _, h, w] = gx.shape();
        for b in 0..n {
            for (ch, s) in IMAGENET_STD.iter().enumerate() {
                let scale = E::from_f64(0.5 / s);
                let off = (b * 3 + ch) * h * w;
                for v in &mut gx.data_mut()[off..off + h * w] {
                    *v *= scale;
                }
            }
        }
        (feats, gx)
    }
}

fn check_same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Precondition(format!(
            "perceptual loss needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/N) Σ (φ(y_true) − φ(y_pred))²` averaged over the batch.
pub fn perceptual_loss<E: Element>(extractor: &FeatureExtractor<E>, y_true: &Tensor<E>, y_pred: &Tensor<E>) -> Result<f64> {
    check_same_shape(y_true, y_pred)?;
    let ft = extractor.features(y_true);
    let fp = extractor.features(y_pred);
    Ok(mean_squared_difference(&ft, &fp))
}

fn mean_squared_difference<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Perceptual loss together with its gradient with respect to `y_pred`.
pub fn perceptual_loss_with_grad<E: Element>(
    extractor: &mut FeatureExtractor<E>,
    y_true: &Tensor<E>,
    y_pred: &Tensor<E>,
) -> Result<(f64, Tensor<E>)> {
    check_same_shape(y_true, y_pred)?;
    let ft = extractor.features(y_true);
    let mut loss = 0.0;
    let (_, grad) = extractor.input_gradient(y_pred, |fp| {
        loss = mean_squared_difference(&ft, fp);
        let k = E::from_f64(2.0 / fp.len() as f64);
        fp.zip_map(&ft, |p, t| k * (p - t))
    });
    Ok((loss, grad))
}

fn clamped(probs: &[f64], what: &'static str) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::Precondition(format!("{what} is empty")));
    }
    probs
        .iter()
        .map(|&p| {
            if p.is_finite() && (0.0..=1.0).contains(&p) {
                Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
            } else {
                Err(Error::Domain(what))
            }
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Empirical `V(D, G) = E[log D(x)] + E[log(1 − D(G(z)))]`.
pub fn adversarial_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    let r = clamped(d_real, "d_real")?;
    let f = clamped(d_fake, "d_fake")?;
    Ok(mean(r.iter().map(|p| p.ln()), r.len()) + mean(f.iter().map(|p| (1.0 - p).ln()), f.len()))
}

/// `−V(D, G)`; minimizing it maximizes the value function.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    adversarial_value(d_real, d_fake).map(|v| -v)
}

/// Gradients of [`discriminator_loss`] with respect to each probability.
pub fn discriminator_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = clamped(d_real, "d_real")?;
    let f = clamped(d_fake, "d_fake")?;
    let (nr, nf) = (r.len() as f64, f.len() as f64);
    Ok((
        r.iter().map(|p| -1.0 / (nr * p)).collect(),
        f.iter().map(|p| 1.0 / (nf * (1.0 - p))).collect(),
    ))
}

/// Non-saturating generator loss `−E[log D(G(z))]`.
pub fn generator_adversarial_loss(d_fake: &[f64]) -> Result<f64> {
    let f = clamped(d_fake, "d_fake")?;
    Ok(-mean(f.iter().map(|p| p.ln()), f.len()))
}

pub fn generator_adversarial_loss_grad(d_fake: &[f64]) -> Result<Vec<f64>> {
    let f = clamped(d_fake, "d_fake")?;
    let n = f.len() as f64;
    Ok(f.iter().map(|p| -1.0 / (n * p)).collect())
}

/// The literal generator term `E[log(1 − D(G(z)))]`, kept for comparison.
pub fn saturating_generator_loss(d_fake: &[f64]) -> Result<f64> {
    let f = clamped(d_fake, "d_fake")?;
    Ok(mean(f.iter().map(|p| (1.0 - p).ln()), f.len()))
}

pub fn saturating_generator_loss_grad(d_fake: &[f64]) -> Result<Vec<f64>> {
    let f = clamped(d_fake, "d_fake")?;
    let n = f.len() as f64;
    Ok(f.iter().map(|p| -1.0 / (n * (1.0 - p))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 100.0,
            adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.perceptual >= 0.0 && self.adversarial >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.perceptual == 0.0 && self.adversarial == 0.0 {
            return Err(Error::Config("perceptual and adversarial weights cannot both be zero".into()));
        }
        Ok(())
    }
}

pub fn generator_total_loss(g_perc: f64, g_adv: f64, weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.perceptual * g_perc + weights.adversarial * g_adv)
}

/// Losses observed in one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_perc: f64,
    pub g_total: f64,
}
