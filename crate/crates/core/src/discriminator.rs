//! The discriminator D: six 4×4 convolutions with LeakyReLU, global average
//! pooling of the single-channel map and a Sigmoid, giving one probability per image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architecture::{within_budget, ConvSpec, LayerCounts, DISCRIMINATOR_PARAM_TARGET};
use crate::error::{Error, Result};
use crate::nn::init::{self, Init};
use crate::nn::{sigmoid, Activation, ActivationLayer, BatchNorm2d, Element, Op, Param, Pass, Sequential, Tensor};

/// Smallest spatial extent the stride-2 stack accepts.
pub const MIN_INPUT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    /// Name of the channel plan, recorded in checkpoints.
    pub plan: String,
    /// Channel counts including the RGB input and the single output map.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl DiscriminatorArch {
    fn with_width(plan: &str, w: usize) -> Self {
        Self {
            plan: plan.to_string(),
            channels: vec![3, w, 2 * w, 4 * w, 8 * w, 8 * w, 1],
            strides: vec![2, 2, 2, 2, 1, 1],
            kernel: 4,
            padding: 1,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
        }
    }

    /// Documented channel plans in order of preference.
    pub fn candidate_plans() -> Vec<Self> {
        vec![
            Self::with_width("w64", 64),
            Self::with_width("w48", 48),
            Self::with_width("w42", 42),
        ]
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let last = self.strides.len().saturating_sub(1);
        (0..self.strides.len())
            .map(|i| ConvSpec {
                name: format!("conv{}", i + 1),
                in_channels: self.channels[i],
                out_channels: self.channels[i + 1],
                kernel: self.kernel,
                stride: self.strides[i],
                padding: self.padding,
                bias: true,
                // no normalization on the input layer or the output map
                batch_norm: i != 0 && i != last,
            })
            .collect()
    }

    pub fn counts(&self) -> LayerCounts {
        LayerCounts::from_specs(&self.conv_specs())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() + 1 || self.strides.is_empty() {
            return Err(Error::Config("discriminator needs one more channel entry than strides".into()));
        }
        if self.channels[0] != 3 || *self.channels.last().unwrap() != 1 {
            return Err(Error::Config("discriminator maps 3 channels to 1".into()));
        }
        Ok(())
    }
}

impl Default for DiscriminatorArch {
    /// First candidate plan whose audited parameter count is within budget.
    fn default() -> Self {
        let plans = Self::candidate_plans();
        plans
            .iter()
            .find(|p| within_budget(p.counts().params, DISCRIMINATOR_PARAM_TARGET))
            .cloned()
            .unwrap_or_else(|| plans.last().cloned().unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<E: Element = f32> {
    arch: DiscriminatorArch,
    seed: u64,
    net: Sequential<E>,
    cache: Option<HeadCache<E>>,
}

#[derive(Debug, Clone)]
struct HeadCache<E> {
    map_shape: [usize; 4],
    probs: Vec<E>,
}

pub fn build_discriminator(seed: u64) -> Discriminator<f32> {
    Discriminator::build(DiscriminatorArch::default(), seed).expect("default architecture is valid")
}

impl<E: Element> Discriminator<E> {
    pub fn build(arch: DiscriminatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = arch.conv_specs();
        let last = specs.len() - 1;
        let mut net = Sequential::new();
        for (i, s) in specs.iter().enumerate() {
            let idx = i + 1;
            net.push(
                format!("conv{idx}"),
                Op::Conv(init::conv(
                    &mut rng,
                    s.in_channels,
                    s.out_channels,
                    s.kernel,
                    s.stride,
                    s.padding,
                    s.bias,
                    Init::FanInUniform,
                )),
            );
            if s.batch_norm {
                net.push(format!("bn{idx}"), Op::BatchNorm(BatchNorm2d::new(s.out_channels, arch.bn_eps, arch.bn_momentum)));
            }
            if i != last {
                net.push(format!("lrelu{idx}"), Op::Act(ActivationLayer::new(Activation::LeakyRelu(arch.leaky_slope))));
            }
        }
        Ok(Self {
            arch,
            seed,
            net,
            cache: None,
        })
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn net(&self) -> &Sequential<E> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<E> {
        &mut self.net
    }

    pub fn built_counts(&self) -> LayerCounts {
        LayerCounts {
            conv_layers: self.net.conv_count(),
            params: self.net.param_count(),
        }
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::Precondition(format!("discriminator expects 3 channels, got {}", x.channels())));
        }
        if x.height() < MIN_INPUT || x.width() < MIN_INPUT {
            return Err(Error::Precondition(format!(
                "discriminator input {}x{} is smaller than the {MIN_INPUT}x{MIN_INPUT} minimum",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    fn pool_logits(map: &Tensor<E>) -> Vec<E> {
        (0..map.batch()).map(|n| {
            let item = map.item(n);
            item.iter().copied().sum::<E>() / E::from_f64(item.len() as f64)
        })
        .collect()
    }

    /// Pre-Sigmoid scores, one per image (inference mode).
    pub fn infer_logits(&self, x: &Tensor<E>) -> Result<Vec<E>> {
        self.check_input(x)?;
        Ok(Self::pool_logits(&self.net.infer(x)))
    }

    /// Probabilities that each image is a real sharp image (inference mode).
    pub fn infer(&self, x: &Tensor<E>) -> Result<Vec<E>> {
        Ok(self.infer_logits(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn forward(&mut self, x: &Tensor<E>, pass: &mut Pass<'_>) -> Result<Vec<E>> {
        self.check_input(x)?;
        let map = self.net.forward(x, pass);
        let probs: Vec<E> = Self::pool_logits(&map).into_iter().map(sigmoid).collect();
        self.cache = Some(HeadCache {
            map_shape: map.shape(),
            probs: probs.clone(),
        });
        Ok(probs)
    }

    /// Takes `dL/dp` per image, accumulates parameter gradients (when enabled)
    /// and returns `dL/dx`.
    pub fn backward(&mut self, grad_probs: &[E]) -> Tensor<E> {
        let cache = self
            .cache
            .take()
            .expect("discriminator backward called without a cached forward");
        assert_eq!(grad_probs.len(), cache.probs.len());
        let [n, c, h, w] = cache.map_shape;
        let area = E::from_f64((c * h * w) as f64);
        let mut grad_map = Tensor::zeros(cache.map_shape);
        for b in 0..n {
            let p = cache.probs[b];
            let g_logit = grad_probs[b] * p * (E::ONE - p) / area;
            grad_map.item_mut(b).iter_mut().for_each(|v| *v = g_logit);
        }
        self.net.backward(&grad_map)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.net.set_requires_grad(on);
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<E>)) {
        self.net.visit_params("", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::DISCRIMINATOR_CONV_LAYERS;

    #[test]
    fn wide_plans_exceed_budget_and_default_fits() {
        let plans = DiscriminatorArch::candidate_plans();
        assert_eq!(plans[0].counts().params, 6_962_369);
        assert!(!within_budget(plans[0].counts().params, DISCRIMINATOR_PARAM_TARGET));
        assert!(!within_budget(plans[1].counts().params, DISCRIMINATOR_PARAM_TARGET));
        let d = DiscriminatorArch::default();
        assert_eq!(d.plan, "w42");
        assert_eq!(d.counts().conv_layers, DISCRIMINATOR_CONV_LAYERS);
        assert_eq!(d.counts().params, 3_001_951);
    }

    #[test]
    fn all_kernels_are_four_by_four() {
        assert!(DiscriminatorArch::default().conv_specs().iter().all(|s| s.kernel == 4));
    }

    #[test]
    fn rejects_small_inputs() {
        let d = Discriminator::<f32>::build(DiscriminatorArch::with_width("tiny", 2), 0).unwrap();
        assert!(matches!(d.infer(&Tensor::zeros([1, 3, 32, 64])), Err(Error::Precondition(_))));
        assert_eq!(d.infer(&Tensor::zeros([2, 3, 64, 80])).unwrap().len(), 2);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut d = Discriminator::<f64>::build(DiscriminatorArch::with_width("tiny", 2), 5).unwrap();
        let x = Tensor::from_vec([2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|i| ((i as f64) * 0.013).sin()).collect());
        let weights = [0.7, -1.3];
        let probs = d.forward(&x, &mut Pass::eval()).unwrap();
        assert_eq!(probs.len(), 2);
        let gx = d.backward(&weights);
        let loss = |x: &Tensor<f64>| -> f64 { d.infer(x).unwrap().iter().zip(weights).map(|(p, w)| p * w).sum() };
        let h = 1e-5;
        for i in (0..x.len()).step_by(997) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "{i}: {fd} vs {an}");
        }
    }
}
