//! The deblurring generator: 7×7 head, two stride-2 downsampling convolutions,
//! a stack of ResNet blocks, two resize-convolution upsampling stages and a
//! 7×7 Tanh tail.
//!
//! Default channel plan 64 → 128 → 256 gives 24 convolutions and about 11.39M
//! parameters (11.38M convolution weights and biases plus 10.5K batch-norm terms).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architecture::{ConvSpec, LayerCounts};
use crate::error::{Error, Result};
use crate::nn::init::{self, Init};
use crate::nn::{Activation, ActivationLayer, BatchNorm2d, Dropout, Element, Op, Param, Pass, Sequential, Tensor};

/// Inputs are clamped to this magnitude before entering the skip path.
const SKIP_LIMIT: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub base_channels: usize,
    pub head_kernel: usize,
    pub downsamplings: usize,
    pub resnet_blocks: usize,
    pub dropout_rate: f64,
    /// Adds `atanh(z)` to the tail pre-activation so an all-zero residual
    /// reproduces the input.
    pub global_skip: bool,
    /// Scale applied to the tail convolution's initial weights.
    pub tail_init_scale: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            base_channels: 64,
            head_kernel: 7,
            downsamplings: 2,
            resnet_blocks: 9,
            dropout_rate: 0.5,
            global_skip: true,
            tail_init_scale: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
        }
    }
}

impl GeneratorArch {
    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.downsamplings
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.downsamplings
    }

    /// Every convolution in build order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let spec = |name: String, cin, cout, k: usize, stride, bn| ConvSpec {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: k / 2,
            bias: true,
            batch_norm: bn,
        };
        let mut out = vec![spec("head.conv".into(), 3, self.base_channels, self.head_kernel, 1, true)];
        let mut ch = self.base_channels;
        for i in 1..=self.downsamplings {
            out.push(spec(format!("down{i}.conv"), ch, ch * 2, 3, 2, true));
            ch *= 2;
        }
        for i in 1..=self.resnet_blocks {
            out.push(spec(format!("block{i}.conv1"), ch, ch, 3, 1, true));
            out.push(spec(format!("block{i}.conv2"), ch, ch, 3, 1, true));
        }
        for i in 1..=self.downsamplings {
            out.push(spec(format!("up{i}.conv"), ch, ch / 2, 3, 1, true));
            ch /= 2;
        }
        out.push(spec("tail.conv".into(), ch, 3, self.head_kernel, 1, false));
        out
    }

    pub fn counts(&self) -> LayerCounts {
        LayerCounts::from_specs(&self.conv_specs())
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.head_kernel % 2 == 0 {
            return Err(Error::Config("generator needs positive width and an odd head kernel".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// The generator network G.
#[derive(Debug, Clone)]
pub struct Generator<E: Element = f32> {
    arch: GeneratorArch,
    seed: u64,
    net: Sequential<E>,
    skip_cache: Option<Tensor<E>>,
}

fn conv_op<E: Element>(rng: &mut ChaCha8Rng, spec: &ConvSpec, init: Init) -> Op<E> {
    Op::Conv(init::conv(
        rng,
        spec.in_channels,
        spec.out_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
        spec.bias,
        init,
    ))
}

/// Builds the default architecture with deterministic weights.
pub fn build_generator(seed: u64) -> Generator<f32> {
    Generator::build(GeneratorArch::default(), seed).expect("default architecture is valid")
}

impl<E: Element> Generator<E> {
    pub fn build(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = arch.conv_specs();
        let mut specs = specs.iter();
        let mut next = || specs.next().expect("conv_specs covers every stage");
        let bn = |ch| Op::BatchNorm(BatchNorm2d::new(ch, arch.bn_eps, arch.bn_momentum));
        let relu = || Op::Act(ActivationLayer::new(Activation::Relu));

        let mut net = Sequential::new();
        let head = next();
        net.push("head.conv", conv_op(&mut rng, head, Init::FanInUniform));
        net.push("head.bn", bn(head.out_channels));
        net.push("head.relu", relu());
        for i in 1..=arch.downsamplings {
            let s = next();
            net.push(format!("down{i}.conv"), conv_op(&mut rng, s, Init::FanInUniform));
            net.push(format!("down{i}.bn"), bn(s.out_channels));
            net.push(format!("down{i}.relu"), relu());
        }
        for i in 1..=arch.resnet_blocks {
            let (c1, c2) = (next(), next());
            let mut body = Sequential::new();
            body.push("conv1", conv_op(&mut rng, c1, Init::FanInUniform));
            body.push("bn1", bn(c1.out_channels));
            body.push("relu", relu());
            body.push("dropout", Op::Dropout(Dropout::new(arch.dropout_rate)));
            body.push("conv2", conv_op(&mut rng, c2, Init::FanInUniform));
            body.push("bn2", bn(c2.out_channels));
            net.push(format!("block{i}"), Op::Residual(body));
        }
        for i in 1..=arch.downsamplings {
            let s = next();
            net.push(format!("up{i}.resize"), Op::Upsample);
            net.push(format!("up{i}.conv"), conv_op(&mut rng, s, Init::FanInUniform));
            net.push(format!("up{i}.bn"), bn(s.out_channels));
            net.push(format!("up{i}.relu"), relu());
        }
        let tail = next();
        net.push("tail.conv", conv_op(&mut rng, tail, Init::ScaledFanInUniform(arch.tail_init_scale)));
        Ok(Self {
            arch,
            seed,
            net,
            skip_cache: None,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
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

    /// Counts measured on the constructed network.
    pub fn built_counts(&self) -> LayerCounts {
        LayerCounts {
            conv_layers: self.net.conv_count(),
            params: self.net.param_count(),
        }
    }

    fn check_input(&self, z: &Tensor<E>) -> Result<()> {
        let m = self.arch.size_multiple();
        if z.channels() != 3 {
            return Err(Error::Precondition(format!("generator expects 3 channels, got {}", z.channels())));
        }
        if z.height() % m != 0 || z.width() % m != 0 || z.height() == 0 || z.width() == 0 {
            return Err(Error::Precondition(format!(
                "generator input {}x{} must have both dimensions divisible by {m}; pad the image first",
                z.height(),
                z.width()
            )));
        }
        Ok(())
    }

    fn skip_term(&self, z: &Tensor<E>) -> Option<Tensor<E>> {
        self.arch.global_skip.then(|| {
            z.map(|v| {
                let c = v.to_f64().clamp(-SKIP_LIMIT, SKIP_LIMIT);
                E::from_f64(c.atanh())
            })
        })
    }

    fn finish(&self, mut pre: Tensor<E>, z: &Tensor<E>) -> Tensor<E> {
        if let Some(skip) = self.skip_term(z) {
            pre.add_assign(&skip);
        }
        pre.map(|v| v.tanh())
    }

    /// Inference: running batch-norm statistics, no dropout. Reentrant.
    pub fn infer(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(z)?;
        Ok(self.finish(self.net.infer(z), z))
    }

    /// Cached forward pass for training (or eval-mode forward when gradients are needed).
    pub fn forward(&mut self, z: &Tensor<E>, pass: &mut Pass<'_>) -> Result<Tensor<E>> {
        self.check_input(z)?;
        let pre = self.net.forward(z, pass);
        let out = self.finish(pre, z);
        self.skip_cache = Some(out.clone());
        Ok(out)
    }

    /// Back-propagates `dL/dG(z)` into the parameter gradients.
    pub fn backward(&mut self, grad_out: &Tensor<E>) {
        let out = self
            .skip_cache
            .take()
            .expect("generator backward called without a cached forward");
        let grad_pre = grad_out.zip_map(&out, |g, y| g * (E::ONE - y * y));
        self.net.backward(&grad_pre);
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<E>)) {
        self.net.visit_params("", f);
    }
}
