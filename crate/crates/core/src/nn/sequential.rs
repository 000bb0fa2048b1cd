use rand::RngCore;

use super::layers::{upsample2x, upsample2x_backward, ActivationLayer, BatchNorm2d, Dropout, MaxPool2};
use super::{Buffer, Conv2d, Element, Param, Tensor};

/// How a cached forward pass behaves.
///
/// `training` selects batch statistics in batch norm; dropout is active only
/// when an RNG is supplied.
pub struct Pass<'a> {
    pub training: bool,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Pass<'a> {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            training: true,
            rng: Some(rng),
        }
    }

    /// Batch statistics, no dropout.
    pub fn train_without_dropout() -> Self {
        Self {
            training: true,
            rng: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op<E> {
    Conv(Conv2d<E>),
    BatchNorm(BatchNorm2d<E>),
    Act(ActivationLayer<E>),
    Dropout(Dropout<E>),
    Upsample,
    MaxPool(MaxPool2<E>),
    /// `x + body(x)`
    Residual(Sequential<E>),
}

/// Ordered list of named operations with manual reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Sequential<E> {
    layers: Vec<(String, Op<E>)>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<E: Element> Sequential<E> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op<E>) -> &mut Self {
        self.layers.push((name.into(), op));
        self
    }

    pub fn layers(&self) -> &[(String, Op<E>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Op<E>)] {
        &mut self.layers
    }

    /// Inference without caching; batch norm uses running statistics.
    pub fn infer(&self, x: &Tensor<E>) -> Tensor<E> {
        let mut cur = x.clone();
        for (_, op) in &self.layers {
            cur = match op {
                Op::Conv(c) => c.infer(&cur),
                Op::BatchNorm(b) => b.infer(&cur),
                Op::Act(a) => a.infer(&cur),
                Op::Dropout(_) => cur,
                Op::Upsample => upsample2x(&cur),
                Op::MaxPool(p) => p.infer(&cur),
                Op::Residual(body) => {
                    let mut y = body.infer(&cur);
                    y.add_assign(&cur);
                    y
                }
            };
        }
        cur
    }

    /// Forward pass that caches what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<E>, pass: &mut Pass<'_>) -> Tensor<E> {
        let mut cur = x.clone();
        for (_, op) in &mut self.layers {
            cur = match op {
                Op::Conv(c) => c.forward(&cur),
                Op::BatchNorm(b) => b.forward(&cur, pass.training),
                Op::Act(a) => a.forward(&cur),
                Op::Dropout(d) => {
                    let rng = if pass.training { pass.rng.as_deref_mut() } else { None };
                    d.forward(&cur, rng)
                }
                Op::Upsample => upsample2x(&cur),
                Op::MaxPool(p) => p.forward(&cur),
                Op::Residual(body) => {
                    let mut y = body.forward(&cur, pass);
                    y.add_assign(&cur);
                    y
                }
            };
        }
        cur
    }

    /// Back-propagates `grad_out`, accumulating parameter gradients (unless
    /// disabled) and returning the gradient with respect to the input.
    pub fn backward(&mut self, grad_out: &Tensor<E>) -> Tensor<E> {
        let mut g = grad_out.clone();
        for (_, op) in self.layers.iter_mut().rev() {
            g = match op {
                Op::Conv(c) => c.backward(&g),
                Op::BatchNorm(b) => b.backward(&g),
                Op::Act(a) => a.backward(&g),
                Op::Dropout(d) => d.backward(&g),
                Op::Upsample => upsample2x_backward(&g),
                Op::MaxPool(p) => p.backward(&g),
                Op::Residual(body) => {
                    let mut through = body.backward(&g);
                    through.add_assign(&g);
                    through
                }
            };
        }
        g
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<E>)) {
        for (name, op) in &self.layers {
            let path = join(prefix, name);
            match op {
                Op::Conv(c) => {
                    f(&join(&path, "weight"), &c.weight);
                    if let Some(b) = &c.bias {
                        f(&join(&path, "bias"), b);
                    }
                }
                Op::BatchNorm(b) => {
                    f(&join(&path, "gamma"), &b.gamma);
                    f(&join(&path, "beta"), &b.beta);
                }
                Op::Residual(body) => body.visit_params(&path, f),
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<E>)) {
        for (name, op) in &mut self.layers {
            let path = join(prefix, name);
            match op {
                Op::Conv(c) => {
                    f(&join(&path, "weight"), &mut c.weight);
                    if let Some(b) = &mut c.bias {
                        f(&join(&path, "bias"), b);
                    }
                }
                Op::BatchNorm(b) => {
                    f(&join(&path, "gamma"), &mut b.gamma);
                    f(&join(&path, "beta"), &mut b.beta);
                }
                Op::Residual(body) => body.visit_params_mut(&path, f),
                _ => {}
            }
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Buffer<E>)) {
        for (name, op) in &self.layers {
            let path = join(prefix, name);
            match op {
                Op::BatchNorm(b) => {
                    f(&join(&path, "running_mean"), &b.running_mean);
                    f(&join(&path, "running_var"), &b.running_var);
                }
                Op::Residual(body) => body.visit_buffers(&path, f),
                _ => {}
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Buffer<E>)) {
        for (name, op) in &mut self.layers {
            let path = join(prefix, name);
            match op {
                Op::BatchNorm(b) => {
                    f(&join(&path, "running_mean"), &mut b.running_mean);
                    f(&join(&path, "running_var"), &mut b.running_var);
                }
                Op::Residual(body) => body.visit_buffers_mut(&path, f),
                _ => {}
            }
        }
    }

    /// Turns parameter-gradient accumulation on or off; input gradients are
    /// always produced.
    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, op) in &mut self.layers {
            match op {
                Op::Conv(c) => c.requires_grad = on,
                Op::BatchNorm(b) => b.requires_grad = on,
                Op::Residual(body) => body.set_requires_grad(on),
                _ => {}
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn clear_cache(&mut self) {
        for (_, op) in &mut self.layers {
            match op {
                Op::Conv(c) => c.clear_cache(),
                Op::BatchNorm(b) => b.clear_cache(),
                Op::Act(a) => a.clear_cache(),
                Op::Dropout(d) => d.clear_cache(),
                Op::MaxPool(p) => p.clear_cache(),
                Op::Residual(body) => body.clear_cache(),
                Op::Upsample => {}
            }
        }
    }

    /// Number of convolution layers, counting those nested in residual bodies.
    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(_, op)| match op {
                Op::Conv(_) => 1,
                Op::Residual(body) => body.conv_count(),
                _ => 0,
            })
            .sum()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}
