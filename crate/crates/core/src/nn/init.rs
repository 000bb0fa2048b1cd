use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Conv2d, Element};

/// Weight initialization schemes. Samples are drawn in `f64` so that the
/// same seed yields the same network in every precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    FanInUniform,
    /// `N(0, 2/fan_in)` weights, zero bias.
    HeNormal,
    /// Fan-in uniform scaled by a constant factor.
    ScaledFanInUniform(f64),
}

pub fn conv<E: Element>(
    rng: &mut impl Rng,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    init: Init,
) -> Conv2d<E> {
    let fan_in = (in_channels * kernel * kernel) as f64;
    let n = out_channels * in_channels * kernel * kernel;
    let (weight, bias): (Vec<E>, Option<Vec<E>>) = match init {
        Init::FanInUniform | Init::ScaledFanInUniform(_) => {
            let scale = match init {
                Init::ScaledFanInUniform(s) => s,
                _ => 1.0,
            };
            let bound = 1.0 / fan_in.sqrt();
            let w = (0..n)
                .map(|_| E::from_f64(scale * rng.gen_range(-bound..bound)))
                .collect();
            let b = bias.then(|| {
                (0..out_channels)
                    .map(|_| E::from_f64(scale * rng.gen_range(-bound..bound)))
                    .collect()
            });
            (w, b)
        }
        Init::HeNormal => {
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let w = (0..n).map(|_| E::from_f64(normal.sample(rng))).collect();
            (w, bias.then(|| vec![E::ZERO; out_channels]))
        }
    };
    Conv2d::new(in_channels, out_channels, kernel, stride, padding, weight, bias)
}
