use rand::{Rng, RngCore};

use super::{Buffer, Element, Param, Tensor};

/// Batch normalization over (N, H, W) per channel.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`
/// with the biased batch variance.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<E> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub running_mean: Buffer<E>,
    pub running_var: Buffer<E>,
    pub eps: f64,
    pub momentum: f64,
    pub(crate) requires_grad: bool,
    cache: Option<BnCache<E>>,
}

#[derive(Debug, Clone)]
struct BnCache<E> {
    normalized: Tensor<E>,
    inv_std: Vec<E>,
    batch_stats: bool,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Param::filled(vec![channels], E::ONE),
            beta: Param::filled(vec![channels], E::ZERO),
            running_mean: Buffer {
                shape: vec![channels],
                value: vec![E::ZERO; channels],
            },
            running_var: Buffer {
                shape: vec![channels],
                value: vec![E::ONE; channels],
            },
            eps,
            momentum,
            requires_grad: true,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn normalize(&self, x: &Tensor<E>, mean: &[E], inv_std: &[E]) -> (Tensor<E>, Tensor<E>) {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (g, be, m, is) = (self.gamma.value[ch], self.beta.value[ch], mean[ch], inv_std[ch]);
                let src = &x.data()[off..off + plane];
                let nd = &mut normalized.data_mut()[off..off + plane];
                for (d, &v) in nd.iter_mut().zip(src) {
                    *d = (v - m) * is;
                }
                let od = &mut out.data_mut()[off..off + plane];
                for (o, &v) in od.iter_mut().zip(normalized.data()[off..off + plane].iter()) {
                    *o = g * v + be;
                }
            }
        }
        (normalized, out)
    }

    fn running_inv_std(&self) -> Vec<E> {
        self.running_var
            .value
            .iter()
            .map(|&v| E::ONE / (v + E::from_f64(self.eps)).sqrt())
            .collect()
    }

    pub fn infer(&self, x: &Tensor<E>) -> Tensor<E> {
        let inv = self.running_inv_std();
        self.normalize(x, &self.running_mean.value, &inv).1
    }

    pub fn forward(&mut self, x: &Tensor<E>, training: bool) -> Tensor<E> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "batch norm channel mismatch");
        if !training {
            let inv = self.running_inv_std();
            let (normalized, out) = self.normalize(x, &self.running_mean.value, &inv);
            self.cache = Some(BnCache {
                normalized,
                inv_std: inv,
                batch_stats: false,
            });
            return out;
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![E::ZERO; c];
        let mut var = vec![E::ZERO; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                s += x.data()[off..off + plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let m = s / count;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sq += x.data()[off..off + plane]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = E::from_f64(m);
            var[ch] = E::from_f64(sq / count);
        }
        let inv_std: Vec<E> = var
            .iter()
            .map(|&v| E::ONE / (v + E::from_f64(self.eps)).sqrt())
            .collect();
        let (normalized, out) = self.normalize(x, &mean, &inv_std);
        let mom = E::from_f64(self.momentum);
        let rest = E::ONE - mom;
        for ch in 0..c {
            self.running_mean.value[ch] = mom * self.running_mean.value[ch] + rest * mean[ch];
            self.running_var.value[ch] = mom * self.running_var.value[ch] + rest * var[ch];
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            batch_stats: true,
        });
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<E>) -> Tensor<E> {
        let cache = self
            .cache
            .take()
            .expect("batch norm backward called without a cached forward");
        let [n, c, h, w] = grad_out.shape();
        let plane = h * w;
        let count = E::from_f64((n * plane) as f64);
        let mut grad_in = Tensor::zeros(grad_out.shape());
        for ch in 0..c {
            let mut sum_g = E::ZERO;
            let mut sum_gx = E::ZERO;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for (&g, &xh) in grad_out.data()[off..off + plane]
                    .iter()
                    .zip(&cache.normalized.data()[off..off + plane])
                {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            if self.requires_grad {
                self.gamma.grad[ch] += sum_gx;
                self.beta.grad[ch] += sum_g;
            }
            let gamma = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * plane;
                let go = &grad_out.data()[off..off + plane];
                let xh = &cache.normalized.data()[off..off + plane];
                let gi = &mut grad_in.data_mut()[off..off + plane];
                if cache.batch_stats {
                    let k = gamma * is / count;
                    for i in 0..plane {
                        gi[i] = k * (count * go[i] - sum_g - xh[i] * sum_gx);
                    }
                } else {
                    for i in 0..plane {
                        gi[i] = gamma * is * go[i];
                    }
                }
            }
        }
        grad_in
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Parameter-free elementwise and resampling operations.
#[derive(Debug, Clone)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<E: Element>(&self, v: E) -> E {
        match *self {
            Activation::Relu => {
                if v > E::ZERO {
                    v
                } else {
                    E::ZERO
                }
            }
            Activation::LeakyRelu(slope) => {
                if v > E::ZERO {
                    v
                } else {
                    E::from_f64(slope) * v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<E: Element>(&self, x: E, y: E) -> E {
        match *self {
            Activation::Relu => {
                if x > E::ZERO {
                    E::ONE
                } else {
                    E::ZERO
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > E::ZERO {
                    E::ONE
                } else {
                    E::from_f64(slope)
                }
            }
            Activation::Tanh => E::ONE - y * y,
            Activation::Sigmoid => y * (E::ONE - y),
        }
    }
}

pub fn sigmoid<E: Element>(v: E) -> E {
    if v >= E::ZERO {
        E::ONE / (E::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::ONE + e)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationLayer<E> {
    pub kind: Activation,
    cache: Option<(Tensor<E>, Tensor<E>)>,
}

impl<E: Element> ActivationLayer<E> {
    pub fn new(kind: Activation) -> Self {
        Self { kind, cache: None }
    }

    pub fn infer(&self, x: &Tensor<E>) -> Tensor<E> {
        x.map(|v| self.kind.apply(v))
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let y = self.infer(x);
        self.cache = Some((x.clone(), y.clone()));
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor<E>) -> Tensor<E> {
        let (x, y) = self.cache.take().expect("activation backward without forward");
        let mut g = grad_out.clone();
        for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
            *gv *= self.kind.derivative(xv, yv);
        }
        g
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` during training.
#[derive(Debug, Clone)]
pub struct Dropout<E> {
    pub rate: f64,
    mask: Option<Vec<E>>,
}

impl<E: Element> Dropout<E> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Self { rate, mask: None }
    }

    pub fn forward<R: RngCore + ?Sized>(&mut self, x: &Tensor<E>, rng: Option<&mut R>) -> Tensor<E> {
        let Some(rng) = rng else {
            self.mask = None;
            return x.clone();
        };
        let keep = E::from_f64(1.0 / (1.0 - self.rate));
        let mask: Vec<E> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < self.rate {
                    E::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor<E>) -> Tensor<E> {
        let mut g = grad_out.clone();
        if let Some(mask) = self.mask.take() {
            for (v, &m) in g.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        g
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<E: Element>(g: &Tensor<E>) -> Tensor<E> {
    let [n, c, oh, ow] = g.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    out
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2<E> {
    cache: Option<(Vec<usize>, [usize; 4])>,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Element> MaxPool2<E> {
    pub fn new() -> Self {
        Self {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    fn pool(x: &Tensor<E>) -> (Tensor<E>, Vec<usize>) {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + (2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    out.data_mut()[o] = x.data()[best];
                    arg[o] = best;
                }
            }
        }
        (out, arg)
    }

    pub fn infer(&self, x: &Tensor<E>) -> Tensor<E> {
        Self::pool(x).0
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let (out, arg) = Self::pool(x);
        self.cache = Some((arg, x.shape()));
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<E>) -> Tensor<E> {
        let (arg, shape) = self.cache.take().expect("max pool backward without forward");
        let mut g = Tensor::zeros(shape);
        for (&i, &v) in arg.iter().zip(grad_out.data()) {
            g.data_mut()[i] += v;
        }
        g
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
