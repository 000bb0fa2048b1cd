use super::{Element, Param, Tensor};

/// 2-D convolution (cross-correlation, zero padding) lowered to GEMM via im2col.
///
/// Weights are laid out `[out, in, k, k]`. Only the input is cached between
/// forward and backward; the column matrix is rebuilt during backward.
#[derive(Debug, Clone)]
pub struct Conv2d<E> {
    pub weight: Param<E>,
    pub bias: Option<Param<E>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub(crate) requires_grad: bool,
    input: Option<Tensor<E>>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<E>,
        bias: Option<Vec<E>>,
    ) -> Self {
        Self {
            weight: Param::new(vec![out_channels, in_channels, kernel, kernel], weight),
            bias: bias.map(|b| Param::new(vec![out_channels], b)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            requires_grad: true,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = |d: usize| {
            let padded = d + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some((span(h)?, span(w)?))
    }

    fn geometry(&self, x: &Tensor<E>) -> Geometry {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            x.channels()
        );
        let (out_h, out_w) = self
            .output_size(x.height(), x.width())
            .unwrap_or_else(|| panic!("conv input {}x{} is smaller than its kernel", x.height(), x.width()));
        Geometry {
            channels: self.in_channels,
            height: x.height(),
            width: x.width(),
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        }
    }

    pub fn infer(&self, x: &Tensor<E>) -> Tensor<E> {
        let g = self.geometry(x);
        let spatial = g.out_h * g.out_w;
        let rows = g.channels * g.kernel * g.kernel;
        let mut out = Tensor::zeros([x.batch(), self.out_channels, g.out_h, g.out_w]);
        let mut cols = vec![E::ZERO; rows * spatial];
        for n in 0..x.batch() {
            im2col(x.item(n), &g, &mut cols);
            let dst = out.item_mut(n);
            E::gemm(
                self.out_channels,
                rows,
                spatial,
                E::ONE,
                &self.weight.value,
                rows as isize,
                1,
                &cols,
                spatial as isize,
                1,
                E::ZERO,
                dst,
                spatial as isize,
                1,
            );
            if let Some(bias) = &self.bias {
                for (o, plane) in dst.chunks_mut(spatial).enumerate() {
                    let b = bias.value[o];
                    plane.iter_mut().for_each(|v| *v += b);
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let out = self.infer(x);
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<E>) -> Tensor<E> {
        let x = self
            .input
            .take()
            .expect("conv backward called without a cached forward");
        let g = self.geometry(&x);
        let spatial = g.out_h * g.out_w;
        let rows = g.channels * g.kernel * g.kernel;
        assert_eq!(
            grad_out.shape(),
            [x.batch(), self.out_channels, g.out_h, g.out_w],
            "conv backward gradient shape mismatch"
        );
        let mut grad_in = Tensor::zeros(x.shape());
        let mut cols = vec![E::ZERO; rows * spatial];
        let mut grad_cols = vec![E::ZERO; rows * spatial];
        for n in 0..x.batch() {
            let go = grad_out.item(n);
            if self.requires_grad {
                im2col(x.item(n), &g, &mut cols);
                // dW += dOut · colsᵀ
                E::gemm(
                    self.out_channels,
                    spatial,
                    rows,
                    E::ONE,
                    go,
                    spatial as isize,
                    1,
                    &cols,
                    1,
                    spatial as isize,
                    E::ONE,
                    &mut self.weight.grad,
                    rows as isize,
                    1,
                );
                if let Some(bias) = &mut self.bias {
                    for (o, plane) in go.chunks(spatial).enumerate() {
                        bias.grad[o] += plane.iter().copied().sum::<E>();
                    }
                }
            }
            // dCols = Wᵀ · dOut
            E::gemm(
                rows,
                self.out_channels,
                spatial,
                E::ONE,
                &self.weight.value,
                1,
                rows as isize,
                go,
                spatial as isize,
                1,
                E::ZERO,
                &mut grad_cols,
                spatial as isize,
                1,
            );
            col2im(&grad_cols, &g, grad_in.item_mut(n));
        }
        grad_in
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    /// Valid output-column range `[lo, hi)` for kernel offset `kx`, so that the
    /// sampled input column stays inside the image.
    #[inline]
    fn valid_range(&self, offset: usize, extent: usize, out: usize) -> (usize, usize) {
        // input = o * stride + offset - padding must lie in [0, extent)
        let s = self.stride;
        let lo = if offset >= self.padding {
            0
        } else {
            (self.padding - offset).div_ceil(s)
        };
        let limit = extent + self.padding;
        let hi = if limit > offset {
            ((limit - offset - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<E: Element>(input: &[E], g: &Geometry, cols: &mut [E]) {
    let spatial = g.out_h * g.out_w;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid_range(kx, g.width, g.out_w);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                dst.iter_mut().for_each(|v| *v = E::ZERO);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let ix0 = x_lo + kx - g.padding;
                        dst_row[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], g: &Geometry, output: &mut [E]) {
    let spatial = g.out_h * g.out_w;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut output[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid_range(kx, g.width, g.out_w);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst_row = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in x_lo..x_hi {
                        dst_row[ox * g.stride + kx - g.padding] += src_row[ox];
                    }
                }
            }
        }
    }
}
