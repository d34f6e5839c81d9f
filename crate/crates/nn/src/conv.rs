use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::gemm::gemm;
use crate::{NnError, Result, Shape, Tensor};

/// Square-kernel convolution geometry shared by [`Conv2d`] and
/// [`ConvTranspose2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a forward convolution over `size` input pixels.
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `size` input pixels.
    pub fn transposed_out_size(&self, size: usize) -> Option<usize> {
        ((size.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }

    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }
}

/// Weight and bias buffers. Also used for gradients and optimizer moments,
/// which share the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros_like(other: &ConvParams) -> Self {
        Self {
            weight: vec![0.0; other.weight.len()],
            bias: vec![0.0; other.bias.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.weight.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn normal(weight_len: usize, bias_len: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite positive std");
        Self {
            weight: (0..weight_len).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; bias_len],
        }
    }
}

/// Lower each receptive field of `x` (one `c x h x w` item) into a column:
/// `cols` is `(c*k*k) x (ho*wo)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let spatial = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let k = geom.kernel;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let spatial = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in y.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(grad_out: &[f64], bias_grad: &mut [f64], plane: usize) {
    for (chunk, g) in grad_out.chunks(plane).zip(bias_grad.iter_mut()) {
        *g += chunk.iter().sum::<f64>();
    }
}

fn check_channels(x: &Tensor, expected: usize) -> Result<()> {
    if x.shape().c != expected {
        return Err(NnError::Channels {
            expected,
            got: x.shape().c,
        });
    }
    Ok(())
}

/// 2-D convolution; weight layout `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub geom: ConvGeom,
    pub params: ConvParams,
}

impl Conv2d {
    pub fn new(geom: ConvGeom, init_std: f64, rng: &mut impl Rng) -> Self {
        let weight_len = geom.out_channels * geom.patch_len(geom.in_channels);
        Self {
            geom,
            params: ConvParams::normal(weight_len, geom.out_channels, init_std, rng),
        }
    }

    pub fn from_params(geom: ConvGeom, params: ConvParams) -> Result<Self> {
        let expected = geom.out_channels * geom.patch_len(geom.in_channels);
        if params.weight.len() != expected {
            return Err(NnError::ParamLength {
                expected,
                got: params.weight.len(),
            });
        }
        if params.bias.len() != geom.out_channels {
            return Err(NnError::ParamLength {
                expected: geom.out_channels,
                got: params.bias.len(),
            });
        }
        Ok(Self { geom, params })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let too_small = || NnError::TooSmall {
            h: input.h,
            w: input.w,
            kernel: self.geom.kernel,
            padding: self.geom.padding,
        };
        let h = self.geom.out_size(input.h).ok_or_else(too_small)?;
        let w = self.geom.out_size(input.w).ok_or_else(too_small)?;
        Ok(Shape::new(input.n, self.geom.out_channels, h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.geom.in_channels)?;
        let s = x.shape();
        let out_shape = self.output_shape(s)?;
        let (ho, wo) = (out_shape.h, out_shape.w);
        let patch = self.geom.patch_len(s.c);
        let mut cols = vec![0.0; patch * ho * wo];
        let mut y = Tensor::zeros(out_shape);
        for i in 0..s.n {
            im2col(x.sample(i), s.c, s.h, s.w, &self.geom, ho, wo, &mut cols);
            let yi = y.sample_mut(i);
            gemm(
                false,
                false,
                self.geom.out_channels,
                ho * wo,
                patch,
                &self.params.weight,
                &cols,
                0.0,
                yi,
            );
            add_bias(yi, &self.params.bias, ho * wo);
        }
        Ok(y)
    }

    /// Back-propagate `grad_out` given the forward input `x`. Parameter
    /// gradients are added into `param_grads` when provided; the input
    /// gradient is computed only when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        param_grads: Option<&mut ConvParams>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let s = x.shape();
        grad_out.ensure_shape(self.output_shape(s)?)?;
        let (ho, wo) = (grad_out.shape().h, grad_out.shape().w);
        let spatial = ho * wo;
        let patch = self.geom.patch_len(s.c);
        let oc = self.geom.out_channels;
        let mut cols = vec![0.0; patch * spatial];
        let mut dx = need_input_grad.then(|| Tensor::zeros(s));
        let mut grads = param_grads;
        for i in 0..s.n {
            let gy = grad_out.sample(i);
            if let Some(g) = grads.as_deref_mut() {
                im2col(x.sample(i), s.c, s.h, s.w, &self.geom, ho, wo, &mut cols);
                gemm(
                    false,
                    true,
                    oc,
                    patch,
                    spatial,
                    gy,
                    &cols,
                    1.0,
                    &mut g.weight,
                );
                accumulate_bias_grad(gy, &mut g.bias, spatial);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    true,
                    false,
                    patch,
                    spatial,
                    oc,
                    &self.params.weight,
                    gy,
                    0.0,
                    &mut cols,
                );
                col2im(&cols, s.c, s.h, s.w, &self.geom, ho, wo, dx.sample_mut(i));
            }
        }
        Ok(dx)
    }
}

/// Transposed 2-D convolution (the adjoint of [`Conv2d`] with the same
/// geometry, plus bias); weight layout `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub geom: ConvGeom,
    pub params: ConvParams,
}

impl ConvTranspose2d {
    pub fn new(geom: ConvGeom, init_std: f64, rng: &mut impl Rng) -> Self {
        let weight_len = geom.in_channels * geom.patch_len(geom.out_channels);
        Self {
            geom,
            params: ConvParams::normal(weight_len, geom.out_channels, init_std, rng),
        }
    }

    pub fn from_params(geom: ConvGeom, params: ConvParams) -> Result<Self> {
        let expected = geom.in_channels * geom.patch_len(geom.out_channels);
        if params.weight.len() != expected {
            return Err(NnError::ParamLength {
                expected,
                got: params.weight.len(),
            });
        }
        if params.bias.len() != geom.out_channels {
            return Err(NnError::ParamLength {
                expected: geom.out_channels,
                got: params.bias.len(),
            });
        }
        Ok(Self { geom, params })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let too_small = || NnError::TooSmall {
            h: input.h,
            w: input.w,
            kernel: self.geom.kernel,
            padding: self.geom.padding,
        };
        let h = self
            .geom
            .transposed_out_size(input.h)
            .ok_or_else(too_small)?;
        let w = self
            .geom
            .transposed_out_size(input.w)
            .ok_or_else(too_small)?;
        Ok(Shape::new(input.n, self.geom.out_channels, h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.geom.in_channels)?;
        let s = x.shape();
        let out_shape = self.output_shape(s)?;
        let spatial = s.plane();
        let patch = self.geom.patch_len(self.geom.out_channels);
        let mut cols = vec![0.0; patch * spatial];
        let mut y = Tensor::zeros(out_shape);
        for i in 0..s.n {
            gemm(
                true,
                false,
                patch,
                spatial,
                s.c,
                &self.params.weight,
                x.sample(i),
                0.0,
                &mut cols,
            );
            let yi = y.sample_mut(i);
            col2im(
                &cols,
                out_shape.c,
                out_shape.h,
                out_shape.w,
                &self.geom,
                s.h,
                s.w,
                yi,
            );
            add_bias(yi, &self.params.bias, out_shape.plane());
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        param_grads: Option<&mut ConvParams>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let s = x.shape();
        let out_shape = self.output_shape(s)?;
        grad_out.ensure_shape(out_shape)?;
        let spatial = s.plane();
        let patch = self.geom.patch_len(out_shape.c);
        let mut cols = vec![0.0; patch * spatial];
        let mut dx = need_input_grad.then(|| Tensor::zeros(s));
        let mut grads = param_grads;
        for i in 0..s.n {
            let gy = grad_out.sample(i);
            im2col(
                gy,
                out_shape.c,
                out_shape.h,
                out_shape.w,
                &self.geom,
                s.h,
                s.w,
                &mut cols,
            );
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    false,
                    true,
                    s.c,
                    patch,
                    spatial,
                    x.sample(i),
                    &cols,
                    1.0,
                    &mut g.weight,
                );
                accumulate_bias_grad(gy, &mut g.bias, out_shape.plane());
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    false,
                    false,
                    s.c,
                    spatial,
                    patch,
                    &self.params.weight,
                    &cols,
                    0.0,
                    dx.sample_mut(i),
                );
            }
        }
        Ok(dx)
    }
}
