use rand::Rng;

use crate::{Result, Shape, Tensor};

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through [`leaky_relu`] given the forward input.
pub fn leaky_relu_backward(x: &Tensor, grad_out: &Tensor, slope: f64) -> Result<Tensor> {
    grad_out.ensure_shape(x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    leaky_relu(x, 0.0)
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    leaky_relu_backward(x, grad_out, 0.0)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Gradient through [`tanh`] given the forward output.
pub fn tanh_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(y.shape())?;
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&t, &g)| g * (1.0 - t * t))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Inverted-dropout multipliers: `0` for dropped units, `1/(1-p)` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask(Vec<f64>);

pub fn dropout_forward(x: &Tensor, rate: f64, rng: &mut impl Rng) -> (Tensor, DropoutMask) {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.data().len())
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    (
        Tensor::from_vec(x.shape(), data).expect("same shape"),
        DropoutMask(mask),
    )
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Tensor {
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.0)
        .map(|(g, m)| g * m)
        .collect();
    Tensor::from_vec(grad_out.shape(), data).expect("same shape")
}

/// `N x C x H x W -> N x C x 1 x 1` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane() as f64;
    let data = x
        .data()
        .chunks(s.plane())
        .map(|c| c.iter().sum::<f64>() / plane)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(Shape::new(input_shape.n, input_shape.c, 1, 1))?;
    let plane = input_shape.plane();
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::from_vec(input_shape, data)
}
