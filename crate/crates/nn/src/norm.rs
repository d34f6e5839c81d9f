use crate::{Result, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// What [`instance_norm_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Per-item, per-channel normalization to zero mean and unit (biased)
/// variance. No affine parameters.
pub fn instance_norm(x: &Tensor) -> (Tensor, InstanceNormCache) {
    let s = x.shape();
    let plane = s.plane();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    for chunk in y.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    let cache = InstanceNormCache {
        normalized: y.clone(),
        inv_std,
    };
    (y, cache)
}

pub fn instance_norm_backward(cache: &InstanceNormCache, grad_out: &Tensor) -> Result<Tensor> {
    let xhat = &cache.normalized;
    grad_out.ensure_shape(xhat.shape())?;
    let plane = xhat.shape().plane() as f64;
    let mut dx = grad_out.clone();
    for ((dchunk, xchunk), is) in dx
        .data_mut()
        .chunks_mut(xhat.shape().plane())
        .zip(xhat.data().chunks(xhat.shape().plane()))
        .zip(&cache.inv_std)
    {
        let mean_g = dchunk.iter().sum::<f64>() / plane;
        let mean_gx = dchunk.iter().zip(xchunk).map(|(g, x)| g * x).sum::<f64>() / plane;
        for (d, xh) in dchunk.iter_mut().zip(xchunk) {
            *d = is * (*d - mean_g - xh * mean_gx);
        }
    }
    Ok(dx)
}
