use rand::Rng;
use serde::{Deserialize, Serialize};
use xmodal_nn::{
    instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, Conv2d, ConvGeom,
    ConvParams, InstanceNormCache, Tensor,
};

use super::{INIT_STD, LEAKY_SLOPE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Stride-2 layers after the first; the 3-layer default has a 70x70
    /// receptive field.
    pub n_layers: usize,
    pub base_channels: usize,
    /// Channels of one image; the discriminator sees an ear/face pair.
    pub image_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl DiscriminatorConfig {
    pub fn full_scale() -> Self {
        Self {
            n_layers: 3,
            base_channels: 64,
            image_channels: 3,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            base_channels: 32,
            ..Self::full_scale()
        }
    }

    /// Side length of the logit grid for a square input of side `size`,
    /// or `None` when the input is too small.
    pub fn logit_size(&self, size: usize) -> Option<usize> {
        self.geoms()
            .iter()
            .try_fold(size, |s, g| g.out_size(s).filter(|&o| o > 0))
    }

    fn geoms(&self) -> Vec<ConvGeom> {
        let nf = |k: usize| self.base_channels * (1usize << k).min(8);
        let mut geoms = vec![ConvGeom::new(2 * self.image_channels, nf(0), 4, 2, 1)];
        for k in 1..self.n_layers {
            geoms.push(ConvGeom::new(nf(k - 1), nf(k), 4, 2, 1));
        }
        geoms.push(ConvGeom::new(
            nf(self.n_layers - 1),
            nf(self.n_layers),
            4,
            1,
            1,
        ));
        geoms.push(ConvGeom::new(nf(self.n_layers), 1, 4, 1, 1));
        geoms
    }
}

/// Patch discriminator over channel-concatenated `(ear, face)` pairs.
///
/// Layer stack: conv s2 + LeakyReLU, then `n_layers - 1` conv s2 + instance
/// norm + LeakyReLU, one conv s1 + instance norm + LeakyReLU, and a final
/// 1-channel conv s1 producing the logit grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
}

pub struct DiscriminatorTape {
    /// Input of each conv layer.
    inputs: Vec<Tensor>,
    /// Pre-activation value of each hidden layer (after norm when present).
    pre_act: Vec<Tensor>,
    norms: Vec<Option<InstanceNormCache>>,
    ear_channels: usize,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.n_layers == 0 || config.base_channels == 0 || config.image_channels == 0 {
            return Err(Error::InvalidArgument(
                "discriminator layers and channels must be positive".into(),
            ));
        }
        let convs = config
            .geoms()
            .into_iter()
            .map(|g| Conv2d::new(g, INIT_STD, rng))
            .collect();
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&ConvParams> {
        self.convs.iter().map(|c| &c.params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ConvParams> {
        self.convs.iter_mut().map(|c| &mut c.params).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.convs.len()).map(|i| format!("conv.{i}")).collect()
    }

    pub fn set_params(&mut self, params: Vec<ConvParams>) -> Result<()> {
        if params.len() != self.convs.len() {
            return Err(Error::Shape(format!(
                "discriminator expects {} parameter groups, got {}",
                self.convs.len(),
                params.len()
            )));
        }
        for (conv, p) in self.convs.iter_mut().zip(params) {
            *conv = Conv2d::from_params(conv.geom, p)?;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<ConvParams> {
        self.params()
            .into_iter()
            .map(ConvParams::zeros_like)
            .collect()
    }

    pub fn forward(&self, ear: &Tensor, face: &Tensor) -> Result<Tensor> {
        Ok(self.forward_tape(ear, face)?.0)
    }

    pub fn forward_tape(&self, ear: &Tensor, face: &Tensor) -> Result<(Tensor, DiscriminatorTape)> {
        let (se, sf) = (ear.shape(), face.shape());
        if se.n != sf.n {
            return Err(Error::Shape(format!(
                "discriminator batch sizes differ: {} ears vs {} faces",
                se.n, sf.n
            )));
        }
        if (se.h, se.w) != (sf.h, sf.w) {
            return Err(Error::Shape(format!(
                "ear {}x{} and face {}x{} are not aligned",
                se.h, se.w, sf.h, sf.w
            )));
        }
        if se.c + sf.c != 2 * self.config.image_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels per image",
                self.config.image_channels
            )));
        }
        let last = self.convs.len() - 1;
        let mut x = Tensor::concat_channels(ear, face)?;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre_act = Vec::with_capacity(last);
        let mut norms = Vec::with_capacity(last);
        for (i, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(&x)?;
            inputs.push(x);
            if i == last {
                return Ok((
                    z,
                    DiscriminatorTape {
                        inputs,
                        pre_act,
                        norms,
                        ear_channels: se.c,
                    },
                ));
            }
            let (p, cache) = if i == 0 {
                (z, None)
            } else {
                let (n, c) = instance_norm(&z);
                (n, Some(c))
            };
            x = leaky_relu(&p, LEAKY_SLOPE);
            pre_act.push(p);
            norms.push(cache);
        }
        unreachable!("discriminator has at least two layers")
    }

    /// Back-propagate logit gradients. Parameter gradients go into `grads`
    /// when given; returns the gradient with respect to the face input when
    /// `need_face_grad` is set.
    pub fn backward(
        &self,
        tape: &DiscriminatorTape,
        grad_logits: &Tensor,
        mut grads: Option<&mut [ConvParams]>,
        need_face_grad: bool,
    ) -> Result<Option<Tensor>> {
        let last = self.convs.len() - 1;
        let mut g = grad_logits.clone();
        for i in (0..=last).rev() {
            let need_input = i > 0 || need_face_grad;
            let gx = self.convs[i].backward(
                &tape.inputs[i],
                &g,
                grads.as_deref_mut().map(|gs| &mut gs[i]),
                need_input,
            )?;
            let Some(gx) = gx else {
                return Ok(None);
            };
            if i == 0 {
                let (_, g_face) = gx.split_channels(tape.ear_channels);
                return Ok(Some(g_face));
            }
            let k = i - 1;
            g = leaky_relu_backward(&tape.pre_act[k], &gx, LEAKY_SLOPE)?;
            if let Some(cache) = &tape.norms[k] {
                g = instance_norm_backward(cache, &g)?;
            }
        }
        unreachable!("loop returns at layer 0")
    }
}
