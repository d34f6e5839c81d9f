use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xmodal_nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, Conv2d, ConvGeom,
    ConvParams, Shape, Tensor,
};

use super::LEAKY_SLOPE;
use crate::dataset::resize_bilinear;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::losses::FeatureVector;

/// How images are presented to an embedding network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocessing {
    pub range: ValueRange,
    /// Square side the network expects; `None` accepts any size.
    #[serde(default)]
    pub resize: Option<usize>,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            range: ValueRange::Symmetric,
            resize: None,
        }
    }
}

/// Layer description of a strided embedding CNN: `3x3` stride-2 convolutions
/// with LeakyReLU, followed by global average pooling. The last entry of
/// `widths` is the embedding dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl EmbeddingArch {
    /// Four blocks `32, 64, 128, dim`.
    pub fn builtin(dim: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 64, 128, dim],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn geoms(&self) -> Vec<ConvGeom> {
        let mut cin = self.in_channels;
        self.widths
            .iter()
            .map(|&w| {
                let g = ConvGeom::new(cin, w, 3, 2, 1);
                cin = w;
                g
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid embedding architecture {self:?}"
            )));
        }
        Ok(())
    }
}

/// Frozen feature extractor. Nothing here mutates the weights; gradients
/// flow to the input only.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork {
    arch: EmbeddingArch,
    convs: Vec<Conv2d>,
    preprocessing: Preprocessing,
}

pub struct EmbeddingTape {
    /// Pre-activation output of each conv.
    pre_act: Vec<Tensor>,
    /// Input of each conv.
    inputs: Vec<Tensor>,
}

impl EmbeddingNetwork {
    /// He-normal initialization from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(arch: EmbeddingArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = arch
            .geoms()
            .into_iter()
            .map(|g| {
                let fan_in = (g.in_channels * g.kernel * g.kernel) as f64;
                Conv2d::new(g, (2.0 / fan_in).sqrt(), &mut rng)
            })
            .collect();
        Ok(Self {
            arch,
            convs,
            preprocessing: Preprocessing::default(),
        })
    }

    pub fn from_params(arch: EmbeddingArch, params: Vec<ConvParams>) -> Result<Self> {
        arch.validate()?;
        let geoms = arch.geoms();
        if params.len() != geoms.len() {
            return Err(Error::Shape(format!(
                "embedding network expects {} layers, got {}",
                geoms.len(),
                params.len()
            )));
        }
        let convs = geoms
            .into_iter()
            .zip(params)
            .map(|(g, p)| Conv2d::from_params(g, p).map_err(Error::from))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch,
            convs,
            preprocessing: Preprocessing::default(),
        })
    }

    pub fn with_preprocessing(mut self, preprocessing: Preprocessing) -> Self {
        self.preprocessing = preprocessing;
        self
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    pub fn arch(&self) -> &EmbeddingArch {
        &self.arch
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn params(&self) -> Vec<&ConvParams> {
        self.convs.iter().map(|c| &c.params).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.convs.len())
            .map(|i| format!("block.{i}"))
            .collect()
    }

    /// SHA-256 over all parameter bits, for frozen-weight checks.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.weight.iter().chain(&p.bias) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Embed images of any declared range, applying the preprocessing.
    pub fn embed_images(&self, images: &[&ImageTensor]) -> Result<Vec<FeatureVector>> {
        let batch = match self.preprocessing.resize {
            Some(side) => {
                let resized = images
                    .iter()
                    .map(|img| resize_bilinear(img, side, side))
                    .collect::<Result<Vec<_>>>()?;
                ImageTensor::batch(
                    &resized.iter().collect::<Vec<_>>(),
                    self.preprocessing.range,
                )?
            }
            None => ImageTensor::batch(images, self.preprocessing.range)?,
        };
        self.embed(&batch)
    }

    /// Convert a `[-1, 1]` network batch into this network's input range.
    /// Returns the converted batch and the derivative of the affine map.
    pub fn prepare_network_batch(&self, batch: &Tensor) -> Result<(Tensor, f64)> {
        let s = batch.shape();
        if let Some(side) = self.preprocessing.resize {
            if (s.h, s.w) != (side, side) {
                return Err(Error::Config(format!(
                    "embedding network expects {side}x{side} inputs but training images are {}x{}",
                    s.h, s.w
                )));
            }
        }
        Ok(match self.preprocessing.range {
            ValueRange::Symmetric => (batch.clone(), 1.0),
            ValueRange::Unit => (batch.map(|v| 0.5 * (v + 1.0)), 0.5),
        })
    }

    pub fn embed(&self, batch: &Tensor) -> Result<Vec<FeatureVector>> {
        Ok(self.embed_tape(batch)?.0)
    }

    pub fn embed_tape(&self, batch: &Tensor) -> Result<(Vec<FeatureVector>, EmbeddingTape)> {
        if batch.shape().c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "embedding network expects {} channels, got {}",
                self.arch.in_channels,
                batch.shape().c
            )));
        }
        let mut x = batch.clone();
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre_act = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let z = conv.forward(&x)?;
            inputs.push(x);
            x = leaky_relu(&z, LEAKY_SLOPE);
            pre_act.push(z);
        }
        let pooled = global_avg_pool(&x);
        let feats = (0..pooled.shape().n)
            .map(|i| FeatureVector::pooled(pooled.sample(i).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, EmbeddingTape { pre_act, inputs }))
    }

    /// Gradient with respect to the input batch, given one gradient vector
    /// per embedded item.
    pub fn backward_input(&self, tape: &EmbeddingTape, feat_grads: &[Vec<f64>]) -> Result<Tensor> {
        let last = tape.pre_act.last().expect("at least one layer");
        let s = last.shape();
        if feat_grads.len() != s.n || feat_grads.iter().any(|g| g.len() != s.c) {
            return Err(Error::Shape(
                "one gradient of embedding length is needed per item".into(),
            ));
        }
        let g = Tensor::from_vec(
            Shape::new(s.n, s.c, 1, 1),
            feat_grads.iter().flatten().copied().collect(),
        )?;
        let mut g = global_avg_pool_backward(s, &g)?;
        for i in (0..self.convs.len()).rev() {
            g = leaky_relu_backward(&tape.pre_act[i], &g, LEAKY_SLOPE)?;
            g = self.convs[i]
                .backward(&tape.inputs[i], &g, None, true)?
                .expect("input grad requested");
        }
        Ok(g)
    }
}
