use rand::Rng;
use serde::{Deserialize, Serialize};
use xmodal_nn::{
    dropout_backward, dropout_forward, instance_norm, instance_norm_backward, leaky_relu,
    leaky_relu_backward, relu, relu_backward, tanh, tanh_backward, Conv2d, ConvGeom, ConvParams,
    ConvTranspose2d, DropoutMask, InstanceNormCache, Tensor,
};

use super::{Mode, INIT_STD, LEAKY_SLOPE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of stride-2 down (and up) levels.
    pub depth: usize,
    pub base_channels: usize,
    /// Channel multiplier cap relative to `base_channels`.
    #[serde(default = "default_max_mult")]
    pub max_channel_mult: usize,
    pub dropout_rate: f64,
    /// Decoder blocks carrying dropout, counted from the innermost (0).
    pub dropout_levels: Vec<usize>,
    /// Keep dropout on in [`Mode::Eval`].
    #[serde(default = "default_true")]
    pub dropout_at_eval: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

fn default_max_mult() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl GeneratorConfig {
    /// 8 levels, 64 base channels, for 256x256 images.
    pub fn full_scale() -> Self {
        Self {
            depth: 8,
            base_channels: 64,
            max_channel_mult: 8,
            dropout_rate: 0.5,
            dropout_levels: vec![0, 1, 2],
            dropout_at_eval: true,
            in_channels: 3,
            out_channels: 3,
        }
    }

    /// 6 levels for 64x64 images.
    pub fn desk_scale() -> Self {
        Self {
            depth: 6,
            base_channels: 32,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument(
                "generator depth must be >= 1".into(),
            ));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(
                "generator channels must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channels of encoder level `i` (0-based).
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels * (1usize << i.min(20)).min(self.max_channel_mult.max(1))
    }

    /// Required divisor of the input side length.
    pub fn size_divisor(&self) -> usize {
        1 << self.depth
    }
}

/// U-Net generator. Encoder level `i` is concatenated into decoder block
/// `depth - 1 - i` (0 = innermost); the innermost encoder output is not
/// normalized and the output passes through `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    down: Vec<Conv2d>,
    up: Vec<ConvTranspose2d>,
}

/// Intermediate values kept for [`Generator::backward`].
pub struct GeneratorTape {
    input: Tensor,
    /// Encoder outputs after normalization.
    enc: Vec<Tensor>,
    /// Pre-normalization encoder outputs' norm caches (levels 1..depth-1).
    enc_norm: Vec<Option<InstanceNormCache>>,
    /// Decoder block inputs before ReLU.
    dec_in: Vec<Tensor>,
    dec_norm: Vec<Option<InstanceNormCache>>,
    dec_drop: Vec<Option<DropoutMask>>,
    output: Tensor,
}

impl GeneratorTape {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.level_channels(i - 1)
            };
            down.push(Conv2d::new(
                ConvGeom::new(cin, config.level_channels(i), 4, 2, 1),
                INIT_STD,
                rng,
            ));
        }
        let mut up = Vec::with_capacity(d);
        for j in 0..d {
            let cin = if j == 0 {
                config.level_channels(d - 1)
            } else {
                2 * config.level_channels(d - 1 - j)
            };
            let cout = if j + 1 < d {
                config.level_channels(d - 2 - j)
            } else {
                config.out_channels
            };
            up.push(ConvTranspose2d::new(
                ConvGeom::new(cin, cout, 4, 2, 1),
                INIT_STD,
                rng,
            ));
        }
        Ok(Self { config, down, up })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Parameters in a fixed order: encoder convs, then decoder convs.
    pub fn params(&self) -> Vec<&ConvParams> {
        self.down
            .iter()
            .map(|c| &c.params)
            .chain(self.up.iter().map(|c| &c.params))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ConvParams> {
        self.down
            .iter_mut()
            .map(|c| &mut c.params)
            .chain(self.up.iter_mut().map(|c| &mut c.params))
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.down.len())
            .map(|i| format!("down.{i}"))
            .chain((0..self.up.len()).map(|j| format!("up.{j}")))
            .collect()
    }

    /// Replace parameters, validating each buffer against the config.
    pub fn set_params(&mut self, params: Vec<ConvParams>) -> Result<()> {
        if params.len() != self.down.len() + self.up.len() {
            return Err(Error::Shape(format!(
                "generator expects {} parameter groups, got {}",
                self.down.len() + self.up.len(),
                params.len()
            )));
        }
        let mut it = params.into_iter();
        for conv in &mut self.down {
            *conv = Conv2d::from_params(conv.geom, it.next().expect("counted"))?;
        }
        for conv in &mut self.up {
            *conv = ConvTranspose2d::from_params(conv.geom, it.next().expect("counted"))?;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<ConvParams> {
        self.params()
            .into_iter()
            .map(ConvParams::zeros_like)
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let div = self.config.size_divisor();
        if !s.h.is_multiple_of(div) || !s.w.is_multiple_of(div) || s.h == 0 || s.w == 0 {
            return Err(Error::Shape(format!(
                "generator input {}x{} not divisible by 2^{} = {div}",
                s.h, s.w, self.config.depth
            )));
        }
        if s.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {}",
                self.config.in_channels, s.c
            )));
        }
        Ok(())
    }

    fn dropout_active(&self, mode: Mode, block: usize) -> bool {
        self.config.dropout_rate > 0.0
            && self.config.dropout_levels.contains(&block)
            && (mode == Mode::Train || self.config.dropout_at_eval)
            && block + 1 < self.config.depth
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
        Ok(self.forward_tape(x, mode, rng, None)?.output)
    }

    /// Forward pass with the skip from encoder level `level` replaced by
    /// zeros. Used to check that every skip connection is wired.
    pub fn forward_without_skip(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
        level: usize,
    ) -> Result<Tensor> {
        Ok(self.forward_tape(x, mode, rng, Some(level))?.output)
    }

    pub fn forward_tape(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
        zeroed_skip: Option<usize>,
    ) -> Result<GeneratorTape> {
        self.check_input(x)?;
        let d = self.config.depth;
        let mut enc = Vec::with_capacity(d);
        let mut enc_norm = Vec::with_capacity(d);
        for i in 0..d {
            let z = if i == 0 {
                self.down[0].forward(x)?
            } else {
                self.down[i].forward(&leaky_relu(&enc[i - 1], LEAKY_SLOPE))?
            };
            if i > 0 && i + 1 < d {
                let (n, cache) = instance_norm(&z);
                enc.push(n);
                enc_norm.push(Some(cache));
            } else {
                enc.push(z);
                enc_norm.push(None);
            }
        }

        let mut dec_in = Vec::with_capacity(d);
        let mut dec_norm = Vec::with_capacity(d);
        let mut dec_drop = Vec::with_capacity(d);
        let mut prev: Option<Tensor> = None;
        let mut output = None;
        for j in 0..d {
            let input = match prev.take() {
                None => enc[d - 1].clone(),
                Some(u) => {
                    let level = d - 1 - j;
                    if zeroed_skip == Some(level) {
                        let zeros = Tensor::zeros(enc[level].shape());
                        Tensor::concat_channels(&zeros, &u)?
                    } else {
                        Tensor::concat_channels(&enc[level], &u)?
                    }
                }
            };
            let t = self.up[j].forward(&relu(&input))?;
            dec_in.push(input);
            if j + 1 == d {
                output = Some(tanh(&t));
                dec_norm.push(None);
                dec_drop.push(None);
                break;
            }
            let (mut u, cache) = instance_norm(&t);
            dec_norm.push(Some(cache));
            if self.dropout_active(mode, j) {
                let (dropped, mask) = dropout_forward(&u, self.config.dropout_rate, rng);
                u = dropped;
                dec_drop.push(Some(mask));
            } else {
                dec_drop.push(None);
            }
            prev = Some(u);
        }
        Ok(GeneratorTape {
            input: x.clone(),
            enc,
            enc_norm,
            dec_in,
            dec_norm,
            dec_drop,
            output: output.expect("depth >= 1"),
        })
    }

    /// Back-propagate `grad_out` (gradient of the loss with respect to the
    /// generator output) and add parameter gradients into `grads`.
    pub fn backward(
        &self,
        tape: &GeneratorTape,
        grad_out: &Tensor,
        grads: &mut [ConvParams],
    ) -> Result<()> {
        let d = self.config.depth;
        let (down_grads, up_grads) = grads.split_at_mut(d);
        let mut enc_grad: Vec<Option<Tensor>> = vec![None; d];
        let add = |slot: &mut Option<Tensor>, g: Tensor| -> Result<()> {
            match slot {
                Some(acc) => acc.add_scaled(&g, 1.0)?,
                None => *slot = Some(g),
            }
            Ok(())
        };

        let mut g = tanh_backward(&tape.output, grad_out)?;
        for j in (0..d).rev() {
            if j + 1 < d {
                if let Some(mask) = &tape.dec_drop[j] {
                    g = dropout_backward(mask, &g);
                }
                g = instance_norm_backward(tape.dec_norm[j].as_ref().expect("norm cache"), &g)?;
            }
            let input = &tape.dec_in[j];
            let r = relu(input);
            let gr = self.up[j]
                .backward(&r, &g, Some(&mut up_grads[j]), true)?
                .expect("input grad requested");
            let gin = relu_backward(input, &gr)?;
            if j == 0 {
                add(&mut enc_grad[d - 1], gin)?;
            } else {
                let level = d - 1 - j;
                let (g_skip, g_prev) = gin.split_channels(tape.enc[level].shape().c);
                add(&mut enc_grad[level], g_skip)?;
                g = g_prev;
            }
        }

        for i in (0..d).rev() {
            let Some(mut ge) = enc_grad[i].take() else {
                continue;
            };
            if let Some(cache) = &tape.enc_norm[i] {
                ge = instance_norm_backward(cache, &ge)?;
            }
            if i == 0 {
                self.down[0].backward(&tape.input, &ge, Some(&mut down_grads[0]), false)?;
            } else {
                let prev = &tape.enc[i - 1];
                let a = leaky_relu(prev, LEAKY_SLOPE);
                let ga = self.down[i]
                    .backward(&a, &ge, Some(&mut down_grads[i]), true)?
                    .expect("input grad requested");
                add(
                    &mut enc_grad[i - 1],
                    leaky_relu_backward(prev, &ga, LEAKY_SLOPE)?,
                )?;
            }
        }
        Ok(())
    }
}
