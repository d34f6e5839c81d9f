//! Generator, discriminator and the frozen embedding network.

mod discriminator;
mod embedding;
mod generator;

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorTape};
pub use embedding::{EmbeddingArch, EmbeddingNetwork, EmbeddingTape, Preprocessing};
pub use generator::{Generator, GeneratorConfig, GeneratorTape};

use serde::{Deserialize, Serialize};

/// Weight init standard deviation for the generator and discriminator.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}
