//! Selecting the frozen embedding network: a seeded built-in network or
//! weights loaded from a named-tensor archive.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::networks::{EmbeddingArch, EmbeddingNetwork, Preprocessing};

pub const EMBEDDER_KIND: &str = "embedder";
const PREFIX: &str = "psi";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Builtin,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    /// Archive path, for `external` only.
    #[serde(default)]
    pub weight_path: Option<PathBuf>,
    pub embedding_dim: usize,
    /// Initialization seed of the built-in network.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocessing: Preprocessing,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Builtin,
            weight_path: None,
            embedding_dim: 128,
            seed: 0,
            preprocessing: Preprocessing::default(),
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding_dim must be positive".into(),
            ));
        }
        if self.kind == EmbedderKind::External && self.weight_path.is_none() {
            return Err(Error::Config(
                "external embedder needs a weight_path".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_embedder(spec: &EmbedderSpec) -> Result<EmbeddingNetwork> {
    spec.validate()?;
    let net = match spec.kind {
        EmbedderKind::Builtin => {
            EmbeddingNetwork::seeded(EmbeddingArch::builtin(spec.embedding_dim), spec.seed)?
        }
        EmbedderKind::External => {
            let path = spec.weight_path.as_deref().expect("validated");
            let net = read_embedder(path)?;
            if net.embedding_dim() != spec.embedding_dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.embedding_dim,
                    found: net.embedding_dim(),
                });
            }
            net
        }
    };
    Ok(net.with_preprocessing(spec.preprocessing))
}

/// Write an embedding network as an `embedder` archive.
pub fn save_embedder(net: &EmbeddingNetwork, path: impl AsRef<Path>) -> Result<()> {
    let mut a = Archive::new(EMBEDDER_KIND, serde_json::json!({ "arch": net.arch() }));
    a.push_params(PREFIX, &net.param_names(), net.params());
    a.save(path)
}

fn read_embedder(path: &Path) -> Result<EmbeddingNetwork> {
    let a = Archive::load(path)?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if a.kind != EMBEDDER_KIND {
        return Err(bad(format!(
            "expected an {EMBEDDER_KIND} archive, found `{}`",
            a.kind
        )));
    }
    let arch: EmbeddingArch = a
        .meta
        .get("arch")
        .cloned()
        .ok_or_else(|| bad("missing arch".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| bad(format!("bad arch: {e}"))))?;
    let names: Vec<String> = (0..arch.widths.len())
        .map(|i| format!("block.{i}"))
        .collect();
    let params = a
        .take_params(PREFIX, &names)
        .map_err(|e| bad(e.to_string()))?;
    EmbeddingNetwork::from_params(arch, params).map_err(|e| bad(e.to_string()))
}
