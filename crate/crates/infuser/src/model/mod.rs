//! Decoder-only transformer with bottleneck adapters parallel to a
//! contiguous range of sublayers and a per-layer gating head (the infuser)
//! deciding how much adapter output to merge back into the stream.

pub mod backward;
pub mod forward;
pub mod generate;
pub mod params;

pub use backward::{backward, BackSignals, Grads};
pub use forward::{
    adapter_layer, forward, fuse_output, infuser_score, AdapterWeights, ForwardOpts, ForwardTrace,
    InfuserWeights,
};
pub use generate::{generate, GenerateOpts};
pub use params::{ModelParams, ParamStore, Tensor};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const INFUSER_HIDDEN: usize = 32;
pub const RC_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Total transformer layers.
    pub layers: usize,
    /// Hidden dimension.
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab < 4 {
            return Err(Error::Config("vocab must cover the 4 specials".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterPlacement {
    Ffn,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterRegion {
    Bottom,
    Middle,
    Top,
    LastM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Number of adapted layers.
    pub count: usize,
    /// First adapted layer index (adapted layers are contiguous).
    pub first: usize,
    /// Bottleneck dimension d'.
    pub bottleneck: usize,
    pub placement: AdapterPlacement,
}

impl AdapterConfig {
    pub fn last_m(layers: usize, m: usize, bottleneck: usize) -> Self {
        assert!(m >= 1 && m <= layers);
        AdapterConfig {
            count: m,
            first: layers - m,
            bottleneck,
            placement: AdapterPlacement::Ffn,
        }
    }

    pub fn with_region(layers: usize, m: usize, bottleneck: usize, region: AdapterRegion) -> Self {
        assert!(m >= 1 && m <= layers);
        let first = match region {
            AdapterRegion::Bottom => 0,
            AdapterRegion::Middle => (layers - m) / 2,
            AdapterRegion::Top | AdapterRegion::LastM => layers - m,
        };
        AdapterConfig {
            count: m,
            first,
            bottleneck,
            placement: AdapterPlacement::Ffn,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.count == 0 || self.bottleneck == 0 {
            return Err(Error::Config("adapter count and bottleneck must be >= 1".into()));
        }
        if self.first + self.count > layers {
            return Err(Error::Config(format!(
                "adapter region [{}, {}) exceeds {} layers",
                self.first,
                self.first + self.count,
                layers
            )));
        }
        Ok(())
    }

    /// Index of `layer` within the adapted range, if adapted.
    pub fn slot(&self, layer: usize) -> Option<usize> {
        if layer >= self.first && layer < self.first + self.count {
            Some(layer - self.first)
        } else {
            None
        }
    }

    pub fn layers(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.count
    }
}

/// How adapter output merges with the sublayer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseMode {
    /// Adapters ignored entirely.
    Base,
    /// Ungated merge: sublayer output + adapter output.
    Plain,
    /// Gated merge: sublayer output + r * adapter output.
    Infuser,
}

impl std::str::FromStr for FuseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(FuseMode::Base),
            "plain" => Ok(FuseMode::Plain),
            "infuser" => Ok(FuseMode::Infuser),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}
