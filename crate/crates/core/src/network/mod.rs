//! Layer graphs: manifests, channel masks, parameter accounting, and the
//! trainable network.

pub mod compact;
pub mod count;
pub mod manifest;
pub mod masks;
pub mod model;
pub mod zoo;

use std::fmt;
use std::str::FromStr;

pub use count::{count_flops, count_params, ParamCount};
pub use manifest::{ArchitectureManifest, LayerKind, LayerSpec, Topology};
pub use masks::ChannelMaskSet;
pub use model::{Forward, LayerParams, Network, NormParams, Phase, WeightParam};

/// How the source weights are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Finetune,
    Splora { rank: usize },
    Lora { rank: usize },
}

impl Mode {
    pub fn rank(self) -> usize {
        match self {
            Mode::Finetune => 0,
            Mode::Splora { rank } | Mode::Lora { rank } => rank,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Finetune => "finetune",
            Mode::Splora { .. } => "splora",
            Mode::Lora { .. } => "lora",
        }
    }

    /// Parses a mode name with the rank supplied separately.
    pub fn parse(name: &str, rank: usize) -> crate::Result<Self> {
        let mode = match name {
            "finetune" => Mode::Finetune,
            "splora" => Mode::Splora { rank },
            "lora" => Mode::Lora { rank },
            other => {
                return Err(crate::Error::InvalidArgument(format!(
                    "unknown mode `{other}` (expected finetune, splora, or lora)"
                )))
            }
        };
        if mode != Mode::Finetune && rank == 0 {
            return Err(crate::Error::Rank { rank, max: usize::MAX });
        }
        Ok(mode)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Finetune => f.write_str("finetune"),
            Mode::Splora { rank } => write!(f, "splora(r={rank})"),
            Mode::Lora { rank } => write!(f, "lora(r={rank})"),
        }
    }
}

impl FromStr for Mode {
    type Err = crate::Error;

    /// Accepts `finetune`, `splora:8`, `lora:32`.
    fn from_str(s: &str) -> crate::Result<Self> {
        match s.split_once(':') {
            Some((name, r)) => {
                let rank = r
                    .parse()
                    .map_err(|_| crate::Error::InvalidArgument(format!("bad rank in `{s}`")))?;
                Mode::parse(name, rank)
            }
            None => Mode::parse(s, 0),
        }
    }
}
