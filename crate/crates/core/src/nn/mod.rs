//! Layers, loss, and the multilayer perceptron built from them.

mod activation;
mod batchnorm;
mod checkpoint;
mod dense;
mod loss;
mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use activation::{relu, relu_prime};
pub use batchnorm::{BatchNorm, BnGradients};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dense::{DenseBackward, DenseLayer, QuantizedInput};
pub use loss::hinge_loss;
pub use model::{Block, BlockGradients, Mlp, StepConfig};

use crate::quantize::SampleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForwardMode {
    FullPrecision,
    BinaryConnect,
    TernaryConnect,
}

impl ForwardMode {
    pub fn sample_kind(&self) -> Option<SampleKind> {
        match self {
            ForwardMode::FullPrecision => None,
            ForwardMode::BinaryConnect => Some(SampleKind::Binary),
            ForwardMode::TernaryConnect => Some(SampleKind::Ternary),
        }
    }
}

/// How weight updates are formed: generic multiplies against the cached
/// input, or shifts against its power-of-two quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackwardPath {
    Full,
    Qbp,
}

/// Which weights carry the error signal to the layer below when the forward
/// pass used sampled weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackwardWeights {
    #[default]
    Sampled,
    Full,
}

macro_rules! keyword_enum {
    ($ty:ty { $($kw:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($kw => Ok($variant),)+
                    other => Err(format!(
                        "unknown value {other:?}, expected one of: {}",
                        [$($kw),+].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $(v if *v == $variant => $kw,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}

keyword_enum!(ForwardMode {
    "full" => ForwardMode::FullPrecision,
    "binary" => ForwardMode::BinaryConnect,
    "ternary" => ForwardMode::TernaryConnect,
});

keyword_enum!(BackwardPath {
    "full" => BackwardPath::Full,
    "qbp" => BackwardPath::Qbp,
});

keyword_enum!(BackwardWeights {
    "sampled" => BackwardWeights::Sampled,
    "full" => BackwardWeights::Full,
});
