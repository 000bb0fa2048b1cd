//! Architecture descriptors shared by the generator and discriminator.
//!
//! Layer and parameter counts are always derived from these descriptors so
//! that an audit reflects whatever the builder would construct.

use serde::{Deserialize, Serialize};

/// One convolution in a network, optionally followed by batch norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub batch_norm: bool,
}

impl ConvSpec {
    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    /// Convolution weights, bias and batch-norm scale/shift.
    pub fn param_count(&self) -> usize {
        self.weight_count()
            + if self.bias { self.out_channels } else { 0 }
            + if self.batch_norm { 2 * self.out_channels } else { 0 }
    }
}

/// Audited size of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub conv_layers: usize,
    pub params: usize,
}

impl LayerCounts {
    pub fn from_specs(specs: &[ConvSpec]) -> Self {
        Self {
            conv_layers: specs.len(),
            params: specs.iter().map(ConvSpec::param_count).sum(),
        }
    }

    pub fn add(self, other: LayerCounts) -> LayerCounts {
        LayerCounts {
            conv_layers: self.conv_layers + other.conv_layers,
            params: self.params + other.params,
        }
    }
}

/// Reference sizes the default builds are audited against.
pub const GENERATOR_CONV_LAYERS: usize = 24;
pub const GENERATOR_PARAM_TARGET: usize = 11_400_000;
pub const DISCRIMINATOR_CONV_LAYERS: usize = 6;
pub const DISCRIMINATOR_PARAM_TARGET: usize = 3_100_000;
pub const TOTAL_PARAM_TARGET: usize = 14_500_000;
/// Relative tolerance on parameter totals.
pub const PARAM_TOLERANCE: f64 = 0.15;

pub fn within_budget(params: usize, target: usize) -> bool {
    let rel = (params as f64 - target as f64).abs() / target as f64;
    rel <= PARAM_TOLERANCE
}
