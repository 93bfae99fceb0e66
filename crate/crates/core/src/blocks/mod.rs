//! Residual and transformer blocks with channel attention attached.

pub mod conv;
pub mod sources;
pub mod transformer;

pub use conv::{ConvBlock, ConvBlockKind, ConvBlockSpec, BOTTLENECK_EXPANSION};
pub use sources::{bridge_tap, BlockTrace, BridgeSourceConfig, TapPoint, TapType};
pub use transformer::{Integration, TransformerBlock, TransformerBlockSpec, TransformerStage, TransformerTrace};
