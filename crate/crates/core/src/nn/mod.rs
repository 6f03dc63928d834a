//! Minimal neural-network toolkit on top of `candle-core`.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::{Adam, StepInfo};
pub use layers::{Conv2d, ConvSpec, DepthwiseConv3, LayerNorm, Linear};
pub use params::{Init, NamedBuffer, Param, ParamBuilder, ParamSet};
