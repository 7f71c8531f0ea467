//! Tensor-level building blocks on top of candle.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{snake, ConvSpec, LayerNormNoBias, Linear, Snake, WnConv1d, WnConvTranspose1d};
pub use params::{randn, Init, Params};
