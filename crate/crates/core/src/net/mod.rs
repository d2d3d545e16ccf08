//! Shallow fully-convolutional inference engine.

pub mod fcnw;
mod layer;
mod network;
mod ops;

pub use fcnw::{load_weights, save_weights};
pub use layer::{output_len, Activation, ConvLayerSpec, Layer, LayerKind, PoolLayerSpec, PoolMode};
pub use network::{FeatureGrid, NetworkSpec, ReferenceDepth};
pub use ops::{conv_forward, pool_forward};
