//! Darknet-style network definitions and binary weights.

pub mod cfg;
pub mod weights;

pub use cfg::{parse_cfg, Activation, ConvSpec, Layer, LayerSpec, NetSpec, NetworkConfig, Shape, YoloSpec};
pub use weights::{load_weights, save_weights, BatchNorm, ConvWeights, Model, WeightsHeader};
