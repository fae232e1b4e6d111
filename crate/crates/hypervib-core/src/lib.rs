//! Trainable variational information bottleneck models whose layer weights
//! are conditioned on the rate-distortion trade-off weight by a lightweight
//! hypernetwork, plus exact linear-case oracles and a training harness for
//! device/network split inference across an additive-noise channel.

pub mod checks;
pub mod data_io;
pub mod diffcore;
mod error;
pub mod hyperlayers;
pub mod linear_oracle;
pub mod objective;
pub mod pipeline;
pub mod training;

pub use diffcore::{Bindings, Gradients, Graph, NodeId, RandomStream, Tensor};
pub use error::{Error, Result};
pub use hyperlayers::{Architecture, BetaAdjustedConv, BetaAdjustedDense, LayerSpec};
pub use linear_oracle::{LinearInstance, TwoLayerConstruction};
pub use objective::{DistortionKind, RateDistortion};
pub use pipeline::{Channel, Decoder, Encoder, EncoderMode, GaussianCode, Model};
pub use training::{Metrics, SweepCurve, TrainConfig, Trained};
