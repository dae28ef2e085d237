//! Prior-conditioned, memory-enhanced adverse-weather image restoration.
//!
//! A small transformer encoder/decoder with hand-written backward passes,
//! generic over the floating-point type (`f32` for training, `f64` for
//! gradient checks). Concrete aliases for both precisions live at the crate root.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod imb;
pub mod io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prior;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{DataConfig, TrainConfig};
pub use data::{DegradationSpec, Weather, WeatherMix};
pub use error::{Error, Result};
pub use model::{Ablation, ModelConfig};
pub use scalar::{Dtype, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type MemoryBank32 = imb::MemoryBank<f32>;
pub type MemoryBank64 = imb::MemoryBank<f64>;
pub type PriorEmbedding32 = prior::PriorEmbedding<f32>;
pub type PriorEmbedding64 = prior::PriorEmbedding<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
