//! Simulation of neural network training on analog resistive crossbar
//! arrays.
//!
//! A weight matrix lives on an [`tile::AnalogTile`]: bounded weights with a
//! finite number of states, noisy analog products behind DAC/ADC
//! converters, and stochastic pulsed outer-product updates. The digital
//! periphery ([`management`]) rescales inputs and outputs around the tile,
//! and [`remap`] maps each layer's weight range onto the device range.
//! [`network`] stacks tile-backed layers into a classifier that [`trainer`]
//! fits with plain SGD on data from [`data`].
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type.

pub mod data;
pub mod error;
pub mod layers;
pub mod management;
pub mod network;
pub mod pulse;
pub mod remap;
pub mod scalar;
pub mod tile;
pub mod trainer;

pub use data::{AugmentConfig, Dataset, Split};
pub use error::{Result, RpuError};
pub use management::{managed_mvm, Direction, IoManagement, MvmResult};
pub use network::{LayerSpec, Mode, Network, NetworkCheckpoint, NetworkSpec, RemapSpec, RpuSpec};
pub use pulse::{pulsed_update, PulseConfig};
pub use remap::{make_remap, RemapConfig};
pub use scalar::Scalar;
pub use tile::{count_states, AnalogTile, ConverterConfig, DeviceConfig};
pub use trainer::{evaluate, train, EpochMetrics, MetricsCsv, TrainConfig};

pub type AnalogTileF32 = AnalogTile<f32>;
pub type AnalogTileF64 = AnalogTile<f64>;
pub type NetworkF32 = Network<f32>;
pub type NetworkF64 = Network<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type DatasetF64 = Dataset<f64>;
