//! Slice-wise convolutional estimator of S0 and R2* from multi-echo magnitude
//! data, with training objectives and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod infer;
pub mod layers;
pub mod objective;
pub mod train;
pub mod unet;

pub use checkpoint::{NetCheckpoint, TrainingMeta};
pub use config::{InputTransform, NetConfig};
pub use error::{NetError, Result};
pub use infer::{net_forward, net_gradients, net_infer_volume, net_init, register, NetEstimator, Network};
pub use objective::{LossMaskPolicy, Objective, ObjectiveRegistry, SliceSample};
pub use unet::{ParamEntry, Plan};
pub use train::{train, TrainConfig, TrainReport};
