//! A small decoder-only vision-language model that reads screenshots and
//! writes device actions.
//!
//! Screenshots are cut into patches, encoded by a linear vision encoder and
//! mapped into the token embedding space by a projection matrix; the
//! resulting vectors take the place of `<img>` tokens in the sequence. The
//! decoder is adapted through LoRA while the freeze flags keep the rest of
//! the network fixed. Everything is generic over the float type so that
//! gradients can be checked in double precision.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod forward;
pub mod infer;
pub mod params;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{FreezeFlags, LrSchedule, ModelConfig, TrainConfig};
pub use error::{CheckpointError, ConfigError, InputError, TrainError};
pub use infer::{predict_episodes, InferenceModel};
pub use params::Params;
pub use train::{train, LossPoint, TrainOutcome};
